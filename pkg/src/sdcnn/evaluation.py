"""Cross-validation, classification metrics, ROC analysis and source contribution.

The feature matrix is a :class:`pandas.DataFrame` with ``case_id``, ``label`` and one
column per provenance-tagged feature (see :func:`sdcnn.deep_features.feature_tag`).
Experiments select columns by source tag, so one matrix serves every source
combination.
"""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, replace
from logging import getLogger
from pathlib import Path
from typing import TYPE_CHECKING, Literal, NamedTuple

import numpy as np
import pandas as pd
from sklearn import metrics
from sklearn.model_selection import StratifiedKFold

from sdcnn import checks, contract, gbt, schemas
from sdcnn._lib import atomic_write_json, atomic_write_text, derive_seed
from sdcnn.deep_features import parse_feature_tag
from sdcnn.errors import (
    ConfigurationError,
    DataCompletenessError,
    DegenerateLabelsError,
    DomainError,
    NonFiniteFeatureError,
    ShapeError,
    TaggingError,
    UndefinedMetricError,
)
from sdcnn.imagecore import SourceTag

if TYPE_CHECKING:  # pragma: no cover
    import os
    from collections.abc import Mapping, Sequence

logger = getLogger(__name__)

#: FPR grid of the averaged ROC curve.
ROC_GRID = np.linspace(0.0, 1.0, 101)
DEFAULT_THRESHOLD = 0.5
POOLED = "pooled"
_NULLABLE_METRICS = {"sensitivity": float, "specificity": float, "auc": float}


@dataclass(frozen=True)
class FoldScheme:
    """``loocv`` or ``stratified:K``.

    >>> FoldScheme.parse("stratified:10")
    FoldScheme(kind='stratified', k=10)
    >>> str(FoldScheme.parse("loocv"))
    'loocv'
    """

    kind: Literal["loocv", "stratified"]
    k: int | None = None

    def __post_init__(self) -> None:
        too_few = self.k is None or self.k < 2  # noqa: PLR2004
        if self.kind == "stratified" and too_few:
            msg = f"stratified folds need k >= 2, got {self.k}"
            raise ConfigurationError(msg)
        if self.kind == "loocv" and self.k is not None:
            raise ConfigurationError("loocv takes no fold count")

    @classmethod
    def parse(cls, text: str) -> FoldScheme:
        """Parse the command-line spelling."""
        text = text.strip().lower()
        if text == "loocv":
            return cls("loocv")
        match = re.fullmatch(r"stratified:(\d+)", text)
        if match is None:
            msg = f"unknown fold scheme {text!r}; use 'loocv' or 'stratified:K'"
            raise ConfigurationError(msg)
        return cls("stratified", int(match.group(1)))

    def __str__(self) -> str:
        return self.kind if self.kind == "loocv" else f"stratified:{self.k}"


@dataclass(frozen=True)
class FoldPlan:
    """Assignment of every case to exactly one test fold."""

    scheme: FoldScheme
    assignments: Mapping[str, int]
    rng_seed: int

    @property
    def n_folds(self) -> int:
        """Number of folds."""
        return max(self.assignments.values()) + 1

    def test_cases(self, fold: int) -> list[str]:
        """Cases tested in *fold*, in plan order."""
        return [c for c, f in self.assignments.items() if f == fold]

    def train_cases(self, fold: int) -> list[str]:
        """Cases trained on in *fold*, in plan order."""
        return [c for c, f in self.assignments.items() if f != fold]


@contract.argument("labels", schemas.LABELS)
def make_folds(labels: pd.Series, scheme: FoldScheme, seed: int) -> FoldPlan:
    """Assign cases (the index of *labels*) to folds.

    LOOCV gives every case its own fold. Stratified k-fold uses a seeded, shuffled
    :class:`~sklearn.model_selection.StratifiedKFold`, which deals the class-sorted
    cases round-robin, so per-fold class counts and fold sizes differ by at most one.

    :raises ConfigurationError: fewer than 2 cases, or more folds than cases.
    :raises DegenerateLabelsError: a stratified scheme with a single class.
    """
    case_ids = [str(c) for c in labels.index]
    n = len(case_ids)
    if n < 2:  # noqa: PLR2004
        raise ConfigurationError("cross-validation needs at least 2 cases")
    if scheme.kind == "loocv":
        return FoldPlan(scheme, {c: i for i, c in enumerate(case_ids)}, seed)
    k = int(scheme.k or 0)
    if k > n:
        msg = f"{k} folds requested for {n} cases"
        raise ConfigurationError(msg)
    values = labels.to_numpy()
    if np.unique(values).size < 2:  # noqa: PLR2004
        raise DegenerateLabelsError("stratified folds need both classes")
    splitter = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed % 2**32)
    fold_of: dict[str, int] = {}
    with warnings.catch_warnings():
        # a class smaller than k leaves some folds without it
        warnings.simplefilter("ignore", UserWarning)
        for fold, (_, test) in enumerate(splitter.split(np.zeros(n), values)):
            fold_of.update((case_ids[i], fold) for i in test)
    return FoldPlan(scheme, {c: fold_of[c] for c in case_ids}, seed)


class ConfusionMetrics(NamedTuple):
    """Threshold metrics; a conditional rate is ``None`` when its class is absent."""

    accuracy: float
    sensitivity: float | None
    specificity: float | None
    tp: int
    fp: int
    tn: int
    fn: int


def _as_score_label(scores: object, labels: object) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(np.int64).ravel()
    if s.shape != y.shape:
        msg = f"{s.size} scores for {y.size} labels"
        raise ShapeError(msg)
    if s.size == 0:
        raise DomainError("no scores to evaluate")
    if not np.isin(y, (0, 1)).all():
        raise DomainError("labels must be 0 (benign) or 1 (cancer)")
    return s, y


def confusion_metrics(
    scores: object, labels: object, threshold: float = DEFAULT_THRESHOLD
) -> ConfusionMetrics:
    """Predict cancer iff ``score >= threshold`` and count the confusion cells.

    >>> confusion_metrics([0.9, 0.8, 0.6, 0.2], [1, 1, 0, 0], 0.75).accuracy
    1.0
    """
    s, y = _as_score_label(scores, labels)
    if not 0.0 <= threshold <= 1.0:
        msg = f"threshold {threshold} outside [0, 1]"
        raise DomainError(msg)
    pred = (s >= threshold).astype(np.int64)
    tn, fp, fn, tp = (
        int(c) for c in metrics.confusion_matrix(y, pred, labels=[0, 1]).ravel()
    )
    return ConfusionMetrics(
        accuracy=(tp + tn) / y.size,
        sensitivity=tp / (tp + fn) if tp + fn else None,
        specificity=tn / (tn + fp) if tn + fp else None,
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
    )


class RocCurve(NamedTuple):
    """ROC points from ``(0, 0)`` to ``(1, 1)`` and the area under them."""

    auc: float
    fpr: np.ndarray
    tpr: np.ndarray


def roc_auc(scores: object, labels: object) -> RocCurve:
    """ROC over every distinct score threshold; AUC by the trapezoid rule.

    Tied scores move FPR and TPR together, so the area equals
    ``P(pos > neg) + P(pos == neg) / 2``.

    :raises UndefinedMetricError: only one class is present.
    """
    s, y = _as_score_label(scores, labels)
    if np.unique(y).size < 2:  # noqa: PLR2004
        raise UndefinedMetricError("AUC needs both classes")
    fpr, tpr, _ = metrics.roc_curve(y, s, drop_intermediate=False)
    return RocCurve(float(metrics.auc(fpr, tpr)), fpr, tpr)


def _tpr_on_grid(curve: RocCurve, grid: np.ndarray) -> np.ndarray:
    """Linear interpolation; at a vertical segment the top of the segment is used."""
    fpr_u, first = np.unique(curve.fpr, return_index=True)
    last = np.r_[first[1:] - 1, curve.fpr.size - 1]
    bottom, top = curve.tpr[first], curve.tpr[last]
    i = np.clip(np.searchsorted(fpr_u, grid, side="right") - 1, 0, fpr_u.size - 1)
    nxt = np.minimum(i + 1, fpr_u.size - 1)
    span = fpr_u[nxt] - fpr_u[i]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(span > 0, (grid - fpr_u[i]) / span, 0.0)
    return top[i] + t * (bottom[nxt] - top[i])


class MeanRoc(NamedTuple):
    """Vertically averaged ROC curve with mean and (population) sd of the AUCs."""

    fpr: np.ndarray
    tpr: np.ndarray
    auc_mean: float
    auc_sd: float


def mean_roc(per_fold_rocs: Sequence[RocCurve]) -> MeanRoc:
    """Average fold curves on a fixed FPR grid (0 to 1, step 0.01)."""
    if not per_fold_rocs:
        raise DomainError("mean ROC needs at least one curve")
    tprs = np.array([_tpr_on_grid(c, ROC_GRID) for c in per_fold_rocs])
    aucs = np.array([c.auc for c in per_fold_rocs])
    return MeanRoc(
        ROC_GRID.copy(), tprs.mean(axis=0), float(aucs.mean()), float(aucs.std())
    )


@contract.result(schemas.ROC_POINTS, checks.same_length_as("fpr, tpr"))
def roc_frame(fpr: np.ndarray, tpr: np.ndarray) -> pd.DataFrame:
    """ROC points as a two-column table."""
    return pd.DataFrame({"fpr": np.asarray(fpr, float), "tpr": np.asarray(tpr, float)})


@contract.result(schemas.CONTRIBUTION)
def source_contribution(
    importance: pd.Series | np.ndarray, feature_tags: Sequence[str]
) -> pd.DataFrame:
    """Number of used features and share of total importance per image source.

    A feature is used when its (fold-averaged) importance is nonzero. Sources appear
    in :class:`~sdcnn.imagecore.SourceTag` order, one row each for every source the
    tags mention.

    :raises TaggingError: a feature tag is missing or malformed.
    """
    scores = np.asarray(importance, dtype=np.float64)
    if scores.shape != (len(feature_tags),):
        msg = f"{scores.size} importances for {len(feature_tags)} feature tags"
        raise TaggingError(msg)
    sources = np.array([parse_feature_tag(t).source.value for t in feature_tags])
    total = scores.sum()
    rows = []
    for source in SourceTag:
        sel = sources == source.value
        if not sel.any():
            continue
        rows.append(
            {
                "source": source.value,
                "n_features_used": int(np.count_nonzero(scores[sel] > 0)),
                "fraction": float(scores[sel].sum() / total) if total > 0 else 0.0,
            }
        )
    return pd.DataFrame(rows, columns=["source", "n_features_used", "fraction"])


def feature_columns(matrix: pd.DataFrame) -> list[str]:
    """The provenance-tagged columns of a feature matrix, in column order."""
    return [c for c in matrix.columns if str(c).startswith(schemas.FEATURE_TAG_PREFIX)]


def _block_key(tag: str) -> tuple[str, str]:
    parsed = parse_feature_tag(tag)
    return parsed.view.value, parsed.source.value


@contract.argument("matrix", schemas.FEATURE_MATRIX)
@contract.result(checks.same_index_as("matrix"))
def select_sources(matrix: pd.DataFrame, sources: Sequence[SourceTag]) -> pd.DataFrame:
    """Feature columns of the requested sources, checked for completeness.

    :raises DataCompletenessError: a source has no columns, or some cases lack a
        (view, source) block (all values blank).
    :raises NonFiniteFeatureError: a block is only partly filled.
    """
    wanted = {s.value for s in sources}
    if not wanted:
        raise ConfigurationError("no image sources selected")
    tags = feature_columns(matrix)
    blocks: dict[tuple[str, str], list[str]] = {}
    for tag in tags:
        key = _block_key(tag)
        if key[1] in wanted:
            blocks.setdefault(key, []).append(tag)
    missing_sources = wanted - {src for _, src in blocks}
    case_ids = matrix["case_id"].astype(str).tolist()
    if missing_sources:
        msg = f"feature matrix has no columns for source(s) {sorted(missing_sources)}"
        raise DataCompletenessError(msg, case_ids)
    incomplete: set[str] = set()
    for cols in blocks.values():
        blank = matrix[cols].isna().to_numpy()
        all_blank = blank.all(axis=1)
        if (blank.any(axis=1) & ~all_blank).any():
            raise NonFiniteFeatureError("feature block contains NaN values")
        incomplete.update(c for c, b in zip(case_ids, all_blank) if b)
    if incomplete:
        msg = "cases lack features for a requested source"
        raise DataCompletenessError(msg, sorted(incomplete))
    return matrix[[t for t in tags if _block_key(t)[1] in wanted]]


@dataclass(frozen=True, eq=False)
class EvalReport:
    """Outcome of one cross-validated experiment.

    ``metrics`` has one row per fold plus a ``pooled`` row over all out-of-fold
    scores. ``roc`` is the mean ROC curve over folds whose test set holds both
    classes; when no fold does (LOOCV), it is the pooled curve on the same grid.
    """

    sources: tuple[SourceTag, ...]
    scheme: FoldScheme
    threshold: float
    metrics: pd.DataFrame
    roc: pd.DataFrame
    auc_mean: float
    auc_sd: float
    importance: pd.DataFrame
    contribution: pd.DataFrame
    scores: pd.DataFrame

    @property
    def pooled(self) -> pd.Series:
        """The pooled metrics row."""
        return self.metrics.set_index("fold").loc[POOLED]

    @property
    def n_features_used(self) -> int:
        """Features with nonzero fold-averaged importance."""
        return int((self.importance["score"] > 0).sum())


def _metrics_row(
    fold: str, scores: np.ndarray, y: np.ndarray, threshold: float
) -> dict[str, object]:
    m = confusion_metrics(scores, y, threshold)
    try:
        auc: float | None = roc_auc(scores, y).auc
    except UndefinedMetricError:
        auc = None
    return {
        "fold": fold,
        "n_cases": int(y.size),
        "accuracy": m.accuracy,
        "sensitivity": m.sensitivity,
        "specificity": m.specificity,
        "auc": auc,
    }


@contract.result(schemas.METRICS, key=lambda r: r.metrics)
@contract.result(schemas.ROC_POINTS, key=lambda r: r.roc)
@contract.result(schemas.IMPORTANCE, key=lambda r: r.importance)
@contract.argument("matrix", schemas.FEATURE_MATRIX)
def run_experiment(
    matrix: pd.DataFrame,
    sources: Sequence[SourceTag],
    scheme: FoldScheme,
    config: gbt.GbtConfig,
    threshold: float = DEFAULT_THRESHOLD,
    seed: int = 0,
) -> EvalReport:
    """Cross-validate boosted trees on the features of *sources*.

    Each fold fits on its training cases with the seed
    ``derive_seed(config.rng_seed, fold)`` and scores its test cases. Importances are
    averaged over folds and renormalized to sum to 1.
    """
    X = select_sources(matrix, sources)
    tags = list(X.columns)
    values = X.to_numpy(dtype=np.float64)
    case_ids = matrix["case_id"].astype(str).to_numpy()
    y = matrix["label"].to_numpy(dtype=np.int64)
    labels = pd.Series(y, index=pd.Index(case_ids), name="label")
    plan = make_folds(labels, scheme, seed)
    row_of = {c: i for i, c in enumerate(case_ids)}

    oof = np.full(y.size, np.nan)
    fold_col = np.zeros(y.size, dtype=np.int64)
    rows = []
    curves = []
    importances = []
    for fold in range(plan.n_folds):
        test = np.array([row_of[c] for c in plan.test_cases(fold)])
        train = np.array([row_of[c] for c in plan.train_cases(fold)])
        model = gbt.fit(
            values[train],
            y[train],
            replace(config, rng_seed=derive_seed(config.rng_seed, fold)),
        )
        oof[test] = gbt.predict_proba_matrix(model, values[test])
        fold_col[test] = fold
        importances.append(model.importance)
        rows.append(_metrics_row(str(fold), oof[test], y[test], threshold))
        if np.unique(y[test]).size == 2:  # noqa: PLR2004
            curves.append(roc_auc(oof[test], y[test]))
        logger.debug("fold %d: %d train / %d test cases", fold, train.size, test.size)
    rows.append(_metrics_row(POOLED, oof, y, threshold))
    if not curves:
        curves = [roc_auc(oof, y)]
    averaged = mean_roc(curves)

    imp = np.mean(importances, axis=0)
    if imp.sum() > 0:
        imp = imp / imp.sum()
    importance = (
        pd.DataFrame({"feature": tags, "score": imp})
        .sort_values(["score", "feature"], ascending=[False, True], kind="stable")
        .reset_index(drop=True)
    )
    report = EvalReport(
        sources=tuple(sources),
        scheme=scheme,
        threshold=threshold,
        metrics=pd.DataFrame(rows).astype(_NULLABLE_METRICS),
        roc=roc_frame(averaged.fpr, averaged.tpr),
        auc_mean=averaged.auc_mean,
        auc_sd=averaged.auc_sd,
        importance=importance,
        contribution=source_contribution(imp, tags),
        scores=pd.DataFrame(
            {"case_id": case_ids, "label": y, "fold": fold_col, "score": oof}
        ),
    )
    pooled = report.pooled
    logger.info(
        "sources=%s folds=%s: accuracy %.3f, AUC %s, %d features used",
        "+".join(s.value for s in sources),
        scheme,
        pooled["accuracy"],
        "n/a" if pd.isna(pooled["auc"]) else f"{pooled['auc']:.3f}",
        report.n_features_used,
    )
    return report


def _csv(df: pd.DataFrame) -> str:
    return df.to_csv(index=False, lineterminator="\n")


def _none_if_nan(value: object) -> object:
    return None if pd.isna(value) else value


def report_summary(report: EvalReport) -> dict[str, object]:
    """JSON-ready summary of a report."""
    pooled = report.pooled
    return {
        "auc_mean": report.auc_mean,
        "auc_sd": report.auc_sd,
        "contribution": report.contribution.to_dict(orient="records"),
        "n_features_used": report.n_features_used,
        "n_folds": int(len(report.metrics) - 1),
        "pooled": {
            k: _none_if_nan(pooled[k])
            for k in ("accuracy", "sensitivity", "specificity", "auc")
        },
        "scheme": str(report.scheme),
        "sources": [s.value for s in report.sources],
        "threshold": report.threshold,
    }


def write_report(report: EvalReport, out_dir: str | os.PathLike[str]) -> Path:
    """Write ``report.json`` and the metrics, ROC, importance, contribution and
    per-case score CSVs into *out_dir*.
    """
    out = Path(out_dir)
    atomic_write_text(out / "metrics.csv", _csv(report.metrics))
    atomic_write_text(out / "roc_points.csv", _csv(report.roc))
    atomic_write_text(out / "importance.csv", _csv(report.importance))
    atomic_write_text(out / "contribution.csv", _csv(report.contribution))
    atomic_write_text(out / "scores.csv", _csv(report.scores))
    return atomic_write_json(out / "report.json", report_summary(report))


class Comparison(NamedTuple):
    """Side-by-side table and the full report of every source selection."""

    table: pd.DataFrame
    reports: tuple[EvalReport, ...]


@contract.result(schemas.COMPARISON, key=lambda c: c.table)
def compare_experiments(
    matrix: pd.DataFrame,
    selections: Sequence[Sequence[SourceTag]],
    scheme: FoldScheme,
    config: gbt.GbtConfig,
    threshold: float = DEFAULT_THRESHOLD,
    seed: int = 0,
) -> Comparison:
    """Run the same fold plan over several source selections."""
    if not selections:
        raise ConfigurationError("nothing to compare")
    reports = tuple(
        run_experiment(matrix, sel, scheme, config, threshold, seed)
        for sel in selections
    )
    rows = []
    for report in reports:
        pooled = report.pooled
        rows.append(
            {
                "sources": "+".join(s.value for s in report.sources),
                "accuracy": float(pooled["accuracy"]),
                "sensitivity": pooled["sensitivity"],
                "specificity": pooled["specificity"],
                "auc": pooled["auc"],
                "auc_mean": report.auc_mean,
                "auc_sd": report.auc_sd,
            }
        )
    return Comparison(pd.DataFrame(rows).astype(_NULLABLE_METRICS), reports)


@contract.result(schemas.FEATURE_MATRIX)
def read_feature_matrix(path: str | os.PathLike[str]) -> pd.DataFrame:
    """Load a feature matrix CSV (header row of feature tags)."""
    matrix = pd.read_csv(path, dtype={"case_id": str})
    if "case_id" not in matrix or "label" not in matrix:
        msg = f"{path}: feature matrix needs case_id and label columns"
        raise ShapeError(msg)
    for tag in feature_columns(matrix):
        parse_feature_tag(tag)
    return matrix


@contract.argument("matrix", schemas.FEATURE_MATRIX)
def write_feature_matrix(path: str | os.PathLike[str], matrix: pd.DataFrame) -> Path:
    """Write a feature matrix CSV atomically."""
    return atomic_write_text(path, _csv(matrix))
