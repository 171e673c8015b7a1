"""Tests for folds, metrics, ROC analysis and cross-validated experiments."""

from __future__ import annotations

import itertools
from collections import Counter
from typing import TYPE_CHECKING

import numpy as np
import pandas as pd
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from sdcnn.deep_features import feature_tag
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
from sdcnn.evaluation import (
    ROC_GRID,
    FoldScheme,
    compare_experiments,
    confusion_metrics,
    make_folds,
    mean_roc,
    read_feature_matrix,
    roc_auc,
    roc_frame,
    run_experiment,
    select_sources,
    source_contribution,
    write_feature_matrix,
    write_report,
)
from sdcnn.gbt import GbtConfig
from sdcnn.imagecore import SourceTag, ViewName
from sdcnn.synthetic import synthetic_feature_matrix

if TYPE_CHECKING:
    from pathlib import Path

FFDM = (SourceTag.FFDM,)
FFDM_VIRTUAL = (SourceTag.FFDM, SourceTag.VIRTUAL)


def _labels(values: list[int]) -> pd.Series:
    return pd.Series(
        values, index=[f"c{i:02d}" for i in range(len(values))], name="label"
    )


def _pairwise_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    pos, neg = scores[labels == 1], scores[labels == 0]
    wins = sum(
        1.0 if p > n else 0.5 if p == n else 0.0
        for p, n in itertools.product(pos, neg)
    )
    return wins / (pos.size * neg.size)


@pytest.mark.parametrize(
    "text, kind, k",
    [
        ("loocv", "loocv", None),
        ("stratified:10", "stratified", 10),
        (" LOOCV ", "loocv", None),
    ],
)
def test_fold_scheme_parse(text: str, kind: str, k: int | None) -> None:
    """Both spellings parse and print back."""
    scheme = FoldScheme.parse(text)
    assert (scheme.kind, scheme.k) == (kind, k)
    assert FoldScheme.parse(str(scheme)) == scheme


@pytest.mark.parametrize("text", ["kfold", "stratified:1", "stratified:", "loocv:3"])
def test_fold_scheme_invalid(text: str) -> None:
    """Unknown schemes and fewer than two folds are rejected."""
    with pytest.raises(ConfigurationError):
        FoldScheme.parse(text)


def test_loocv_folds() -> None:
    """Every case is tested exactly once, on its own."""
    labels = _labels([i % 2 for i in range(49)])
    plan = make_folds(labels, FoldScheme("loocv"), seed=0)
    assert plan.n_folds == 49
    for fold in range(49):
        assert plan.test_cases(fold) == [labels.index[fold]]
        assert len(plan.train_cases(fold)) == 48


def test_loocv_two_cases() -> None:
    """The smallest possible plan."""
    plan = make_folds(_labels([0, 1]), FoldScheme("loocv"), seed=0)
    assert plan.n_folds == 2
    assert plan.train_cases(0) == ["c01"]


def test_stratified_folds_balance() -> None:
    """Per-fold class counts differ by at most one."""
    labels = _labels([0] * 30 + [1] * 59)
    plan = make_folds(labels, FoldScheme("stratified", 10), seed=7)
    assert plan.n_folds == 10
    assert sorted(plan.assignments) == sorted(labels.index)
    for cls, expected in ((0, {3}), (1, {5, 6})):
        members = labels.index[labels == cls]
        counts = Counter(plan.assignments[c] for c in members)
        assert set(counts.values()) <= expected
    sizes = Counter(plan.assignments.values()).values()
    assert max(sizes) - min(sizes) <= 1


@settings(max_examples=50, deadline=None)
@given(
    n_benign=st.integers(1, 40),
    n_cancer=st.integers(1, 40),
    k=st.integers(2, 10),
    seed=st.integers(0, 2**32 - 1),
)
def test_stratified_folds_property(
    n_benign: int, n_cancer: int, k: int, seed: int
) -> None:
    """Any class split deals within one case of proportional."""
    assume(k <= n_benign + n_cancer)
    labels = _labels([0] * n_benign + [1] * n_cancer)
    plan = make_folds(labels, FoldScheme("stratified", k), seed=seed)
    assert sorted(plan.assignments) == sorted(labels.index)
    for cls in (0, 1):
        counts = Counter(plan.assignments[c] for c in labels.index[labels == cls])
        per_fold = [counts[f] for f in range(k)]
        assert max(per_fold) - min(per_fold) <= 1
    sizes = Counter(plan.assignments.values())
    assert max(sizes[f] for f in range(k)) - min(sizes[f] for f in range(k)) <= 1


def test_stratified_folds_deterministic() -> None:
    """The seed fixes the assignment."""
    labels = _labels([0] * 12 + [1] * 13)
    scheme = FoldScheme("stratified", 5)
    a = make_folds(labels, scheme, 3).assignments
    assert a == make_folds(labels, scheme, 3).assignments
    assert a != make_folds(labels, scheme, 4).assignments


def test_make_folds_errors() -> None:
    """Too few cases, too many folds and a single class are rejected."""
    with pytest.raises(ConfigurationError):
        make_folds(_labels([1]), FoldScheme("loocv"), 0)
    with pytest.raises(ConfigurationError):
        make_folds(_labels([0, 1, 1]), FoldScheme("stratified", 4), 0)
    with pytest.raises(DegenerateLabelsError):
        make_folds(_labels([1, 1, 1, 1]), FoldScheme("stratified", 2), 0)


def test_confusion_metrics() -> None:
    """Counts and rates at a threshold."""
    m = confusion_metrics([0.9, 0.4, 0.6, 0.2, 0.7], [1, 1, 0, 0, 0], 0.5)
    assert (m.tp, m.fn, m.tn, m.fp) == (1, 1, 1, 2)
    assert m.accuracy == pytest.approx(0.4)
    assert m.sensitivity == pytest.approx(0.5)
    assert m.specificity == pytest.approx(1 / 3)


def test_confusion_metrics_threshold_inclusive() -> None:
    """A score equal to the threshold predicts cancer."""
    m = confusion_metrics([0.5], [1], 0.5)
    assert m.tp == 1
    assert m.specificity is None


@pytest.mark.parametrize("threshold", [0.0, 1.0])
def test_confusion_metrics_extreme_thresholds(threshold: float) -> None:
    """At 0 everything is cancer; at 1 only scores of exactly 1 are."""
    m = confusion_metrics([0.2, 0.8], [0, 1], threshold)
    assert m.accuracy == 0.5
    assert (m.tp + m.fp) == (2 if threshold == 0.0 else 0)


@pytest.mark.parametrize(
    "scores, labels, threshold, error",
    [
        ([0.5], [1], 1.5, DomainError),
        ([0.5], [2], 0.5, DomainError),
        ([0.5, 0.1], [1], 0.5, ShapeError),
        ([], [], 0.5, DomainError),
    ],
)
def test_confusion_metrics_invalid(
    scores: list[float], labels: list[int], threshold: float, error: type[Exception]
) -> None:
    """Bad thresholds, labels or lengths are rejected."""
    with pytest.raises(error):
        confusion_metrics(scores, labels, threshold)


def test_roc_auc_matches_pairwise_count() -> None:
    """The trapezoid area equals the pairwise ranking probability, ties halved."""
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(2, 30))
        labels = rng.permutation(np.r_[0, 1, rng.integers(0, 2, n - 2)])
        scores = np.round(rng.random(n), 1)
        assert roc_auc(scores, labels).auc == pytest.approx(
            _pairwise_auc(scores, labels), abs=1e-12
        )


def test_roc_auc_monotone_invariance() -> None:
    """A strictly increasing transform of the scores keeps the AUC."""
    rng = np.random.default_rng(1)
    scores = rng.random(50)
    labels = rng.integers(0, 2, 50)
    labels[:2] = (0, 1)
    assert roc_auc(np.exp(3 * scores) - 1, labels).auc == pytest.approx(
        roc_auc(scores, labels).auc
    )


def test_roc_auc_curve_endpoints() -> None:
    """The curve runs from (0, 0) to (1, 1)."""
    curve = roc_auc([0.9, 0.1, 0.5], [1, 0, 1])
    assert curve.auc == 1.0
    assert (curve.fpr[0], curve.tpr[0]) == (0.0, 0.0)
    assert (curve.fpr[-1], curve.tpr[-1]) == (1.0, 1.0)


def test_roc_auc_constant_scores() -> None:
    """Uninformative scores have area one half."""
    assert roc_auc([0.3] * 6, [0, 1, 0, 1, 1, 0]).auc == 0.5


def test_roc_auc_single_class() -> None:
    """AUC is undefined without both classes."""
    with pytest.raises(UndefinedMetricError):
        roc_auc([0.1, 0.9], [1, 1])


def test_roc_frame_rows() -> None:
    """One table row per curve point, in curve order."""
    curve = roc_auc([0.9, 0.1, 0.5, 0.5, 0.3], [1, 0, 1, 0, 0])
    frame = roc_frame(curve.fpr, curve.tpr)
    assert len(frame) == len(curve.fpr)
    np.testing.assert_array_equal(frame["fpr"], curve.fpr)
    assert frame["tpr"].is_monotonic_increasing


def test_mean_roc() -> None:
    """A perfect and a chance curve average to 0.75."""
    perfect = roc_auc([0.9, 0.1], [1, 0])
    chance = roc_auc([0.5, 0.5], [1, 0])
    averaged = mean_roc([perfect, chance])
    np.testing.assert_array_equal(averaged.fpr, ROC_GRID)
    np.testing.assert_allclose(averaged.tpr, (1 + ROC_GRID) / 2, atol=1e-12)
    assert averaged.auc_mean == pytest.approx(0.75)
    assert averaged.auc_sd == pytest.approx(0.25)
    with pytest.raises(DomainError):
        mean_roc([])


def _tags(*sources: SourceTag) -> list[str]:
    return [feature_tag(s, ViewName.CC, 1, ch) for s in sources for ch in range(2)]


def test_source_contribution() -> None:
    """Used features and importance share per source."""
    table = source_contribution(
        np.array([0.0, 0.0, 0.5, 0.1, 0.4, 0.0]),
        _tags(SourceTag.VIRTUAL, SourceTag.LE, SourceTag.FFDM),
    )
    assert table["source"].tolist() == ["LE", "FFDM", "VIRTUAL"]
    assert table["n_features_used"].tolist() == [2, 1, 0]
    np.testing.assert_allclose(table["fraction"], [0.6, 0.4, 0.0])


def test_source_contribution_without_importance() -> None:
    """Without any split every share is zero."""
    table = source_contribution(np.zeros(2), _tags(SourceTag.LE))
    assert table["fraction"].tolist() == [0.0]


@pytest.mark.parametrize(
    "tags", [["src=LE", "bogus"], ["src=LE;view=CC;stage=1;ch=0"]]
)
def test_source_contribution_bad_tags(tags: list[str]) -> None:
    """Malformed tags and length mismatches are tagging errors."""
    with pytest.raises(TaggingError):
        source_contribution(np.array([0.5, 0.5]), tags)


def test_select_sources() -> None:
    """Only the requested sources' columns come back, in column order."""
    matrix = synthetic_feature_matrix(n_cases=10, seed=0)
    selected = select_sources(matrix, FFDM)
    assert len(selected.columns) == 16
    assert all(c.startswith("src=FFDM;") for c in selected.columns)
    assert selected.index.equals(matrix.index)


def test_select_sources_missing_source() -> None:
    """A source without columns is a completeness error."""
    matrix = synthetic_feature_matrix(n_cases=10, seed=0)
    with pytest.raises(DataCompletenessError, match="LE"):
        select_sources(matrix, (SourceTag.LE,))
    with pytest.raises(ConfigurationError):
        select_sources(matrix, ())


def test_select_sources_blank_block() -> None:
    """A blank view block names the incomplete case."""
    matrix = synthetic_feature_matrix(n_cases=10, seed=0)
    cols = [c for c in matrix.columns if c.startswith("src=VIRTUAL;view=MLO")]
    matrix.loc[3, cols] = np.nan
    assert select_sources(matrix, FFDM).shape == (10, 16)
    with pytest.raises(DataCompletenessError) as excinfo:
        select_sources(matrix, FFDM_VIRTUAL)
    assert excinfo.value.case_ids == ["case003"]


def test_select_sources_partial_block() -> None:
    """A partly blank block is a non-finite feature."""
    matrix = synthetic_feature_matrix(n_cases=10, seed=0)
    matrix.loc[2, feature_tag(SourceTag.FFDM, ViewName.CC, 1, 0)] = np.nan
    with pytest.raises(NonFiniteFeatureError):
        select_sources(matrix, FFDM)


@pytest.fixture(scope="module")
def matrix() -> pd.DataFrame:
    """Forty cases whose label signal sits in the virtual images."""
    return synthetic_feature_matrix(n_cases=40, seed=1, signal=3.0)


_CONFIG = GbtConfig(n_trees=15, max_features=8, rng_seed=5)
_SCHEME = FoldScheme("stratified", 5)


def test_run_experiment_report(matrix: pd.DataFrame) -> None:
    """Fold rows, a pooled row, normalized importances and per-case scores."""
    report = run_experiment(matrix, FFDM_VIRTUAL, _SCHEME, _CONFIG, seed=2)
    assert report.metrics["fold"].tolist() == ["0", "1", "2", "3", "4", "pooled"]
    assert report.metrics["n_cases"].tolist() == [8, 8, 8, 8, 8, 40]
    assert report.importance["score"].sum() == pytest.approx(1.0)
    assert len(report.importance) == 32
    assert report.scores["score"].between(0, 1).all()
    assert report.scores["case_id"].tolist() == matrix["case_id"].tolist()
    assert report.contribution["source"].tolist() == ["FFDM", "VIRTUAL"]
    assert report.contribution["fraction"].sum() == pytest.approx(1.0)
    assert len(report.roc) == ROC_GRID.size


def test_run_experiment_virtual_signal(matrix: pd.DataFrame) -> None:
    """Adding the informative source raises AUC and takes the importance."""
    ffdm = run_experiment(matrix, FFDM, _SCHEME, _CONFIG, seed=2)
    both = run_experiment(matrix, FFDM_VIRTUAL, _SCHEME, _CONFIG, seed=2)
    assert both.pooled["auc"] >= 0.75
    assert both.pooled["auc"] > ffdm.pooled["auc"]
    share = both.contribution.set_index("source")["fraction"]
    assert share["VIRTUAL"] > share["FFDM"]


def test_run_experiment_deterministic(matrix: pd.DataFrame, tmp_path: Path) -> None:
    """The same inputs write byte-identical report files."""
    names = ["report.json", "metrics.csv", "roc_points.csv", "importance.csv"]
    for run in ("a", "b"):
        report = run_experiment(matrix, FFDM_VIRTUAL, _SCHEME, _CONFIG, seed=2)
        write_report(report, tmp_path / run)
    for name in [*names, "contribution.csv", "scores.csv"]:
        assert (tmp_path / "a" / name).read_bytes() == (
            tmp_path / "b" / name
        ).read_bytes()


def test_run_experiment_loocv_separable() -> None:
    """LOOCV on well separated cases; the ROC is the pooled curve."""
    matrix = synthetic_feature_matrix(
        n_cases=20, seed=3, sources=FFDM, signal_source=SourceTag.FFDM, signal=6.0
    )
    config = GbtConfig(n_trees=10, max_features=16)
    report = run_experiment(matrix, FFDM, FoldScheme("loocv"), config, seed=0)
    assert len(report.metrics) == 21
    assert report.metrics["auc"].iloc[:-1].isna().all()
    assert report.pooled["auc"] >= 0.9
    assert report.auc_mean == pytest.approx(report.pooled["auc"])
    assert report.auc_sd == 0.0


def test_compare_experiments(matrix: pd.DataFrame) -> None:
    """One row per selection, all on the same fold plan."""
    comparison = compare_experiments(
        matrix, [FFDM, FFDM_VIRTUAL], _SCHEME, _CONFIG, seed=2
    )
    assert comparison.table["sources"].tolist() == ["FFDM", "FFDM+VIRTUAL"]
    assert len(comparison.reports) == 2
    for report in comparison.reports:
        assert report.scores["fold"].tolist() == (
            comparison.reports[0].scores["fold"].tolist()
        )
    with pytest.raises(ConfigurationError):
        compare_experiments(matrix, [], _SCHEME, _CONFIG)


def test_feature_matrix_csv(tmp_path: Path) -> None:
    """A written matrix reads back with its tags and blanks."""
    matrix = synthetic_feature_matrix(n_cases=6, seed=4)
    matrix.iloc[1, 2] = np.nan
    path = write_feature_matrix(tmp_path / "features.csv", matrix)
    pd.testing.assert_frame_equal(read_feature_matrix(path), matrix)


def test_feature_matrix_csv_invalid(tmp_path: Path) -> None:
    """Missing id columns and malformed tags are rejected."""
    path = tmp_path / "features.csv"
    path.write_text("case_id,src=LE\nc1,0.5\n", "utf-8")
    with pytest.raises(ShapeError):
        read_feature_matrix(path)
    path.write_text("case_id,label,src=LE\nc1,1,0.5\n", "utf-8")
    with pytest.raises(TaggingError):
        read_feature_matrix(path)
