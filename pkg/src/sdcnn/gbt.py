"""Gradient-boosted regression trees for benign (0) vs. cancer (1) classification.

Boosting minimizes the (class-weighted) logistic loss. Every stage fits a regression
tree to the per-sample negative gradients ``y - p``: splits maximize the weighted
variance reduction of those gradients, leaves take the one-step Newton estimate
``sum(w * g) / sum(w * p * (1 - p))``. The variance reduction a split achieves is
credited to its feature; normalized, these sums are the feature importances.

:func:`gini_impurity` implements the classification-tree impurity; boosting stages
fit real-valued gradients, where the variance criterion takes its place.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from logging import getLogger
from pathlib import Path
from typing import TYPE_CHECKING, Any, Union

import numpy as np

from sdcnn._lib import atomic_write_json
from sdcnn.errors import (
    ConfigurationError,
    DegenerateLabelsError,
    DomainError,
    NonFiniteFeatureError,
    ShapeError,
)

if TYPE_CHECKING:  # pragma: no cover
    import os
    from collections.abc import Sequence

logger = getLogger(__name__)

MODEL_FORMAT = "sdcnn-gbt"
_PROBA_EPS = 1e-15
#: Relative tolerance under which squared errors and gains count as equal.
_REL_TOL = 1e-9
_MIN_HESSIAN = 1e-12


def gini_impurity(class_fractions: Sequence[float]) -> float:
    """Gini impurity ``1 - sum(p_i ** 2)`` of a class distribution.

    >>> gini_impurity([0.5, 0.5])
    0.5
    >>> gini_impurity([1.0, 0.0])
    0.0
    >>> gini_impurity([0.25, 0.25, 0.25, 0.25])
    0.75

    :raises DomainError: a fraction is negative or they do not sum to 1.
    """
    p = np.asarray(class_fractions, dtype=np.float64)
    if p.ndim != 1 or p.size == 0 or (p < 0).any():
        raise DomainError("class fractions must be a non-empty list of values >= 0")
    if abs(p.sum() - 1.0) > 1e-9:  # noqa: PLR2004
        msg = f"class fractions sum to {p.sum()}, not 1"
        raise DomainError(msg)
    return float(1.0 - np.sum(p * p))


@dataclass(frozen=True)
class Leaf:
    """Terminal node contributing ``value`` to the raw score."""

    value: float


@dataclass(frozen=True)
class Split:
    """Internal node: rows with ``x[feature] <= threshold`` go left."""

    feature: int
    threshold: float
    gain: float
    left: TreeNode
    right: TreeNode


TreeNode = Union[Split, Leaf]


@dataclass(frozen=True)
class GbtConfig:
    """Boosting hyperparameters.

    ``max_features=None`` samples ``floor(sqrt(n_features))`` candidates per split.
    ``min_samples_leaf`` counts distinct feature rows, so repeating every sample
    leaves the fitted trees unchanged.
    Setting ``n_iter_no_change`` holds out ``validation_fraction`` of each class and
    stops once the validation loss has not improved for that many stages.
    """

    n_trees: int = 21
    max_depth: int = 3
    max_features: int | None = None
    min_samples_leaf: int = 2
    learning_rate: float = 0.1
    class_weights: tuple[float, float] = (1.0, 1.0)
    rng_seed: int = 0
    n_iter_no_change: int | None = None
    validation_fraction: float = 0.1

    def __post_init__(self) -> None:
        if self.n_trees < 1 or self.max_depth < 1 or self.min_samples_leaf < 1:
            msg = "n_trees, max_depth and min_samples_leaf must all be >= 1"
            raise ConfigurationError(msg)
        if self.max_features is not None and self.max_features < 1:
            raise ConfigurationError("max_features must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")
        weights = tuple(float(w) for w in self.class_weights)
        if len(weights) != 2 or min(weights) <= 0:  # noqa: PLR2004
            msg = f"class_weights must be two positive values, got {self.class_weights}"
            raise ConfigurationError(msg)
        object.__setattr__(self, "class_weights", weights)
        if self.n_iter_no_change is not None and self.n_iter_no_change < 1:
            raise ConfigurationError("n_iter_no_change must be >= 1")
        if not 0 < self.validation_fraction < 1:
            raise ConfigurationError("validation_fraction must lie in (0, 1)")

    def features_per_split(self, n_features: int) -> int:
        """Number of candidate features drawn at each node."""
        if self.max_features is None:
            return max(1, math.isqrt(n_features))
        if self.max_features > n_features:
            msg = f"max_features={self.max_features} exceeds {n_features} features"
            raise ConfigurationError(msg)
        return self.max_features


@dataclass(frozen=True, eq=False)
class GbtModel:
    """Fitted ensemble: ``sigmoid(base_score + learning_rate * sum(tree(x)))``."""

    base_score: float
    trees: tuple[TreeNode, ...]
    importance: np.ndarray
    n_features: int
    config: GbtConfig = field(default_factory=GbtConfig)

    def __post_init__(self) -> None:
        imp = np.array(self.importance, dtype=np.float64, copy=True)
        if imp.shape != (self.n_features,) or (imp < 0).any():
            raise ShapeError("importance must hold one value >= 0 per feature")
        imp.setflags(write=False)
        object.__setattr__(self, "importance", imp)
        object.__setattr__(self, "trees", tuple(self.trees))

    @property
    def has_splits(self) -> bool:
        """Whether any tree splits; without splits every importance is 0."""
        return any(isinstance(t, Split) for t in self.trees)


def sigmoid(z: np.ndarray | float) -> np.ndarray:
    """Logistic function clipped to the open interval (0, 1)."""
    p = 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))
    return np.clip(p, _PROBA_EPS, 1.0 - _PROBA_EPS)


def _weighted_log_loss(y: np.ndarray, raw: np.ndarray, w: np.ndarray) -> float:
    p = sigmoid(raw)
    return float(-np.sum(w * (y * np.log(p) + (1 - y) * np.log1p(-p))) / w.sum())


class _TreeGrower:
    """Grows one regression tree on gradient targets."""

    def __init__(
        self,
        X: np.ndarray,
        grad: np.ndarray,
        hess: np.ndarray,
        weights: np.ndarray,
        config: GbtConfig,
        rng: np.random.Generator,
        gains: np.ndarray,
        row_keys: np.ndarray,
    ) -> None:
        self.X = X
        self.row_keys = row_keys
        self.grad = grad
        self.hess = hess
        self.weights = weights
        self.config = config
        self.rng = rng
        self.gains = gains
        self.k = config.features_per_split(X.shape[1])

    def leaf(self, idx: np.ndarray) -> Leaf:
        w = self.weights[idx]
        num = float(np.sum(w * self.grad[idx]))
        den = float(np.sum(w * self.hess[idx]))
        return Leaf(num / max(den, _MIN_HESSIAN))

    def grow(self, idx: np.ndarray, depth: int = 0) -> TreeNode:
        if depth >= self.config.max_depth:
            return self.leaf(idx)
        # drawn at every node below max_depth so sample multiplicity never shifts
        # the stream
        candidates = np.sort(
            self.rng.choice(self.X.shape[1], size=self.k, replace=False)
        )
        best = self.best_split(idx, candidates)
        if best is None:
            return self.leaf(idx)
        feature, threshold, gain = best
        go_left = self.X[idx, feature] <= threshold
        self.gains[feature] += gain
        return Split(
            feature,
            threshold,
            gain,
            self.grow(idx[go_left], depth + 1),
            self.grow(idx[~go_left], depth + 1),
        )

    def best_split(
        self, idx: np.ndarray, candidates: np.ndarray
    ) -> tuple[int, float, float] | None:
        """Highest-gain ``(feature, threshold, gain)``.

        Gains within a relative tolerance are ties, resolved towards the lower
        feature index, then the lower threshold.
        """
        msl = self.config.min_samples_leaf
        n = idx.size
        keys = self.row_keys[idx]
        n_distinct = np.unique(keys).size
        if n_distinct < 2 * msl:
            return None
        w = self.weights[idx]
        wr = w * self.grad[idx]
        total_w, total_wr = w.sum(), wr.sum()
        sum_sq = float(np.sum(wr * self.grad[idx]))
        parent_sse = sum_sq - float(total_wr**2 / total_w)
        # pure nodes leave only rounding noise
        if parent_sse <= _REL_TOL * sum_sq:
            return None
        tol = _REL_TOL * parent_sse
        best: tuple[int, float, float] | None = None
        for feature in candidates:
            x = self.X[idx, feature]
            order = np.argsort(x, kind="stable")
            xs = x[order]
            cw = np.cumsum(w[order])[:-1]
            cwr = np.cumsum(wr[order])[:-1]
            # identical rows share every x, so no split separates them
            first = np.zeros(n, dtype=bool)
            first[np.unique(keys[order], return_index=True)[1]] = True
            n_left = np.cumsum(first)[:-1]
            valid = (
                (xs[:-1] < xs[1:])
                & (n_left >= msl)
                & (n_distinct - n_left >= msl)
            )
            if not valid.any():
                continue
            with np.errstate(divide="ignore", invalid="ignore"):
                gain = (
                    cwr**2 / cw
                    + (total_wr - cwr) ** 2 / (total_w - cw)
                    - total_wr**2 / total_w
                )
            gain = np.where(valid, gain, -np.inf)
            pos = int(np.flatnonzero(gain >= gain.max() - tol)[0])
            if gain[pos] <= tol or (best is not None and gain[pos] <= best[2] + tol):
                continue
            threshold = 0.5 * (xs[pos] + xs[pos + 1])
            if threshold >= xs[pos + 1]:
                threshold = float(xs[pos])
            best = (int(feature), float(threshold), float(gain[pos]))
        return best


def _predict_tree(node: TreeNode, X: np.ndarray) -> np.ndarray:
    out = np.empty(X.shape[0])
    stack: list[tuple[TreeNode, np.ndarray]] = [(node, np.arange(X.shape[0]))]
    while stack:
        current, idx = stack.pop()
        if isinstance(current, Leaf):
            out[idx] = current.value
            continue
        go_left = X[idx, current.feature] <= current.threshold
        stack.append((current.left, idx[go_left]))
        stack.append((current.right, idx[~go_left]))
    return out


def _check_training_data(X: np.ndarray, y: np.ndarray) -> None:
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:  # noqa: PLR2004
        msg = f"features {X.shape} and labels {y.shape} do not line up"
        raise ShapeError(msg)
    if X.shape[0] < 2 or X.shape[1] < 1:  # noqa: PLR2004
        raise ShapeError("training needs at least 2 cases and 1 feature")
    if not np.isin(y, (0, 1)).all():
        raise DomainError("labels must be 0 (benign) or 1 (cancer)")
    if np.unique(y).size < 2:  # noqa: PLR2004
        raise DegenerateLabelsError("training labels contain a single class")
    if not np.isfinite(X).all():
        bad = sorted({int(j) for j in np.nonzero(~np.isfinite(X))[1]})
        msg = f"non-finite feature values in columns {bad[:10]}"
        raise NonFiniteFeatureError(msg)


def _validation_split(
    y: np.ndarray, fraction: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Per-class hold-out; every class keeps at least one training case."""
    held: list[np.ndarray] = []
    for cls in (0, 1):
        members = rng.permutation(np.flatnonzero(y == cls))
        n_val = min(max(1, round(fraction * members.size)), members.size - 1)
        held.append(members[:n_val])
    val = np.sort(np.concatenate(held))
    train = np.setdiff1d(np.arange(y.size), val)
    return train, val


def fit(features: np.ndarray, labels: np.ndarray, config: GbtConfig) -> GbtModel:
    """Fit a boosted ensemble; deterministic given ``config.rng_seed``.

    :raises DegenerateLabelsError: only one class is present.
    :raises NonFiniteFeatureError: a feature value is NaN or infinite.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    _check_training_data(X, y)
    rng = np.random.default_rng(config.rng_seed)
    train_idx = np.arange(y.size)
    val_idx = np.empty(0, dtype=np.int64)
    if config.n_iter_no_change is not None:
        train_idx, val_idx = _validation_split(y, config.validation_fraction, rng)

    all_w = np.where(y == 1, config.class_weights[1], config.class_weights[0])
    Xt, yt, wt = X[train_idx], y[train_idx], all_w[train_idx]
    prior = float(np.sum(wt * yt) / wt.sum())
    base = math.log(prior / (1.0 - prior))
    raw = np.full(yt.size, base)
    raw_val = np.full(val_idx.size, base)
    # min_samples_leaf counts distinct feature rows
    row_keys = np.unique(Xt, axis=0, return_inverse=True)[1].ravel()

    trees: list[TreeNode] = []
    gains_per_stage: list[np.ndarray] = []
    best_loss, best_n, stale = math.inf, 0, 0
    for stage in range(config.n_trees):
        p = sigmoid(raw)
        gains = np.zeros(X.shape[1])
        grower = _TreeGrower(
            Xt, yt - p, p * (1 - p), wt, config, rng, gains, row_keys
        )
        tree = grower.grow(np.arange(yt.size))
        trees.append(tree)
        gains_per_stage.append(gains)
        raw = raw + config.learning_rate * _predict_tree(tree, Xt)
        if config.n_iter_no_change is None:
            continue
        raw_val = raw_val + config.learning_rate * _predict_tree(tree, X[val_idx])
        loss = _weighted_log_loss(y[val_idx], raw_val, all_w[val_idx])
        if loss < best_loss:
            best_loss, best_n, stale = loss, stage + 1, 0
        else:
            stale += 1
            if stale >= config.n_iter_no_change:
                logger.debug(
                    "early stop after %d stages, keeping %d", stage + 1, best_n
                )
                break
    if config.n_iter_no_change is not None:
        trees, gains_per_stage = trees[:best_n], gains_per_stage[:best_n]

    total_gain = np.sum(gains_per_stage, axis=0)
    importance = (
        total_gain / total_gain.sum() if total_gain.sum() > 0 else np.zeros(X.shape[1])
    )
    model = GbtModel(base, tuple(trees), importance, X.shape[1], config)
    logger.debug(
        "fitted %d trees on %d cases x %d features", len(trees), *X.shape
    )
    return model


def raw_score(model: GbtModel, features: np.ndarray) -> np.ndarray:
    """Untransformed additive score of each row."""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.n_features:  # noqa: PLR2004
        msg = f"expected rows of {model.n_features} features, got shape {X.shape}"
        raise ShapeError(msg)
    out = np.full(X.shape[0], model.base_score)
    for tree in model.trees:
        out += model.config.learning_rate * _predict_tree(tree, X)
    return out


def predict_proba_matrix(model: GbtModel, features: np.ndarray) -> np.ndarray:
    """Cancer probability of every row of a case-by-feature matrix."""
    return sigmoid(raw_score(model, features))


def predict_proba(model: GbtModel, features: np.ndarray) -> float:
    """Cancer probability of a single feature vector, in (0, 1)."""
    x = np.asarray(features, dtype=np.float64)
    if x.shape != (model.n_features,):
        msg = f"expected {model.n_features} features, got shape {x.shape}"
        raise ShapeError(msg)
    return float(predict_proba_matrix(model, x[None, :])[0])


def feature_importance(model: GbtModel) -> np.ndarray:
    """Normalized per-feature impurity reduction; all zeros if nothing splits."""
    return model.importance


def _node_to_dict(node: TreeNode) -> dict[str, Any]:
    if isinstance(node, Leaf):
        return {"value": node.value}
    return {
        "feature": node.feature,
        "gain": node.gain,
        "left": _node_to_dict(node.left),
        "right": _node_to_dict(node.right),
        "threshold": node.threshold,
    }


def _node_from_dict(data: dict[str, Any]) -> TreeNode:
    if "value" in data:
        return Leaf(float(data["value"]))
    return Split(
        int(data["feature"]),
        float(data["threshold"]),
        float(data["gain"]),
        _node_from_dict(data["left"]),
        _node_from_dict(data["right"]),
    )


def save_model(path: str | os.PathLike[str], model: GbtModel) -> Path:
    """Persist trees, importances and configuration as JSON."""
    config = asdict(model.config)
    config["class_weights"] = list(model.config.class_weights)
    return atomic_write_json(
        path,
        {
            "base_score": model.base_score,
            "config": config,
            "format": MODEL_FORMAT,
            "importance": model.importance.tolist(),
            "n_features": model.n_features,
            "trees": [_node_to_dict(t) for t in model.trees],
        },
    )


def load_model(path: str | os.PathLike[str]) -> GbtModel:
    """Read a model written by :func:`save_model`."""
    data = json.loads(Path(path).read_text("utf-8"))
    if data.get("format") != MODEL_FORMAT:
        msg = f"{path}: not a boosted-tree model file"
        raise ConfigurationError(msg)
    config = dict(data["config"])
    config["class_weights"] = tuple(config["class_weights"])
    return GbtModel(
        float(data["base_score"]),
        tuple(_node_from_dict(t) for t in data["trees"]),
        np.asarray(data["importance"], dtype=np.float64),
        int(data["n_features"]),
        GbtConfig(**config),
    )


def tree_depth(node: TreeNode) -> int:
    """Number of split levels below *node* (a leaf has depth 0)."""
    if isinstance(node, Leaf):
        return 0
    return 1 + max(tree_depth(node.left), tree_depth(node.right))
