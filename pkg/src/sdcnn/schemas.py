"""pandera schemas of the tables exchanged between pipeline stages."""

from __future__ import annotations

import numpy as np
import pandas as pd
import pandera.pandas as pa

#: Prefix of every provenance-tagged feature column.
FEATURE_TAG_PREFIX = "src="


def _feature_block(df: pd.DataFrame) -> np.ndarray:
    cols = [c for c in df.columns if str(c).startswith(FEATURE_TAG_PREFIX)]
    return df[cols].to_numpy(dtype=float)


FEATURE_MATRIX = pa.DataFrameSchema(
    {
        "case_id": pa.Column(str, unique=True),
        "label": pa.Column(int, pa.Check.isin([0, 1])),
    },
    checks=[
        pa.Check(
            lambda df: not bool(np.isinf(_feature_block(df)).any()),
            error="feature values must not be infinite",
        ),
        pa.Check(
            lambda df: any(str(c).startswith(FEATURE_TAG_PREFIX) for c in df.columns),
            error="no provenance-tagged feature columns",
        ),
    ],
)
"""One row per case: id, label (0 benign, 1 cancer), tagged feature columns.

A blank (NaN) block marks a view or source that was not extracted for the case.
"""

LABELS = pa.SeriesSchema(
    int,
    pa.Check.isin([0, 1]),
    index=pa.Index(str, unique=True),
    name="label",
)
"""Case labels indexed by case id."""

_UNIT = pa.Check.in_range(0.0, 1.0)

METRICS = pa.DataFrameSchema(
    {
        "fold": pa.Column(str),
        "n_cases": pa.Column(int, pa.Check.ge(1)),
        "accuracy": pa.Column(float, _UNIT),
        "sensitivity": pa.Column(float, _UNIT, nullable=True),
        "specificity": pa.Column(float, _UNIT, nullable=True),
        "auc": pa.Column(float, _UNIT, nullable=True),
    }
)
"""Per-fold and pooled classification metrics; undefined metrics are null."""

ROC_POINTS = pa.DataFrameSchema(
    {
        "fpr": pa.Column(float, _UNIT),
        "tpr": pa.Column(float, _UNIT),
    },
    checks=pa.Check(
        lambda df: bool(np.all(np.diff(df["fpr"].to_numpy()) >= 0)),
        error="fpr must be non-decreasing",
    ),
)

IMPORTANCE = pa.DataFrameSchema(
    {
        "feature": pa.Column(str, unique=True),
        "score": pa.Column(float, pa.Check.ge(0.0)),
    }
)

CONTRIBUTION = pa.DataFrameSchema(
    {
        "source": pa.Column(str, unique=True),
        "n_features_used": pa.Column(int, pa.Check.ge(0)),
        "fraction": pa.Column(float, _UNIT),
    }
)

LOSS_HISTORY = pa.DataFrameSchema(
    {
        "epoch": pa.Column(int, pa.Check.ge(1)),
        "train_loss": pa.Column(float, pa.Check.ge(0.0)),
        "validation_mse": pa.Column(float, pa.Check.ge(0.0), nullable=True),
    }
)

COMPARISON = pa.DataFrameSchema(
    {
        "sources": pa.Column(str, unique=True),
        "accuracy": pa.Column(float, _UNIT),
        "sensitivity": pa.Column(float, _UNIT, nullable=True),
        "specificity": pa.Column(float, _UNIT, nullable=True),
        "auc": pa.Column(float, _UNIT, nullable=True),
        "auc_mean": pa.Column(float, _UNIT, nullable=True),
        "auc_sd": pa.Column(float, pa.Check.ge(0.0), nullable=True),
    }
)
"""Side-by-side comparison of source selections evaluated on one fold plan."""
