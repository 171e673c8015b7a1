"""Tests for the pipeline configuration."""

from __future__ import annotations

import json
from typing import TYPE_CHECKING, Any

import pytest

from sdcnn.config import PipelineConfig, load_config
from sdcnn.errors import ConfigurationError
from sdcnn.evaluation import FoldScheme
from sdcnn.imagecore import SourceTag

if TYPE_CHECKING:
    from pathlib import Path


def test_defaults() -> None:
    """Without a file every default applies."""
    cfg = load_config(None)
    assert cfg == PipelineConfig()
    assert cfg.fold_scheme == FoldScheme("loocv")
    assert cfg.source_tags == (SourceTag.FFDM,)
    assert cfg.region == "crop"


def test_seeds_applied() -> None:
    """Model configs carry their own seeds."""
    cfg = PipelineConfig.from_dict({"seeds": {"shallow_train": 3, "gbt": 4}})
    assert cfg.train_config.rng_seed == 3
    assert cfg.gbt_config.rng_seed == 4
    assert cfg.seeds.master == 0


def test_roundtrip(tmp_path: Path) -> None:
    """A written config loads back equal."""
    cfg = PipelineConfig.from_dict(
        {
            "gbt": {"class_weights": [1, 2], "n_trees": 5},
            "sources": ["FFDM", "VIRTUAL"],
            "folds": "stratified:10",
            "train": {"patience": None},
        }
    )
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg.to_dict()), "utf-8")
    loaded = load_config(path)
    assert loaded == cfg
    assert loaded.gbt.class_weights == (1.0, 2.0)


@pytest.mark.parametrize(
    "data",
    [
        {"bogus": 1},
        {"gbt": {"trees": 3}},
        {"gbt": []},
        {"folds": "kfold"},
        {"threshold": 1.5},
        {"sources": ["MRI"]},
        {"input_source": "CT"},
        {"pairs_per_image": 0},
        {"window_step": 0},
        {"validation_cases": -1},
        {"region": "half"},
        {"train": {"batch_size": 0}},
    ],
)
def test_invalid(data: dict[str, Any]) -> None:
    """Unknown keys and out-of-range values are configuration errors."""
    with pytest.raises(ConfigurationError):
        PipelineConfig.from_dict(data)


def test_invalid_json(tmp_path: Path) -> None:
    """Broken files are configuration errors."""
    path = tmp_path / "config.json"
    path.write_text("{,}", "utf-8")
    with pytest.raises(ConfigurationError, match="not valid JSON"):
        load_config(path)
