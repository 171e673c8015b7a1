"""Pipeline configuration.

Settings come from a JSON file (``--config``) whose sections mirror the dataclasses
below; command-line flags override single values. Every seed is explicit and
defaults to 0, so two runs with the same inputs and configuration produce the same
files.

>>> cfg = PipelineConfig.from_dict({"gbt": {"n_trees": 31}, "threshold": 0.75})
>>> cfg.gbt.n_trees, cfg.gbt.max_depth, cfg.threshold
(31, 3, 0.75)
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import TYPE_CHECKING, Any

from sdcnn.errors import ConfigurationError
from sdcnn.evaluation import DEFAULT_THRESHOLD, FoldScheme
from sdcnn.gbt import GbtConfig
from sdcnn.imagecore import RegionT, SourceTag
from sdcnn.shallow_cnn import TrainConfig

if TYPE_CHECKING:  # pragma: no cover
    import os


@dataclass(frozen=True)
class Seeds:
    """Master seed (fold plans, case splits) and the per-model seeds."""

    master: int = 0
    shallow_train: int = 0
    gbt: int = 0


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a pipeline run depends on besides its input files."""

    seeds: Seeds = field(default_factory=Seeds)
    train: TrainConfig = field(default_factory=TrainConfig)
    gbt: GbtConfig = field(default_factory=GbtConfig)
    folds: str = "loocv"
    threshold: float = DEFAULT_THRESHOLD
    sources: tuple[str, ...] = ("FFDM",)
    pairs_per_image: int = 2500
    validation_cases: int = 5
    input_source: str = "LE"
    target_source: str = "RECOMBINED"
    region: RegionT = "crop"
    window_step: int = 1
    weights_path: str | None = None
    out_dir: str | None = None

    def __post_init__(self) -> None:
        FoldScheme.parse(self.folds)
        if not 0.0 <= self.threshold <= 1.0:
            msg = f"threshold {self.threshold} outside [0, 1]"
            raise ConfigurationError(msg)
        for name in (*self.sources, self.input_source, self.target_source):
            try:
                SourceTag(name)
            except ValueError as exc:
                msg = f"unknown image source {name!r}"
                raise ConfigurationError(msg) from exc
        if self.pairs_per_image < 1 or self.window_step < 1:
            raise ConfigurationError("pairs_per_image and window_step must be >= 1")
        if self.validation_cases < 0:
            raise ConfigurationError("validation_cases must be >= 0")
        if self.region not in ("crop", "full"):
            msg = f"region must be 'crop' or 'full', got {self.region!r}"
            raise ConfigurationError(msg)
        object.__setattr__(self, "sources", tuple(self.sources))

    @property
    def fold_scheme(self) -> FoldScheme:
        """Parsed fold scheme."""
        return FoldScheme.parse(self.folds)

    @property
    def source_tags(self) -> tuple[SourceTag, ...]:
        """Selected sources as tags."""
        return tuple(SourceTag(s) for s in self.sources)

    @property
    def train_config(self) -> TrainConfig:
        """Shallow CNN settings with the shallow-training seed applied."""
        return replace(self.train, rng_seed=self.seeds.shallow_train)

    @property
    def gbt_config(self) -> GbtConfig:
        """Boosting settings with the boosting seed applied."""
        return replace(self.gbt, rng_seed=self.seeds.gbt)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> PipelineConfig:
        """Build from a (possibly partial) JSON document; unknown keys are errors."""
        data = dict(data)
        _reject_unknown(cls, data, "")
        nested = {"seeds": Seeds, "train": TrainConfig, "gbt": GbtConfig}
        kwargs: dict[str, Any] = {}
        for key, value in data.items():
            if key in nested:
                _reject_unknown(nested[key], value, f"{key}.")
                if key == "gbt" and "class_weights" in value:
                    value = {**value, "class_weights": tuple(value["class_weights"])}
                kwargs[key] = nested[key](**value)
            elif key == "sources":
                kwargs[key] = tuple(value)
            else:
                kwargs[key] = value
        return cls(**kwargs)

    def to_dict(self) -> dict[str, Any]:
        """JSON-ready form."""
        out = asdict(self)
        out["sources"] = list(self.sources)
        out["gbt"]["class_weights"] = list(self.gbt.class_weights)
        return out


def _reject_unknown(cls: type, data: object, prefix: str) -> None:
    if not isinstance(data, dict):
        msg = f"config section {prefix or 'root'} must be an object"
        raise ConfigurationError(msg)
    unknown = sorted(set(data) - {f.name for f in fields(cls)})
    if unknown:
        msg = f"unknown config keys: {', '.join(prefix + k for k in unknown)}"
        raise ConfigurationError(msg)


def load_config(path: str | os.PathLike[str] | None) -> PipelineConfig:
    """Read a config file; ``None`` gives the defaults."""
    if path is None:
        return PipelineConfig()
    try:
        data = json.loads(Path(path).read_text("utf-8"))
    except json.JSONDecodeError as exc:
        msg = f"{path}: not valid JSON ({exc})"
        raise ConfigurationError(msg) from exc
    return PipelineConfig.from_dict(data)
