"""Inference-only 50-layer residual network used as a feature extractor.

The network follows the canonical bottleneck design: a 7×7/2 stem convolution with
batch-norm, ReLU and 3×3/2 max-pooling, then four stages of 3, 4, 6 and 3 bottleneck
blocks (1×1 reduce, 3×3, 1×1 expand, each with batch-norm). The first block of every
stage has a 1×1 projection shortcut; stages 2-4 downsample with stride 2 in the 3×3
convolution.

The activations after the last block of each stage (56×56×256, 28×28×512,
14×14×1024, 7×7×2048 for a 224×224 input) are reduced to their per-channel spatial
mean, giving 3840 features per image.

Weights live in a container of a JSON manifest plus a little-endian float32 blob;
see ``docs/weights-format.md``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from functools import cached_property
from logging import getLogger
from pathlib import Path
from typing import TYPE_CHECKING, NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from sdcnn._lib import atomic_write_bytes, atomic_write_json
from sdcnn.errors import (
    ConfigurationError,
    DomainError,
    MissingTensorError,
    ShapeError,
    TaggingError,
    TensorShapeError,
    TruncatedBlobError,
    WeightLoadError,
)
from sdcnn.imagecore import PATCH_SIZE, ImageGrid, SourceTag, ViewName

if TYPE_CHECKING:  # pragma: no cover
    import os
    from collections.abc import Iterable, Mapping, Sequence

logger = getLogger(__name__)

WEIGHTS_FORMAT = "sdcnn-resnet50"
BN_EPSILON = 1e-5
STAGE_BLOCKS = (3, 4, 6, 3)
STAGE_WIDTHS = (64, 128, 256, 512)
EXPANSION = 4
STAGE_CHANNELS = tuple(w * EXPANSION for w in STAGE_WIDTHS)
#: Spatial size of the captured map of each stage for a 224×224 input.
STAGE_SPATIAL = (56, 28, 14, 7)
N_FEATURES = sum(STAGE_CHANNELS)
_BN_FIELDS = ("weight", "bias", "running_mean", "running_var")


def _bn_shapes(prefix: str, channels: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.{f}": (channels,) for f in _BN_FIELDS}


def expected_tensor_shapes() -> dict[str, tuple[int, ...]]:
    """Every tensor the network needs, in canonical order, with its shape."""
    shapes: dict[str, tuple[int, ...]] = {"conv1.weight": (64, 3, 7, 7)}
    shapes.update(_bn_shapes("bn1", 64))
    in_c = 64
    for stage, (n_blocks, width) in enumerate(zip(STAGE_BLOCKS, STAGE_WIDTHS), 1):
        out_c = width * EXPANSION
        for block in range(n_blocks):
            p = f"layer{stage}.{block}"
            shapes[f"{p}.conv1.weight"] = (width, in_c, 1, 1)
            shapes.update(_bn_shapes(f"{p}.bn1", width))
            shapes[f"{p}.conv2.weight"] = (width, width, 3, 3)
            shapes.update(_bn_shapes(f"{p}.bn2", width))
            shapes[f"{p}.conv3.weight"] = (out_c, width, 1, 1)
            shapes.update(_bn_shapes(f"{p}.bn3", out_c))
            if block == 0:
                shapes[f"{p}.downsample.0.weight"] = (out_c, in_c, 1, 1)
                shapes.update(_bn_shapes(f"{p}.downsample.1", out_c))
            in_c = out_c
    return shapes


@dataclass(frozen=True, eq=False)
class ResNetWeights:
    """Validated, immutable tensor store.

    ``channel_mean``/``channel_std`` optionally normalize the three replicated input
    channels, for weights trained with such preprocessing.
    """

    tensors: Mapping[str, np.ndarray]
    epsilon: float = BN_EPSILON
    channel_mean: tuple[float, float, float] | None = None
    channel_std: tuple[float, float, float] | None = None

    def __post_init__(self) -> None:
        frozen: dict[str, np.ndarray] = {}
        for name, arr in self.tensors.items():
            t = np.array(arr, dtype="<f4", copy=True)
            t.setflags(write=False)
            frozen[name] = t
        for name, shape in expected_tensor_shapes().items():
            if name not in frozen:
                raise MissingTensorError(name)
            if frozen[name].shape != shape:
                got = frozen[name].shape
                msg = f"tensor {name!r} has shape {got}, expected {shape}"
                raise TensorShapeError(msg)
            if name.endswith("running_var") and not (frozen[name] > 0).all():
                msg = f"batch-norm variance {name!r} must be positive"
                raise WeightLoadError(msg)
        if self.epsilon <= 0:
            raise ConfigurationError("batch-norm epsilon must be positive")
        object.__setattr__(self, "tensors", frozen)

    @cached_property
    def as_float64(self) -> dict[str, np.ndarray]:
        """Double-precision copies of the tensors used during inference."""
        return {k: v.astype(np.float64) for k, v in self.tensors.items()}


def random_weights(seed: int) -> ResNetWeights:
    """He-normal convolutions and identity batch-norm, deterministic in *seed*.

    The last batch-norm of every block is scaled by 0.2 so that the residual stream
    stays bounded through sixteen blocks.
    """
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in expected_tensor_shapes().items():
        if name.endswith("conv1.weight") or ".conv" in name or "downsample.0" in name:
            fan_in = int(np.prod(shape[1:]))
            tensors[name] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        elif name.endswith(".weight"):
            scale = 0.2 if ".bn3." in name else 1.0
            tensors[name] = np.full(shape, scale)
        elif name.endswith("running_var"):
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = np.zeros(shape)
    return ResNetWeights(tensors)


def _ordered_names(weights: ResNetWeights) -> list[str]:
    canonical = list(expected_tensor_shapes())
    extras = sorted(set(weights.tensors) - set(canonical))
    return canonical + extras


def save_weights(path: str | os.PathLike[str], weights: ResNetWeights) -> Path:
    """Write the manifest at *path* and the blob next to it (``<name>.bin``)."""
    path = Path(path)
    blob_path = path.with_name(path.name + ".bin")
    entries = []
    chunks = []
    offset = 0
    for name in _ordered_names(weights):
        raw = weights.tensors[name].astype("<f4").tobytes()
        entries.append(
            {"name": name, "offset": offset, "shape": list(weights.tensors[name].shape)}
        )
        chunks.append(raw)
        offset += len(raw)
    atomic_write_bytes(blob_path, b"".join(chunks))
    manifest = {
        "blob": blob_path.name,
        "channel_mean": list(weights.channel_mean) if weights.channel_mean else None,
        "channel_std": list(weights.channel_std) if weights.channel_std else None,
        "dtype": "<f4",
        "epsilon": weights.epsilon,
        "format": WEIGHTS_FORMAT,
        "tensors": entries,
        "version": 1,
    }
    return atomic_write_json(path, manifest)


def load_weights(path: str | os.PathLike[str]) -> ResNetWeights:
    """Read and validate a weight container.

    :raises MissingTensorError: a required tensor is not listed.
    :raises TensorShapeError: a tensor has the wrong shape.
    :raises TruncatedBlobError: the blob ends before a listed tensor does.
    """
    path = Path(path)
    try:
        manifest = json.loads(path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        msg = f"{path}: manifest is not valid JSON ({exc})"
        raise WeightLoadError(msg) from exc
    if manifest.get("format") != WEIGHTS_FORMAT:
        msg = f"{path}: unknown weight format {manifest.get('format')!r}"
        raise WeightLoadError(msg)
    blob = (path.parent / manifest["blob"]).read_bytes()
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        shape = tuple(int(s) for s in entry["shape"])
        start = int(entry["offset"])
        end = start + int(np.prod(shape, dtype=np.int64)) * 4
        if end > len(blob):
            msg = f"{path}: blob ends at byte {len(blob)}, {entry['name']!r}"
            msg += f" needs {end}"
            raise TruncatedBlobError(msg)
        data = np.frombuffer(blob[start:end], dtype="<f4")
        tensors[entry["name"]] = data.reshape(shape)
    mean, std = manifest.get("channel_mean"), manifest.get("channel_std")
    logger.debug("loaded %d tensors from %s", len(tensors), path)
    return ResNetWeights(
        tensors,
        epsilon=float(manifest.get("epsilon", BN_EPSILON)),
        channel_mean=tuple(mean) if mean else None,
        channel_std=tuple(std) if std else None,
    )


def _conv2d(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """Cross-correlate ``(C, H, W)`` with ``(O, C, kh, kw)`` into ``(O, H', W')``."""
    _, _, kh, kw = w.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    if kh == kw == 1:
        return np.tensordot(w[:, :, 0, 0], x[:, ::stride, ::stride], axes=(1, 0))
    windows = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    return np.tensordot(w, windows, axes=([1, 2, 3], [0, 3, 4]))


def _batch_norm(
    x: np.ndarray, params: Mapping[str, np.ndarray], prefix: str, epsilon: float
) -> np.ndarray:
    var = params[f"{prefix}.running_var"]
    scale = params[f"{prefix}.weight"] / np.sqrt(var + epsilon)
    shift = params[f"{prefix}.bias"] - params[f"{prefix}.running_mean"] * scale
    return x * scale[:, None, None] + shift[:, None, None]


def _max_pool_3x3_s2(x: np.ndarray) -> np.ndarray:
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    windows = sliding_window_view(padded, (3, 3), axis=(1, 2))[:, ::2, ::2]
    return windows.max(axis=(3, 4))


def bottleneck_forward(
    params: Mapping[str, np.ndarray],
    prefix: str,
    x: np.ndarray,
    stride: int = 1,
    epsilon: float = BN_EPSILON,
) -> np.ndarray:
    """One bottleneck block; uses a projection shortcut if *params* has one."""

    def conv_bn(inp: np.ndarray, n: int, s: int, pad: int) -> np.ndarray:
        out = _conv2d(inp, params[f"{prefix}.conv{n}.weight"], s, pad)
        return _batch_norm(out, params, f"{prefix}.bn{n}", epsilon)

    out = np.maximum(conv_bn(x, 1, 1, 0), 0.0)
    out = np.maximum(conv_bn(out, 2, stride, 1), 0.0)
    out = conv_bn(out, 3, 1, 0)
    if f"{prefix}.downsample.0.weight" in params:
        shortcut = _batch_norm(
            _conv2d(x, params[f"{prefix}.downsample.0.weight"], stride, 0),
            params,
            f"{prefix}.downsample.1",
            epsilon,
        )
    else:
        shortcut = x
    return np.maximum(out + shortcut, 0.0)


def _input_tensor(weights: ResNetWeights, image: ImageGrid) -> np.ndarray:
    if image.data.shape != (PATCH_SIZE, PATCH_SIZE):
        msg = f"feature extraction needs a 224x224 patch, got {image.data.shape}"
        raise ShapeError(msg)
    if image.data.min() < -1e-9 or image.data.max() > 1 + 1e-9:
        raise DomainError("feature extraction needs intensities in [0, 1]")
    x = np.repeat(image.data[None], 3, axis=0)
    if weights.channel_mean is not None:
        x = x - np.asarray(weights.channel_mean)[:, None, None]
    if weights.channel_std is not None:
        x = x / np.asarray(weights.channel_std)[:, None, None]
    return x


def forward_taps(weights: ResNetWeights, image: ImageGrid) -> tuple[np.ndarray, ...]:
    """Post-ReLU activations ``(C, H, W)`` after the last block of each stage."""
    params = weights.as_float64
    eps = weights.epsilon
    x = _input_tensor(weights, image)
    x = _batch_norm(_conv2d(x, params["conv1.weight"], 2, 3), params, "bn1", eps)
    x = _max_pool_3x3_s2(np.maximum(x, 0.0))
    taps = []
    for stage, n_blocks in enumerate(STAGE_BLOCKS, 1):
        for block in range(n_blocks):
            stride = 2 if stage > 1 and block == 0 else 1
            x = bottleneck_forward(params, f"layer{stage}.{block}", x, stride, eps)
        size = STAGE_SPATIAL[stage - 1]
        expected = (STAGE_CHANNELS[stage - 1], size, size)
        if x.shape != expected:
            msg = f"stage {stage} produced {x.shape}, expected {expected}"
            raise ShapeError(msg)
        taps.append(x)
    return tuple(taps)


@dataclass(frozen=True, eq=False)
class FeatureVector:
    """3840 pooled features of one image, tagged with its source and view."""

    values: np.ndarray
    source_tag: SourceTag
    view_name: ViewName

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64, copy=True)
        if values.shape != (N_FEATURES,):
            msg = f"feature vector must have {N_FEATURES} values, got {values.shape}"
            raise ShapeError(msg)
        if not np.isfinite(values).all():
            raise DomainError("feature vector contains non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def tags(self) -> list[str]:
        """Provenance tag of every value, in order."""
        return [
            feature_tag(self.source_tag, self.view_name, stage, ch)
            for stage, n_ch in enumerate(STAGE_CHANNELS, 1)
            for ch in range(n_ch)
        ]


def extract_features(
    weights: ResNetWeights,
    image: ImageGrid,
    *,
    source_tag: SourceTag,
    view_name: ViewName,
) -> FeatureVector:
    """Global-average-pool the four tap activations into one feature vector."""
    taps = forward_taps(weights, image)
    return FeatureVector(
        np.concatenate([t.mean(axis=(1, 2)) for t in taps]), source_tag, view_name
    )


class FeatureTag(NamedTuple):
    """Parsed provenance of one feature column."""

    source: SourceTag
    view: ViewName
    stage: int
    channel: int


_TAG = re.compile(r"^src=(\w+);view=(\w+);stage=([1-4]);ch=(\d+)$")


def feature_tag(source: SourceTag, view: ViewName, stage: int, channel: int) -> str:
    """Encode provenance as ``src=LE;view=CC;stage=3;ch=17``.

    >>> feature_tag(SourceTag.LE, ViewName.CC, 3, 17)
    'src=LE;view=CC;stage=3;ch=17'
    """
    return f"src={source.value};view={view.value};stage={stage};ch={channel}"


def parse_feature_tag(tag: str) -> FeatureTag:
    """Inverse of :func:`feature_tag`.

    :raises TaggingError: the tag is malformed or names an unknown source/view, or
        a channel out of range for its stage.
    """
    match = _TAG.match(tag)
    if match is None:
        msg = f"malformed feature tag {tag!r}"
        raise TaggingError(msg)
    src, view, stage, channel = match.groups()
    try:
        parsed = FeatureTag(SourceTag(src), ViewName(view), int(stage), int(channel))
    except ValueError as exc:
        msg = f"unknown source or view in feature tag {tag!r}"
        raise TaggingError(msg) from exc
    if parsed.channel >= STAGE_CHANNELS[parsed.stage - 1]:
        msg = f"channel out of range in feature tag {tag!r}"
        raise TaggingError(msg)
    return parsed


class CaseFeatures(NamedTuple):
    """Concatenated features of one case and the tag of every value."""

    values: np.ndarray
    tags: tuple[str, ...]


_VIEW_ORDER = {ViewName.CC: 0, ViewName.MLO: 1}
_SOURCE_ORDER = {s: i for i, s in enumerate(SourceTag)}


def vector_order(key: tuple[ViewName, SourceTag]) -> tuple[int, int, int]:
    """Sort key: CC before MLO, then primary before derived sources."""
    view, source = key
    return (_VIEW_ORDER[view], 0 if source.is_primary else 1, _SOURCE_ORDER[source])


def case_feature_vector(per_view_vectors: Iterable[FeatureVector]) -> CaseFeatures:
    """Concatenate the vectors of one case in canonical order."""
    vectors: Sequence[FeatureVector] = list(per_view_vectors)
    if not vectors:
        raise ConfigurationError("a case needs at least one feature vector")
    keys = [(v.view_name, v.source_tag) for v in vectors]
    if len(set(keys)) != len(keys):
        raise ConfigurationError("duplicate (view, source) feature vectors in a case")
    ordered = sorted(vectors, key=lambda v: vector_order((v.view_name, v.source_tag)))
    return CaseFeatures(
        np.concatenate([v.values for v in ordered]),
        tuple(tag for v in ordered for tag in v.tags()),
    )
