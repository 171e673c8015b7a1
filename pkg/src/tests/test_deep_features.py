"""Tests for the residual-network feature extractor."""

from __future__ import annotations

import json
from typing import TYPE_CHECKING

import numpy as np
import pytest

from sdcnn.deep_features import (
    N_FEATURES,
    STAGE_CHANNELS,
    STAGE_SPATIAL,
    FeatureTag,
    FeatureVector,
    ResNetWeights,
    _conv2d,
    bottleneck_forward,
    case_feature_vector,
    expected_tensor_shapes,
    extract_features,
    feature_tag,
    forward_taps,
    load_weights,
    parse_feature_tag,
    random_weights,
    save_weights,
)
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

if TYPE_CHECKING:
    from pathlib import Path


@pytest.fixture(scope="module")
def weights() -> ResNetWeights:
    """Random network weights shared by the module."""
    return random_weights(0)


@pytest.fixture(scope="module")
def patch() -> ImageGrid:
    """A smooth 224×224 patch in [0, 1]."""
    ys, xs = np.mgrid[0:PATCH_SIZE, 0:PATCH_SIZE] / PATCH_SIZE
    return ImageGrid(0.5 + 0.5 * np.sin(6 * xs) * np.cos(4 * ys))


@pytest.fixture(scope="module")
def taps(weights: ResNetWeights, patch: ImageGrid) -> tuple[np.ndarray, ...]:
    """Stage activations of the shared patch."""
    return forward_taps(weights, patch)


@pytest.fixture(scope="module")
def saved(weights: ResNetWeights, tmp_path_factory: pytest.TempPathFactory) -> Path:
    """The shared weights written to disk once."""
    return save_weights(tmp_path_factory.mktemp("weights") / "weights.json", weights)


def _with_manifest(saved: Path, name: str, edit: dict[str, object]) -> Path:
    manifest = json.loads(saved.read_text("utf-8"))
    manifest.update(edit)
    path = saved.with_name(name)
    path.write_text(json.dumps(manifest), "utf-8")
    return path


def test_expected_tensor_shapes() -> None:
    """The network needs the 265 parameter and buffer tensors of ResNet-50."""
    shapes = expected_tensor_shapes()
    assert len(shapes) == 265
    assert next(iter(shapes)) == "conv1.weight"
    assert shapes["layer2.0.conv2.weight"] == (128, 128, 3, 3)
    assert shapes["layer4.0.downsample.0.weight"] == (2048, 1024, 1, 1)
    assert "layer1.1.downsample.0.weight" not in shapes


def test_random_weights_deterministic(weights: ResNetWeights) -> None:
    """The same seed gives the same tensors."""
    other = random_weights(0)
    for name in ("conv1.weight", "layer3.5.conv3.weight"):
        np.testing.assert_array_equal(other.tensors[name], weights.tensors[name])


def test_weights_are_read_only(weights: ResNetWeights) -> None:
    """Stored tensors cannot be modified."""
    with pytest.raises(ValueError, match="read-only"):
        weights.tensors["bn1.bias"][0] = 1.0


def test_forward_tap_shapes(taps: tuple[np.ndarray, ...]) -> None:
    """The four stages produce 56², 28², 14² and 7² maps."""
    assert [t.shape for t in taps] == [
        (c, s, s) for c, s in zip(STAGE_CHANNELS, STAGE_SPATIAL)
    ]
    assert all(np.isfinite(t).all() and (t >= 0).all() for t in taps)


def test_extract_features_is_pooled_taps(
    weights: ResNetWeights, patch: ImageGrid, taps: tuple[np.ndarray, ...]
) -> None:
    """Each feature is the spatial mean of one tap channel."""
    vector = extract_features(
        weights, patch, source_tag=SourceTag.FFDM, view_name=ViewName.CC
    )
    assert vector.values.shape == (N_FEATURES,) == (3840,)
    np.testing.assert_allclose(vector.values[:256], taps[0].mean(axis=(1, 2)))
    np.testing.assert_allclose(vector.values[-2048:], taps[3].mean(axis=(1, 2)))


def test_extract_features_deterministic(
    weights: ResNetWeights, patch: ImageGrid
) -> None:
    """Extraction is a pure function of weights and image."""
    a = extract_features(weights, patch, source_tag=SourceTag.LE, view_name=ViewName.CC)
    b = extract_features(weights, patch, source_tag=SourceTag.LE, view_name=ViewName.CC)
    np.testing.assert_array_equal(a.values, b.values)


@pytest.mark.parametrize(
    "data, error",
    [
        (np.zeros((223, 224)), ShapeError),
        (np.full((224, 224), 1.5), DomainError),
        (np.full((224, 224), -0.5), DomainError),
    ],
)
def test_forward_rejects_bad_input(
    weights: ResNetWeights, data: np.ndarray, error: type[Exception]
) -> None:
    """Only 224×224 patches in [0, 1] are accepted."""
    with pytest.raises(error):
        forward_taps(weights, ImageGrid(data))


def test_bottleneck_zero_convs_is_identity(weights: ResNetWeights) -> None:
    """With zeroed convolutions a block without projection passes its input."""
    params = dict(weights.as_float64)
    for n in (1, 2, 3):
        name = f"layer1.1.conv{n}.weight"
        params[name] = np.zeros_like(params[name])
    x = np.random.default_rng(0).random((256, 6, 6))
    np.testing.assert_allclose(bottleneck_forward(params, "layer1.1", x), x)


def test_bottleneck_projection_shortcut(weights: ResNetWeights) -> None:
    """The first block of a stage projects and downsamples its input."""
    x = np.random.default_rng(1).random((256, 8, 8))
    out = bottleneck_forward(weights.as_float64, "layer2.0", x, stride=2)
    assert out.shape == (512, 4, 4)
    assert (out >= 0).all()


def _naive_conv2d(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    out_c, _, kh, kw = w.shape
    h = (x.shape[1] - kh) // stride + 1
    wd = (x.shape[2] - kw) // stride + 1
    out = np.zeros((out_c, h, wd))
    for o in range(out_c):
        for r in range(h):
            for c in range(wd):
                r0, c0 = r * stride, c * stride
                window = x[:, r0 : r0 + kh, c0 : c0 + kw]
                out[o, r, c] = (window * w[o]).sum()
    return out


@pytest.mark.parametrize(
    "kernel, stride, pad",
    [(3, 1, 1), (3, 2, 1), (7, 2, 3), (1, 2, 0), (1, 1, 0)],
)
def test_conv2d_matches_direct(kernel: int, stride: int, pad: int) -> None:
    """The vectorised convolution agrees with direct evaluation."""
    rng = np.random.default_rng(kernel * 10 + stride)
    x = rng.normal(size=(3, 11, 10))
    w = rng.normal(size=(4, 3, kernel, kernel))
    np.testing.assert_allclose(
        _conv2d(x, w, stride, pad), _naive_conv2d(x, w, stride, pad), atol=1e-12
    )


def test_save_load_roundtrip(weights: ResNetWeights, saved: Path) -> None:
    """Saved weights load back unchanged."""
    loaded = load_weights(saved)
    assert set(loaded.tensors) == set(weights.tensors)
    for name in ("conv1.weight", "layer4.2.bn3.running_var"):
        np.testing.assert_array_equal(loaded.tensors[name], weights.tensors[name])
    assert loaded.epsilon == weights.epsilon
    manifest = json.loads(saved.read_text("utf-8"))
    assert manifest["tensors"][0] == {
        "name": "conv1.weight",
        "offset": 0,
        "shape": [64, 3, 7, 7],
    }
    assert manifest["tensors"][1]["offset"] == 64 * 3 * 7 * 7 * 4


def test_load_missing_tensor(saved: Path) -> None:
    """A manifest without a required tensor is rejected by name."""
    manifest = json.loads(saved.read_text("utf-8"))
    tensors = [t for t in manifest["tensors"] if t["name"] != "layer3.2.bn2.bias"]
    path = _with_manifest(saved, "missing.json", {"tensors": tensors})
    with pytest.raises(MissingTensorError) as exc_info:
        load_weights(path)
    assert exc_info.value.name == "layer3.2.bn2.bias"


def test_load_wrong_shape(saved: Path) -> None:
    """A tensor with an unexpected shape is rejected."""
    manifest = json.loads(saved.read_text("utf-8"))
    for entry in manifest["tensors"]:
        if entry["name"] == "bn1.weight":
            entry["shape"] = [32]
    path = _with_manifest(saved, "shape.json", {"tensors": manifest["tensors"]})
    with pytest.raises(TensorShapeError):
        load_weights(path)


def test_load_truncated_blob(saved: Path) -> None:
    """A tensor reaching past the end of the blob is rejected."""
    manifest = json.loads(saved.read_text("utf-8"))
    blob_size = saved.with_name(saved.name + ".bin").stat().st_size
    manifest["tensors"][-1]["offset"] = blob_size - 4
    path = _with_manifest(saved, "short.json", {"tensors": manifest["tensors"]})
    with pytest.raises(TruncatedBlobError):
        load_weights(path)


@pytest.mark.parametrize(
    "name, content",
    [
        ("format.json", '{"format": "onnx"}'),
        ("broken.json", "{not json"),
    ],
)
def test_load_invalid_manifest(tmp_path: Path, name: str, content: str) -> None:
    """Foreign or malformed manifests are weight-load errors."""
    path = tmp_path / name
    path.write_text(content, "utf-8")
    with pytest.raises(WeightLoadError):
        load_weights(path)


def test_non_positive_variance(weights: ResNetWeights) -> None:
    """Batch-norm variances must be positive."""
    tensors = dict(weights.tensors)
    tensors["bn1.running_var"] = np.zeros(64)
    with pytest.raises(WeightLoadError, match="variance"):
        ResNetWeights(tensors)


def test_extra_tensors_are_kept(weights: ResNetWeights) -> None:
    """Tensors the network does not use are carried along."""
    tensors = {**weights.tensors, "fc.bias": np.zeros(1000)}
    assert "fc.bias" in ResNetWeights(tensors).tensors


def test_feature_tag_roundtrip() -> None:
    """A tag parses back into its parts."""
    tag = feature_tag(SourceTag.VIRTUAL, ViewName.MLO, 4, 2047)
    assert tag == "src=VIRTUAL;view=MLO;stage=4;ch=2047"
    assert parse_feature_tag(tag) == FeatureTag(
        SourceTag.VIRTUAL, ViewName.MLO, 4, 2047
    )


@pytest.mark.parametrize(
    "tag",
    [
        "case_id",
        "src=LE;view=CC;stage=5;ch=0",
        "src=LE;view=CC;stage=1;ch=256",
        "src=XRAY;view=CC;stage=1;ch=0",
        "src=LE;view=ML;stage=1;ch=0",
    ],
)
def test_parse_feature_tag_invalid(tag: str) -> None:
    """Malformed tags are tagging errors."""
    with pytest.raises(TaggingError):
        parse_feature_tag(tag)


def test_feature_vector_tags() -> None:
    """Every value carries its stage and channel."""
    tags = FeatureVector(np.zeros(N_FEATURES), SourceTag.LE, ViewName.CC).tags()
    assert len(tags) == 3840
    assert tags[0] == "src=LE;view=CC;stage=1;ch=0"
    assert tags[256] == "src=LE;view=CC;stage=2;ch=0"
    assert tags[-1] == "src=LE;view=CC;stage=4;ch=2047"


def test_feature_vector_invalid() -> None:
    """Vectors have 3840 finite values."""
    with pytest.raises(ShapeError):
        FeatureVector(np.zeros(10), SourceTag.LE, ViewName.CC)
    values = np.zeros(N_FEATURES)
    values[3] = np.nan
    with pytest.raises(DomainError):
        FeatureVector(values, SourceTag.LE, ViewName.CC)


def test_case_feature_vector_order() -> None:
    """CC before MLO, and within a view primary sources before derived ones."""
    keys = [
        (ViewName.MLO, SourceTag.VIRTUAL),
        (ViewName.CC, SourceTag.VIRTUAL),
        (ViewName.MLO, SourceTag.FFDM),
        (ViewName.CC, SourceTag.FFDM),
    ]
    vectors = [
        FeatureVector(np.full(N_FEATURES, float(i)), source, view)
        for i, (view, source) in enumerate(keys)
    ]
    case = case_feature_vector(vectors)
    assert case.values.shape == (4 * 3840,)
    assert case.values[::3840].tolist() == [3.0, 1.0, 2.0, 0.0]
    assert case.tags[0] == "src=FFDM;view=CC;stage=1;ch=0"
    assert case.tags[3840] == "src=VIRTUAL;view=CC;stage=1;ch=0"
    assert case.tags[2 * 3840] == "src=FFDM;view=MLO;stage=1;ch=0"


def test_case_feature_vector_invalid() -> None:
    """Cases need at least one vector and no duplicates."""
    with pytest.raises(ConfigurationError):
        case_feature_vector([])
    vector = FeatureVector(np.zeros(N_FEATURES), SourceTag.LE, ViewName.CC)
    with pytest.raises(ConfigurationError, match="duplicate"):
        case_feature_vector([vector, vector])
