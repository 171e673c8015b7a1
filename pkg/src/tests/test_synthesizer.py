"""Tests for training-pair sampling and virtual image rendering."""

from __future__ import annotations

import numpy as np
import pytest

from sdcnn.errors import DomainError, EmptyMaskError, ShapeError
from sdcnn.imagecore import Contour, ImageGrid
from sdcnn.shallow_cnn import (
    KERNEL_SHAPES,
    ConvLayerParams,
    ShallowCnnModel,
    TrainConfig,
    forward,
    init_model,
    train,
)
from sdcnn.synthesizer import (
    TumorMask,
    image_mse,
    render_view,
    render_virtual_image,
    sample_training_pairs,
    training_pairs_for_view,
    validation_mse_summary,
)
from sdcnn.synthetic import identity_patch_pairs, smooth_field


def _constant_model(c: float) -> ShallowCnnModel:
    layers = [
        ConvLayerParams(np.zeros(shape), np.zeros(shape[0]))
        for shape in KERNEL_SHAPES.values()
    ]
    layers[-1] = ConvLayerParams(layers[-1].kernels, np.array([c]))
    return ShallowCnnModel(*layers)


def _ramp(height: int, width: int) -> ImageGrid:
    return ImageGrid(np.arange(height * width, dtype=float).reshape(height, width))


def test_sample_pairs_single_centre() -> None:
    """A mask with one admissible centre yields identical pairs."""
    image = _ramp(20, 20)
    mask = np.zeros((20, 20), dtype=bool)
    mask[10, 9] = True
    mask[0, 0] = True
    pairs = sample_training_pairs(image, image, TumorMask(mask), 5, rng_seed=0)
    assert len(pairs) == 5
    expected = image.data[3:18, 2:17]
    for pair in pairs:
        np.testing.assert_array_equal(pair.input.data, expected)
        np.testing.assert_array_equal(pair.target.data, image.data[9:12, 8:11])


def test_sample_pairs_identity_target() -> None:
    """With target = input every target is the centre of its input."""
    image = ImageGrid(np.random.default_rng(0).random((40, 30)))
    pairs = sample_training_pairs(image, image, TumorMask.full(image), 50, rng_seed=1)
    for pair in pairs:
        np.testing.assert_array_equal(pair.target.data, pair.input.data[6:9, 6:9])


def test_sample_pairs_is_deterministic() -> None:
    """The same seed gives the same pairs."""
    image = _ramp(30, 30)
    a = sample_training_pairs(image, image, TumorMask.full(image), 10, rng_seed=3)
    b = sample_training_pairs(image, image, TumorMask.full(image), 10, rng_seed=3)
    assert [p.input.pixel(0, 0) for p in a] == [p.input.pixel(0, 0) for p in b]


def test_sample_pairs_empty_mask() -> None:
    """Lesion pixels too close to the border leave nothing to sample."""
    image = _ramp(20, 20)
    mask = np.zeros((20, 20), dtype=bool)
    mask[:, :7] = True
    with pytest.raises(EmptyMaskError):
        sample_training_pairs(image, image, TumorMask(mask), 3, rng_seed=0)


def test_sample_pairs_incongruent() -> None:
    """Input, target and mask must share a shape."""
    with pytest.raises(ShapeError):
        sample_training_pairs(
            _ramp(20, 20), _ramp(20, 21), TumorMask.full(_ramp(20, 20)), 1, 0
        )
    with pytest.raises(ShapeError):
        sample_training_pairs(
            _ramp(20, 20), _ramp(20, 20), TumorMask.full(_ramp(21, 20)), 1, 0
        )


def test_sample_pairs_invalid_count() -> None:
    """At least one pair must be requested."""
    image = _ramp(20, 20)
    with pytest.raises(DomainError):
        sample_training_pairs(image, image, TumorMask.full(image), 0, 0)


def test_render_constant_predictor() -> None:
    """A constant predictor fills the covered region with its constant."""
    result = render_virtual_image(_constant_model(0.7), _ramp(30, 25))
    covered = result.coverage > 0
    np.testing.assert_allclose(result.virtual_image.data[covered], 0.7)
    np.testing.assert_array_equal(result.virtual_image.data[~covered], 0.0)


def test_render_coverage_counts() -> None:
    """Interior pixels collect nine predictions; the frame collects fewer."""
    result = render_virtual_image(_constant_model(0.0), _ramp(40, 40))
    cov = result.coverage
    assert (cov[8:32, 8:32] == 9).all()
    assert (cov[:6, :] == 0).all()
    assert (cov[:, 34:] == 0).all()
    assert cov[6, 20] == 3
    assert cov[7, 20] == 6
    assert cov[7, 7] == 4
    assert cov.max() == 9


def test_render_single_window() -> None:
    """A 15×15 image yields the model's 3×3 prediction at its centre."""
    image = ImageGrid(np.random.default_rng(2).random((15, 15)))
    model = init_model(2)
    result = render_virtual_image(model, image)
    np.testing.assert_allclose(
        result.virtual_image.data[6:9, 6:9], forward(model, image).data, atol=1e-12
    )
    assert result.coverage.sum() == 9
    assert (result.coverage[6:9, 6:9] == 1).all()


def test_render_average_of_overlaps() -> None:
    """Each pixel is the sum of overlapping predictions over its coverage."""
    image = ImageGrid(np.random.default_rng(3).random((17, 16)))
    model = init_model(3)
    result = render_virtual_image(model, image)
    total = np.zeros((17, 16))
    count = np.zeros((17, 16))
    for y in range(7, 10):
        for x in range(7, 9):
            pred = forward(
                model, ImageGrid(image.data[y - 7 : y + 8, x - 7 : x + 8])
            ).data
            total[y - 1 : y + 2, x - 1 : x + 2] += pred
            count[y - 1 : y + 2, x - 1 : x + 2] += 1
    np.testing.assert_array_equal(result.coverage, count)
    covered = count > 0
    np.testing.assert_allclose(
        result.virtual_image.data[covered], total[covered] / count[covered], atol=1e-12
    )


def test_render_with_step() -> None:
    """A window step of 3 tiles the interior without overlap."""
    result = render_virtual_image(_constant_model(0.0), _ramp(21, 21), step=3)
    assert result.coverage.max() == 1
    assert result.coverage.sum() == 9 * 9


def test_render_too_small() -> None:
    """Images smaller than the window are rejected."""
    with pytest.raises(ShapeError):
        render_virtual_image(init_model(0), _ramp(14, 30))


def test_render_invalid_step() -> None:
    """The window step must be positive."""
    with pytest.raises(DomainError):
        render_virtual_image(init_model(0), _ramp(20, 20), step=0)


@pytest.mark.parametrize(
    "a, b, mask, expected",
    [
        ([[1.0, 2.0]], [[1.0, 2.0]], None, 0.0),
        ([[1.0, 3.0]], [[1.0, 1.0]], None, 2.0),
        ([[1.0, 3.0]], [[1.0, 1.0]], [[False, True]], 4.0),
        ([[1.0, 3.0]], [[1.0, 1.0]], [[True, False]], 0.0),
    ],
)
def test_image_mse(
    a: list[list[float]],
    b: list[list[float]],
    mask: list[list[bool]] | None,
    expected: float,
) -> None:
    """Mean squared difference over the region."""
    region = None if mask is None else TumorMask(np.array(mask))
    assert image_mse(ImageGrid(a), ImageGrid(b), region) == pytest.approx(expected)


def test_image_mse_errors() -> None:
    """Shape mismatches and empty regions are errors."""
    with pytest.raises(ShapeError):
        image_mse(ImageGrid([[1.0]]), ImageGrid([[1.0, 2.0]]))
    with pytest.raises(DomainError):
        image_mse(
            ImageGrid([[1.0]]), ImageGrid([[1.0]]), TumorMask(np.zeros((1, 1)))
        )


def test_validation_mse_summary() -> None:
    """Mean and population standard deviation of the per-image errors."""
    zero = ImageGrid(np.zeros((2, 2)))
    summary = validation_mse_summary(
        [
            (zero, ImageGrid(np.ones((2, 2))), None),
            (zero, ImageGrid(np.full((2, 2), 3.0)), None),
        ]
    )
    assert summary.per_image == (1.0, 9.0)
    assert summary.mean == 5.0
    assert summary.sd == 4.0
    with pytest.raises(DomainError):
        validation_mse_summary([])


def _lesion_view() -> tuple[ImageGrid, ImageGrid, Contour]:
    rng = np.random.default_rng(4)
    low = ImageGrid(rng.random((80, 90)))
    high = ImageGrid(rng.random((80, 90)) * 5)
    contour = Contour(((30, 25), (60, 25), (60, 55), (30, 55)))
    return low, high, contour


def test_training_pairs_for_view_normalized() -> None:
    """Pairs are cut from min-max normalized regions."""
    low, high, contour = _lesion_view()
    pairs = training_pairs_for_view(low, high, contour, 20, rng_seed=0)
    assert len(pairs) == 20
    for pair in pairs:
        assert 0.0 <= pair.input.data.min()
        assert pair.target.data.max() <= 1.0


def test_render_view_crop_coordinates() -> None:
    """Rendering in crop mode returns the contour in crop coordinates."""
    low, _, contour = _lesion_view()
    result, local = render_view(_constant_model(0.5), low, contour)
    assert result.virtual_image.data.shape == (39, 39)
    assert local.points[0] == (4.0, 4.0)


def test_identity_model_renders_close_to_input() -> None:
    """A model trained on the identity task reproduces an unseen image."""
    result = train(
        init_model(0),
        identity_patch_pairs(128 * 50, seed=21, n_images=16),
        TrainConfig(learning_rate=0.01, batch_size=128, epochs=5, patience=None),
    )
    image = ImageGrid(smooth_field(48, 40, np.random.default_rng(22)))
    rendered = render_virtual_image(result.model, image)
    covered = TumorMask(rendered.coverage > 0)
    assert image_mse(image, rendered.virtual_image, covered) <= 5e-3
