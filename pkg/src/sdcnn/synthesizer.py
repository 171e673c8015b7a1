"""Training-pair sampling, virtual image rendering and image similarity.

A trained :class:`~sdcnn.shallow_cnn.ShallowCnnModel` renders a "virtual" recombined
image by sliding a 15×15 window over the input, predicting the 3×3 patch at each
window centre and averaging overlapping predictions per pixel.
"""

from __future__ import annotations

from dataclasses import dataclass
from logging import getLogger
from typing import TYPE_CHECKING, NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from sdcnn.errors import DomainError, EmptyMaskError, ShapeError
from sdcnn.imagecore import (
    Contour,
    ImageGrid,
    RegionT,
    lesion_region,
    mask_from_contour,
)
from sdcnn.shallow_cnn import (
    INPUT_SIZE,
    OUTPUT_SIZE,
    PatchPair,
    ShallowCnnModel,
    forward_batch,
)

if TYPE_CHECKING:  # pragma: no cover
    from collections.abc import Sequence

logger = getLogger(__name__)

_HALF_IN = INPUT_SIZE // 2
_HALF_OUT = OUTPUT_SIZE // 2
_CHUNK = 1024


@dataclass(frozen=True, eq=False)
class TumorMask:
    """Boolean lesion mask congruent with its image (``True`` inside the contour)."""

    mask: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.mask, dtype=bool, copy=True)
        if arr.ndim != 2:  # noqa: PLR2004
            msg = f"mask must be 2D, got shape {arr.shape}"
            raise ShapeError(msg)
        arr.setflags(write=False)
        object.__setattr__(self, "mask", arr)

    @classmethod
    def from_contour(cls, contour: Contour, width: int, height: int) -> TumorMask:
        """Rasterise a lesion contour."""
        return cls(mask_from_contour(contour, width, height))

    @classmethod
    def full(cls, image: ImageGrid) -> TumorMask:
        """Mask covering the whole image."""
        return cls(np.ones(image.data.shape, dtype=bool))

    def check_congruent(self, image: ImageGrid) -> None:
        """Raise :class:`ShapeError` unless the mask matches *image*."""
        if self.mask.shape != image.data.shape:
            msg = f"mask {self.mask.shape} does not match image {image.data.shape}"
            raise ShapeError(msg)


@dataclass(frozen=True, eq=False)
class SynthesisResult:
    """Rendered image and the number of predictions averaged into each pixel."""

    virtual_image: ImageGrid
    coverage: np.ndarray


def _check_congruent(a: ImageGrid, b: ImageGrid) -> None:
    if a.data.shape != b.data.shape:
        msg = f"images differ in shape: {a.data.shape} vs {b.data.shape}"
        raise ShapeError(msg)


def sample_training_pairs(
    input_img: ImageGrid,
    target_img: ImageGrid,
    mask: TumorMask,
    n: int,
    rng_seed: int,
) -> list[PatchPair]:
    """Draw *n* patch pairs centred on lesion pixels, with replacement.

    A mask pixel is admissible when the 15×15 input window centred on it lies inside
    the image. The 3×3 target comes from *target_img* at the same centre.
    """
    _check_congruent(input_img, target_img)
    mask.check_congruent(input_img)
    if n < 1:
        msg = f"n must be >= 1, got {n}"
        raise DomainError(msg)
    admissible = np.zeros_like(mask.mask)
    admissible[_HALF_IN:-_HALF_IN, _HALF_IN:-_HALF_IN] = True
    ys, xs = np.nonzero(mask.mask & admissible)
    if ys.size == 0:
        raise EmptyMaskError("no lesion pixel admits a full 15x15 window")
    picks = np.random.default_rng(rng_seed).integers(0, ys.size, size=n)
    src, dst = input_img.data, target_img.data
    hi, ho = _HALF_IN, _HALF_OUT
    return [
        PatchPair(
            ImageGrid(src[y - hi : y + hi + 1, x - hi : x + hi + 1]),
            ImageGrid(dst[y - ho : y + ho + 1, x - ho : x + ho + 1]),
        )
        for y, x in zip(ys[picks], xs[picks])
    ]


def render_virtual_image(
    model: ShallowCnnModel, input_img: ImageGrid, step: int = 1
) -> SynthesisResult:
    """Slide the window left to right, top to bottom and average the predictions.

    Each prediction is placed centred on its window centre. Pixels no prediction
    reaches keep value 0 and coverage 0.
    """
    if input_img.width < INPUT_SIZE or input_img.height < INPUT_SIZE:
        msg = f"image {input_img.width}x{input_img.height} smaller than 15x15 window"
        raise ShapeError(msg)
    if step < 1:
        msg = f"window step must be >= 1, got {step}"
        raise DomainError(msg)
    windows = sliding_window_view(input_img.data, (INPUT_SIZE, INPUT_SIZE))
    windows = windows[::step, ::step]
    n_rows, n_cols = windows.shape[:2]
    flat = windows.reshape(-1, INPUT_SIZE, INPUT_SIZE)
    preds = np.concatenate(
        [
            forward_batch(model, flat[start : start + _CHUNK])
            for start in range(0, len(flat), _CHUNK)
        ]
    ).reshape(n_rows, n_cols, OUTPUT_SIZE, OUTPUT_SIZE)

    total = np.zeros(input_img.data.shape)
    coverage = np.zeros(input_img.data.shape, dtype=np.int64)
    offset = _HALF_IN - _HALF_OUT
    for i in range(OUTPUT_SIZE):
        for j in range(OUTPUT_SIZE):
            rows = slice(offset + i, offset + i + step * (n_rows - 1) + 1, step)
            cols = slice(offset + j, offset + j + step * (n_cols - 1) + 1, step)
            total[rows, cols] += preds[:, :, i, j]
            coverage[rows, cols] += 1
    virtual = np.divide(total, coverage, out=np.zeros_like(total), where=coverage > 0)
    return SynthesisResult(ImageGrid(virtual), coverage)


def image_mse(a: ImageGrid, b: ImageGrid, region: TumorMask | None = None) -> float:
    """Mean squared intensity difference over *region* (whole image if ``None``)."""
    _check_congruent(a, b)
    sq = (a.data - b.data) ** 2
    if region is None:
        return float(sq.mean())
    region.check_congruent(a)
    if not region.mask.any():
        raise DomainError("MSE region is empty")
    return float(sq[region.mask].mean())


class MseSummary(NamedTuple):
    """Per-image MSE with mean and (population) standard deviation."""

    per_image: tuple[float, ...]
    mean: float
    sd: float


def validation_mse_summary(
    pairs: Sequence[tuple[ImageGrid, ImageGrid, TumorMask | None]],
) -> MseSummary:
    """Summarise true-vs-virtual similarity over a set of held-out images."""
    if not pairs:
        raise DomainError("no image pairs to summarise")
    values = tuple(image_mse(t, v, m) for t, v, m in pairs)
    return MseSummary(values, float(np.mean(values)), float(np.std(values)))


def training_pairs_for_view(
    input_img: ImageGrid,
    target_img: ImageGrid,
    contour: Contour,
    n: int,
    rng_seed: int,
    region: RegionT = "crop",
) -> list[PatchPair]:
    """Normalize both images over the chosen region and sample pairs in the lesion.

    Input and target are registered, so the same contour and region apply to both.
    """
    _check_congruent(input_img, target_img)
    src = lesion_region(input_img, contour, region)
    dst = lesion_region(target_img, contour, region)
    mask = TumorMask.from_contour(src.contour, src.image.width, src.image.height)
    return sample_training_pairs(src.image, dst.image, mask, n, rng_seed)


def render_view(
    model: ShallowCnnModel,
    image: ImageGrid,
    contour: Contour,
    region: RegionT = "crop",
    step: int = 1,
) -> tuple[SynthesisResult, Contour]:
    """Render the virtual image of one view; returns the contour in its coordinates."""
    src = lesion_region(image, contour, region)
    logger.debug("rendering %dx%d region", src.image.width, src.image.height)
    return render_virtual_image(model, src.image, step), src.contour
