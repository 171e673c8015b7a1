"""Raster and annotation types and the lesion preprocessing chain.

A contour-annotated mammogram view becomes a normalized 224×224 lesion patch in
four steps: tight bounding box of the contour, enlargement by 1.2 in width and
height, crop, min-max normalization, bilinear resize.

Coordinates are ``(x, y)`` with ``x`` the column and ``y`` the row; pixel arrays
are stored row-major as ``data[y, x]``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Literal

import cv2
import numpy as np
from scipy import ndimage

from sdcnn.errors import (
    BoundsError,
    DomainError,
    InvalidAnnotationError,
    ShapeError,
)

if TYPE_CHECKING:  # pragma: no cover
    from collections.abc import Iterable, Sequence

#: Output size of :func:`preprocess_view`.
PATCH_SIZE = 224
#: Enlargement of the lesion bounding box per axis (1.44 in area).
ENLARGE_FACTOR = 1.2

RegionT = Literal["crop", "full"]


class Label(enum.Enum):
    """Pathology of a case."""

    BENIGN = "benign"
    CANCER = "cancer"

    @property
    def as_int(self) -> int:
        """0 for benign, 1 for cancer."""
        return int(self is Label.CANCER)


class ViewName(enum.Enum):
    """Mammographic projection."""

    CC = "CC"
    MLO = "MLO"


class SourceTag(enum.Enum):
    """Image source of a view."""

    LE = "LE"
    RECOMBINED = "RECOMBINED"
    FFDM = "FFDM"
    VIRTUAL = "VIRTUAL"

    @property
    def is_primary(self) -> bool:
        """LE and FFDM are acquired directly; the other two derive from contrast."""
        return self in (SourceTag.LE, SourceTag.FFDM)


@dataclass(frozen=True, eq=False)
class ImageGrid:
    """Immutable 2D grid of double-precision intensities, indexed ``data[y, x]``."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:  # noqa: PLR2004
            msg = f"image must be a non-empty 2D grid, got shape {arr.shape}"
            raise ShapeError(msg)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        """Number of columns."""
        return int(self.data.shape[1])

    @property
    def height(self) -> int:
        """Number of rows."""
        return int(self.data.shape[0])

    def pixel(self, x: int, y: int) -> float:
        """Intensity at column *x*, row *y*."""
        return float(self.data[y, x])

    def allclose(self, other: ImageGrid, atol: float = 1e-12) -> bool:
        """Same dimensions and intensities within *atol*."""
        return self.data.shape == other.data.shape and bool(
            np.allclose(self.data, other.data, rtol=0.0, atol=atol)
        )


@dataclass(frozen=True)
class Contour:
    """Ordered lesion outline of at least three ``(x, y)`` points."""

    points: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        pts = tuple((float(x), float(y)) for x, y in self.points)
        if len(pts) < 3:  # noqa: PLR2004
            msg = f"contour needs at least 3 points, got {len(pts)}"
            raise InvalidAnnotationError(msg)
        if not all(math.isfinite(v) for p in pts for v in p):
            raise InvalidAnnotationError("contour points must be finite")
        object.__setattr__(self, "points", pts)

    @classmethod
    def from_points(cls, points: Iterable[Sequence[float]]) -> Contour:
        """Build from any iterable of coordinate pairs."""
        return cls(tuple((p[0], p[1]) for p in points))

    def check_within(self, width: int, height: int) -> None:
        """Raise :class:`InvalidAnnotationError` if a point lies outside the image."""
        for x, y in self.points:
            if not (0 <= x <= width - 1 and 0 <= y <= height - 1):
                msg = f"contour point ({x}, {y}) outside {width}x{height} image"
                raise InvalidAnnotationError(msg)

    def shifted(self, dx: float, dy: float) -> Contour:
        """Translate every point by ``(dx, dy)``."""
        return Contour(tuple((x + dx, y + dy) for x, y in self.points))


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box with inclusive integer corners."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self) -> None:
        if self.x_min > self.x_max or self.y_min > self.y_max:
            msg = f"degenerate box {self}"
            raise BoundsError(msg)

    @property
    def width(self) -> int:
        """Number of columns covered."""
        return self.x_max - self.x_min + 1

    @property
    def height(self) -> int:
        """Number of rows covered."""
        return self.y_max - self.y_min + 1

    def contains(self, other: BoundingBox) -> bool:
        """Whether *other* lies entirely inside this box."""
        return (
            self.x_min <= other.x_min
            and self.y_min <= other.y_min
            and other.x_max <= self.x_max
            and other.y_max <= self.y_max
        )

    def fits(self, width: int, height: int) -> bool:
        """Whether the box lies inside a ``width``×``height`` image."""
        return (
            self.x_min >= 0
            and self.y_min >= 0
            and self.x_max <= width - 1
            and self.y_max <= height - 1
        )


@dataclass(frozen=True)
class View:
    """One image of a case together with its lesion annotation."""

    view_name: ViewName
    source_tag: SourceTag
    image: ImageGrid
    contour: Contour

    def __post_init__(self) -> None:
        self.contour.check_within(self.image.width, self.image.height)


@dataclass(frozen=True)
class CaseRecord:
    """One subject: a label and one or more annotated views."""

    case_id: str
    label: Label
    views: tuple[View, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if not self.views:
            msg = f"case {self.case_id!r} has no views"
            raise InvalidAnnotationError(msg)
        keys = [(v.view_name, v.source_tag) for v in self.views]
        if len(set(keys)) != len(keys):
            msg = f"case {self.case_id!r} has duplicate (view, source) entries"
            raise InvalidAnnotationError(msg)

    def view(self, view_name: ViewName, source_tag: SourceTag) -> View | None:
        """Look up one view, or ``None``."""
        for v in self.views:
            if v.view_name is view_name and v.source_tag is source_tag:
                return v
        return None


def bounding_box_from_contour(contour: Contour) -> BoundingBox:
    """Tight box around every contour point.

    >>> bounding_box_from_contour(Contour(((10, 20), (30, 50), (12, 45))))
    BoundingBox(x_min=10, y_min=20, x_max=30, y_max=50)
    """
    if not contour.points:  # pragma: no cover - Contour rejects this already
        raise InvalidAnnotationError("empty contour")
    pts = np.asarray(contour.points)
    x_min, y_min = np.floor(pts.min(axis=0)).astype(int)
    x_max, y_max = np.ceil(pts.max(axis=0)).astype(int)
    return BoundingBox(int(x_min), int(y_min), int(x_max), int(y_max))


def _floor(v: float) -> int:
    # rounding first keeps 20 * 1.2 = 24.000000000000004 from growing a pixel
    return math.floor(round(v, 9))


def _ceil(v: float) -> int:
    return math.ceil(round(v, 9))


def enlarge_box(
    box: BoundingBox,
    factor_w: float,
    factor_h: float,
    image_width: int,
    image_height: int,
) -> BoundingBox:
    """Scale *box* about its centre, round outward, clamp to the image.

    The box covers the half-open pixel extent ``[x_min, x_max + 1)``; that extent is
    scaled, its lower edge floored and upper edge ceiled.

    >>> enlarge_box(BoundingBox(10, 10, 29, 29), 1.2, 1.2, 100, 100)
    BoundingBox(x_min=8, y_min=8, x_max=31, y_max=31)
    """
    if factor_w < 1 or factor_h < 1:
        msg = f"enlargement factors must be >= 1, got {factor_w}, {factor_h}"
        raise DomainError(msg)
    cx = (box.x_min + box.x_max + 1) / 2
    cy = (box.y_min + box.y_max + 1) / 2
    half_w = box.width * factor_w / 2
    half_h = box.height * factor_h / 2
    return BoundingBox(
        x_min=max(0, _floor(cx - half_w)),
        y_min=max(0, _floor(cy - half_h)),
        x_max=min(image_width - 1, _ceil(cx + half_w) - 1),
        y_max=min(image_height - 1, _ceil(cy + half_h) - 1),
    )


def crop(image: ImageGrid, box: BoundingBox) -> ImageGrid:
    """Cut *box* out of *image*.

    Output pixel ``(i, j)`` is input pixel ``(x_min + i, y_min + j)``.
    """
    if not box.fits(image.width, image.height):
        msg = f"{box} exceeds {image.width}x{image.height} image"
        raise BoundsError(msg)
    return ImageGrid(image.data[box.y_min : box.y_max + 1, box.x_min : box.x_max + 1])


def minmax_normalize(image: ImageGrid) -> ImageGrid:
    """Map intensities linearly onto [0, 1]; a constant image maps to zeros.

    >>> minmax_normalize(ImageGrid([[2.0, 4.0, 6.0]])).data.tolist()
    [[0.0, 0.5, 1.0]]
    """
    lo = float(image.data.min())
    hi = float(image.data.max())
    if hi == lo:
        return ImageGrid(np.zeros_like(image.data))
    return ImageGrid((image.data - lo) / (hi - lo))


def resize_bilinear(image: ImageGrid, out_w: int, out_h: int) -> ImageGrid:
    """Bilinear resize with corner-aligned sampling.

    Output corners sample input corners exactly; resizing to the same size is the
    identity. A single output row or column samples the first input one.
    """
    if out_w < 1 or out_h < 1:
        msg = f"output size must be positive, got {out_w}x{out_h}"
        raise ShapeError(msg)
    factors = (out_h / image.height, out_w / image.width)
    out = ndimage.zoom(image.data, factors, order=1, mode="nearest", grid_mode=False)
    if out.shape != (out_h, out_w):  # pragma: no cover - zoom rounds to the target
        msg = f"resize produced {out.shape}, expected {(out_h, out_w)}"
        raise ShapeError(msg)
    return ImageGrid(out)


def lesion_box(image: ImageGrid, contour: Contour) -> BoundingBox:
    """The enlarged, clamped lesion box used for cropping."""
    contour.check_within(image.width, image.height)
    return enlarge_box(
        bounding_box_from_contour(contour),
        ENLARGE_FACTOR,
        ENLARGE_FACTOR,
        image.width,
        image.height,
    )


def preprocess_view(image: ImageGrid, contour: Contour) -> ImageGrid:
    """Turn an annotated view into a normalized 224×224 lesion patch."""
    region = minmax_normalize(crop(image, lesion_box(image, contour)))
    return resize_bilinear(region, PATCH_SIZE, PATCH_SIZE)


@dataclass(frozen=True)
class LesionRegion:
    """A normalized image region with the offset of its origin in the source."""

    image: ImageGrid
    contour: Contour
    offset: tuple[int, int]


def lesion_region(image: ImageGrid, contour: Contour, region: RegionT) -> LesionRegion:
    """Normalized enlarged crop (``"crop"``) or normalized full image (``"full"``).

    The contour is translated into the region's coordinates.
    """
    if region == "full":
        contour.check_within(image.width, image.height)
        return LesionRegion(minmax_normalize(image), contour, (0, 0))
    box = lesion_box(image, contour)
    return LesionRegion(
        minmax_normalize(crop(image, box)),
        contour.shifted(-box.x_min, -box.y_min),
        (box.x_min, box.y_min),
    )


def mask_from_contour(contour: Contour, width: int, height: int) -> np.ndarray:
    """Rasterise the polygon into a boolean ``(height, width)`` mask.

    Vertices are rounded to the nearest pixel and the polygon is filled including its
    outline, so a degenerate contour still yields a non-empty mask.

    >>> int(mask_from_contour(Contour(((1, 1), (3, 1), (3, 2), (1, 2))), 5, 4).sum())
    6
    """
    contour.check_within(width, height)
    vertices = np.rint(np.asarray(contour.points)).astype(np.int32)
    canvas = np.zeros((height, width), dtype=np.uint8)
    cv2.fillPoly(canvas, [vertices.reshape(-1, 1, 2)], 1)
    return canvas.astype(bool)


def contour_from_mask(mask: np.ndarray) -> Contour:
    """Convex outline of the ``True`` pixels of a lesion mask.

    Masks without area (a single pixel or a line) fall back to their bounding
    rectangle.

    >>> m = np.zeros((5, 5), dtype=bool)
    >>> m[1:4, 1:3] = True
    >>> sorted(contour_from_mask(m).points)
    [(1.0, 1.0), (1.0, 3.0), (2.0, 1.0), (2.0, 3.0)]
    """
    pixels = np.asarray(mask, dtype=bool).astype(np.uint8)
    if not pixels.any():
        raise InvalidAnnotationError("lesion mask is empty")
    outlines, _ = cv2.findContours(pixels, cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_SIMPLE)
    hull = cv2.convexHull(np.concatenate(outlines))
    if len(hull) < 3 or cv2.contourArea(hull) == 0:  # noqa: PLR2004
        x, y, w, h = cv2.boundingRect(pixels)
        x1, y1 = x + w - 1, y + h - 1
        return Contour(((x, y), (x1, y), (x1, y1), (x, y1)))
    return Contour.from_points(hull.reshape(-1, 2).tolist())
