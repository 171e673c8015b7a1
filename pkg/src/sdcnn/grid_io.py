"""Reading and writing image grids.

Two formats are supported:

* binary PGM (``P5``) with 8- or 16-bit samples, encoded and decoded by OpenCV;
* a raw little-endian float32 grid (``*.f32``) with a JSON sidecar
  (``*.f32.json``) holding ``{"width": W, "height": H}``.

Intensities are converted to float64 on load; the input bit depth is not kept.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import TYPE_CHECKING

import cv2
import numpy as np

from sdcnn._lib import atomic_write_bytes, atomic_write_json
from sdcnn.errors import ShapeError
from sdcnn.imagecore import ImageGrid

if TYPE_CHECKING:  # pragma: no cover
    import os

GRID_SUFFIX = ".f32"
_MAX_8BIT = 255
_MAX_16BIT = 65535


def read_pgm(path: str | os.PathLike[str]) -> ImageGrid:
    """Read a single-channel PGM (or any grayscale image OpenCV decodes)."""
    raw = np.fromfile(Path(path), dtype=np.uint8)
    data = cv2.imdecode(raw, cv2.IMREAD_UNCHANGED) if raw.size else None
    if data is None:
        msg = f"{path}: not a readable image file"
        raise ShapeError(msg)
    if data.ndim != 2:  # noqa: PLR2004
        msg = f"{path}: expected a single-channel image, got shape {data.shape}"
        raise ShapeError(msg)
    return ImageGrid(data)


def write_pgm(
    path: str | os.PathLike[str], image: ImageGrid, maxval: int = _MAX_16BIT
) -> Path:
    """Write *image* as binary PGM, rounding and clipping to ``[0, maxval]``.

    Samples are stored with 16 bits when ``maxval`` exceeds 255, else with 8.
    """
    if not 0 < maxval <= _MAX_16BIT:
        msg = f"PGM maxval must lie in [1, {_MAX_16BIT}], got {maxval}"
        raise ShapeError(msg)
    dtype = np.uint16 if maxval > _MAX_8BIT else np.uint8
    samples = np.clip(np.rint(image.data), 0, maxval).astype(dtype)
    ok, encoded = cv2.imencode(".pgm", samples, [cv2.IMWRITE_PXM_BINARY, 1])
    if not ok:  # pragma: no cover
        msg = f"{path}: PGM encoding failed"
        raise ShapeError(msg)
    return atomic_write_bytes(path, encoded.tobytes())


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def read_grid(path: str | os.PathLike[str]) -> ImageGrid:
    """Read a float32 grid and its sidecar."""
    path = Path(path)
    meta = json.loads(_sidecar(path).read_text("utf-8"))
    width, height = int(meta["width"]), int(meta["height"])
    raw = path.read_bytes()
    if len(raw) != width * height * 4:
        msg = f"{path}: {len(raw)} bytes do not match a {width}x{height} float32 grid"
        raise ShapeError(msg)
    return ImageGrid(np.frombuffer(raw, dtype="<f4").reshape(height, width))


def write_grid(path: str | os.PathLike[str], image: ImageGrid) -> Path:
    """Write a float32 grid and its sidecar."""
    path = Path(path)
    atomic_write_bytes(path, image.data.astype("<f4").tobytes())
    atomic_write_json(_sidecar(path), {"height": image.height, "width": image.width})
    return path


def read_image(path: str | os.PathLike[str]) -> ImageGrid:
    """Read a grid, choosing the format from the file suffix."""
    if Path(path).suffix.lower() == ".pgm":
        return read_pgm(path)
    return read_grid(path)


def remove_grid(path: str | os.PathLike[str]) -> None:
    """Delete a float32 grid and its sidecar, whichever exist."""
    path = Path(path)
    for file in (path, _sidecar(path)):
        file.unlink(missing_ok=True)
