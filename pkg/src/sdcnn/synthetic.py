"""Deterministic synthetic data for demos and tests.

* :func:`make_synthetic_dataset` writes a small mammography-like dataset (images,
  contours, manifest). ``cedm`` datasets hold low-energy and recombined images,
  ``ffdm`` datasets only FFDM images. Cancer lesions are denser in the low-energy
  image and enhance much more strongly in the recombined image.
* :func:`identity_patch_pairs` draws patch pairs whose target is the centre of the
  input, a task the shallow CNN can learn exactly.
* :func:`synthetic_feature_matrix` builds a tagged feature matrix whose label signal
  sits in one chosen source.
"""

from __future__ import annotations

from logging import getLogger
from pathlib import Path
from typing import TYPE_CHECKING, Literal

import numpy as np
import pandas as pd

from sdcnn import contract, schemas
from sdcnn.deep_features import feature_tag
from sdcnn.errors import ConfigurationError
from sdcnn.grid_io import write_pgm
from sdcnn.imagecore import ImageGrid, Label, SourceTag, ViewName
from sdcnn.manifest import DatasetManifest, ManifestCase, ManifestView, write_manifest
from sdcnn.synthesizer import TumorMask, sample_training_pairs

if TYPE_CHECKING:  # pragma: no cover
    import os
    from collections.abc import Sequence

    from sdcnn.shallow_cnn import PatchPair

logger = getLogger(__name__)

DatasetKindT = Literal["cedm", "ffdm"]
#: Samples are stored with 12-bit depth, like most mammography detectors.
MAX_VALUE = 4095
_CONTOUR_POINTS = 16


def smooth_field(height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    """Random low-frequency texture in [0, 1]."""
    ys, xs = np.mgrid[0:height, 0:width].astype(float)
    out = np.zeros((height, width))
    for _ in range(6):
        fy, fx = rng.uniform(0.5, 3.0, size=2) * 2 * np.pi
        phase = rng.uniform(0, 2 * np.pi)
        out += np.sin(fy * ys / height + fx * xs / width + phase)
    return (out - out.min()) / (out.max() - out.min())


def _lesion(
    size: int, rng: np.random.Generator
) -> tuple[np.ndarray, tuple[tuple[float, float], ...]]:
    """Soft elliptical lesion profile and a polygon around its core."""
    cx, cy = rng.uniform(0.35 * size, 0.65 * size, size=2)
    rx, ry = rng.uniform(0.08 * size, 0.14 * size, size=2)
    ys, xs = np.mgrid[0:size, 0:size].astype(float)
    r2 = ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2
    profile = np.clip(1.0 - r2, 0.0, None) ** 0.5
    angles = np.linspace(0, 2 * np.pi, _CONTOUR_POINTS, endpoint=False)
    contour = tuple(
        (round(float(cx + rx * np.cos(a)), 3), round(float(cy + ry * np.sin(a)), 3))
        for a in angles
    )
    return profile, contour


def synthetic_case_images(
    label: Label, size: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, tuple[tuple[float, float], ...]]:
    """Low-energy image, recombined image (both in [0, 1]) and lesion contour."""
    tissue = smooth_field(size, size, rng)
    profile, contour = _lesion(size, rng)
    density = 0.35 if label is Label.CANCER else 0.2
    low_energy = 0.3 + 0.3 * tissue + density * profile
    low_energy += rng.normal(0.0, 0.01, size=low_energy.shape)
    enhancement = 0.8 if label is Label.CANCER else 0.25
    recombined = 0.1 + 0.05 * tissue + enhancement * profile**2
    return (
        np.clip(low_energy, 0.0, 1.0),
        np.clip(recombined, 0.0, 1.0),
        contour,
    )


def _to_counts(arr: np.ndarray) -> ImageGrid:
    return ImageGrid(np.rint(arr * MAX_VALUE))


def make_synthetic_dataset(
    out_dir: str | os.PathLike[str],
    kind: DatasetKindT = "cedm",
    n_cases: int = 40,
    seed: int = 0,
    image_size: int = 96,
) -> Path:
    """Write images and ``manifest.json`` into *out_dir*; return the manifest path.

    Half the cases (rounded up) are cancers, in seeded random order.
    """
    if kind not in ("cedm", "ffdm"):
        msg = f"unknown dataset kind {kind!r}"
        raise ConfigurationError(msg)
    if n_cases < 2 or image_size < 48:  # noqa: PLR2004
        raise ConfigurationError("need at least 2 cases and 48x48 images")
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    n_cancer = (n_cases + 1) // 2
    pool = [Label.CANCER] * n_cancer + [Label.BENIGN] * (n_cases - n_cancer)
    labels = [pool[i] for i in rng.permutation(n_cases)]
    sources = (
        (SourceTag.LE, SourceTag.RECOMBINED) if kind == "cedm" else (SourceTag.FFDM,)
    )
    cases = []
    for i, label in enumerate(labels):
        case_id = f"{kind}{i:03d}"
        views = []
        for view in ViewName:
            low, recombined, contour = synthetic_case_images(label, image_size, rng)
            images = {
                SourceTag.LE: low,
                SourceTag.FFDM: low,
                SourceTag.RECOMBINED: recombined,
            }
            for source in sources:
                rel = f"images/{case_id}_{view.value}_{source.value}.pgm"
                write_pgm(out / rel, _to_counts(images[source]), maxval=MAX_VALUE)
                views.append(ManifestView(view, source, rel, contour=contour))
        cases.append(ManifestCase(case_id, label, tuple(views)))
    manifest = DatasetManifest(f"synthetic-{kind}", tuple(cases), out)
    path = write_manifest(out / "manifest.json", manifest)
    logger.info("wrote %d synthetic %s cases to %s", n_cases, kind, out)
    return path


def identity_patch_pairs(
    n: int, seed: int, image_size: int = 64, n_images: int = 4
) -> list[PatchPair]:
    """Pairs from smooth images whose 3×3 target is the centre of the 15×15 input."""
    rng = np.random.default_rng(seed)
    pairs: list[PatchPair] = []
    per_image = -(-n // n_images)
    for k in range(n_images):
        image = ImageGrid(smooth_field(image_size, image_size, rng))
        pairs.extend(
            sample_training_pairs(
                image, image, TumorMask.full(image), per_image, seed * 1000 + k
            )
        )
    return pairs[:n]


@contract.result(schemas.FEATURE_MATRIX)
def synthetic_feature_matrix(
    n_cases: int = 40,
    seed: int = 0,
    sources: Sequence[SourceTag] = (SourceTag.FFDM, SourceTag.VIRTUAL),
    signal_source: SourceTag = SourceTag.VIRTUAL,
    n_channels: int = 8,
    signal: float = 2.0,
) -> pd.DataFrame:
    """Tagged features: noise everywhere, label shift on the first channels of
    *signal_source*.
    """
    rng = np.random.default_rng(seed)
    n_cancer = (n_cases + 1) // 2
    labels = rng.permutation(np.r_[np.ones(n_cancer), np.zeros(n_cases - n_cancer)])
    columns: dict[str, np.ndarray] = {}
    for view in ViewName:
        for source in sources:
            for ch in range(n_channels):
                values = rng.normal(size=n_cases)
                if source is signal_source and ch < 2:  # noqa: PLR2004
                    values = values + signal * labels
                columns[feature_tag(source, view, 1, ch)] = values
    return pd.DataFrame(
        {
            "case_id": [f"case{i:03d}" for i in range(n_cases)],
            "label": labels.astype(int),
            **columns,
        }
    )
