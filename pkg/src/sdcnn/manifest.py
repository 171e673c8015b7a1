"""Dataset manifests: which images, annotations and labels make up a dataset.

A manifest is a JSON document::

    {
      "dataset": "demo",
      "cases": [
        {"case_id": "c000", "label": "cancer",
         "views": [{"view": "CC", "source_tag": "LE",
                    "image_path": "images/c000_CC_LE.pgm",
                    "contour": [[10, 12], [40, 12], [25, 44]]}]}
      ]
    }

Each view gives either ``contour`` (a list of ``[x, y]`` points) or ``mask_path``
(an image whose nonzero pixels mark the lesion). Paths are relative to the manifest
file. Whether the files exist is checked when a case is loaded, so one broken case
does not stop a command from processing the others.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from logging import getLogger
from pathlib import Path
from typing import TYPE_CHECKING, Any

from sdcnn._lib import atomic_write_json
from sdcnn.errors import ManifestError
from sdcnn.grid_io import read_image
from sdcnn.imagecore import (
    CaseRecord,
    Contour,
    Label,
    SourceTag,
    View,
    ViewName,
    contour_from_mask,
)

if TYPE_CHECKING:  # pragma: no cover
    import os
    from collections.abc import Iterable

logger = getLogger(__name__)


@dataclass(frozen=True)
class ManifestView:
    """One image entry of a case."""

    view: ViewName
    source_tag: SourceTag
    image_path: str
    contour: tuple[tuple[float, float], ...] | None = None
    mask_path: str | None = None

    def __post_init__(self) -> None:
        if (self.contour is None) == (self.mask_path is None):
            msg = f"view {self.view.value}/{self.source_tag.value} needs exactly one of"
            msg += " contour or mask_path"
            raise ManifestError(msg)
        if self.contour is not None:
            pts = tuple((float(x), float(y)) for x, y in self.contour)
            object.__setattr__(self, "contour", pts)

    def to_dict(self) -> dict[str, Any]:
        """JSON-ready form."""
        out: dict[str, Any] = {
            "image_path": self.image_path,
            "source_tag": self.source_tag.value,
            "view": self.view.value,
        }
        if self.contour is not None:
            out["contour"] = [list(p) for p in self.contour]
        else:
            out["mask_path"] = self.mask_path
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ManifestView:
        """Parse one view entry."""
        try:
            return cls(
                view=ViewName(data["view"]),
                source_tag=SourceTag(data["source_tag"]),
                image_path=str(data["image_path"]),
                contour=data.get("contour"),
                mask_path=data.get("mask_path"),
            )
        except (KeyError, ValueError, TypeError) as exc:
            if isinstance(exc, ManifestError):
                raise
            msg = f"malformed view entry {data!r}: {exc}"
            raise ManifestError(msg) from exc


@dataclass(frozen=True)
class ManifestCase:
    """One subject of the dataset."""

    case_id: str
    label: Label
    views: tuple[ManifestView, ...]

    def __post_init__(self) -> None:
        if not self.views:
            msg = f"case {self.case_id!r} lists no views"
            raise ManifestError(msg)
        keys = [(v.view, v.source_tag) for v in self.views]
        if len(set(keys)) != len(keys):
            msg = f"case {self.case_id!r} lists a (view, source) pair twice"
            raise ManifestError(msg)

    def sources(self) -> set[SourceTag]:
        """Image sources present in this case."""
        return {v.source_tag for v in self.views}

    def get(self, view: ViewName, source: SourceTag) -> ManifestView | None:
        """The entry for one (view, source), or ``None``."""
        for v in self.views:
            if v.view is view and v.source_tag is source:
                return v
        return None

    def to_dict(self) -> dict[str, Any]:
        """JSON-ready form."""
        return {
            "case_id": self.case_id,
            "label": self.label.value,
            "views": [v.to_dict() for v in self.views],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ManifestCase:
        """Parse one case entry."""
        try:
            case_id = str(data["case_id"])
            label = Label(data["label"])
            views = tuple(ManifestView.from_dict(v) for v in data["views"])
        except (KeyError, ValueError, TypeError) as exc:
            if isinstance(exc, ManifestError):
                raise
            msg = f"malformed case entry: {exc}"
            raise ManifestError(msg) from exc
        return cls(case_id, label, views)


@dataclass(frozen=True)
class DatasetManifest:
    """A named list of cases; relative paths resolve against ``root``."""

    name: str
    cases: tuple[ManifestCase, ...]
    root: Path = field(default=Path(), compare=False)

    def __post_init__(self) -> None:
        ids = [c.case_id for c in self.cases]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            msg = f"duplicate case ids: {', '.join(dupes)}"
            raise ManifestError(msg)
        object.__setattr__(self, "cases", tuple(self.cases))

    def resolve(self, relpath: str) -> Path:
        """Absolute location of a path listed in the manifest."""
        return self.root / relpath

    def to_dict(self) -> dict[str, Any]:
        """JSON-ready form."""
        return {"cases": [c.to_dict() for c in self.cases], "dataset": self.name}

    @classmethod
    def from_dict(cls, data: dict[str, Any], root: Path = Path()) -> DatasetManifest:
        """Parse a manifest document."""
        if not isinstance(data, dict) or "cases" not in data:
            raise ManifestError("manifest must be an object with a 'cases' list")
        cases = tuple(ManifestCase.from_dict(c) for c in data["cases"])
        return cls(str(data.get("dataset", "")), cases, root)

    def with_cases(self, cases: Iterable[ManifestCase]) -> DatasetManifest:
        """Same manifest with another case list."""
        return DatasetManifest(self.name, tuple(cases), self.root)


def read_manifest(path: str | os.PathLike[str]) -> DatasetManifest:
    """Load and validate a manifest file."""
    path = Path(path)
    try:
        data = json.loads(path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        msg = f"{path}: not valid JSON ({exc})"
        raise ManifestError(msg) from exc
    return DatasetManifest.from_dict(data, path.parent)


def write_manifest(path: str | os.PathLike[str], manifest: DatasetManifest) -> Path:
    """Write *manifest* as JSON; paths stay as given."""
    return atomic_write_json(path, manifest.to_dict())


def load_view(manifest: DatasetManifest, entry: ManifestView) -> View:
    """Read the image and annotation of one manifest entry."""
    image = read_image(manifest.resolve(entry.image_path))
    if entry.contour is not None:
        contour = Contour(entry.contour)
    else:
        mask = read_image(manifest.resolve(str(entry.mask_path)))
        contour = contour_from_mask(mask.data > 0)
    return View(entry.view, entry.source_tag, image, contour)


def load_case(manifest: DatasetManifest, case: ManifestCase) -> CaseRecord:
    """Read every view of a case."""
    views = tuple(load_view(manifest, v) for v in case.views)
    logger.debug("loaded case %s with %d views", case.case_id, len(views))
    return CaseRecord(case.case_id, case.label, views)
