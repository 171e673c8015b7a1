"""The pipeline commands behind the command-line interface.

Each ``cmd_*`` function takes already-parsed inputs, writes its artifacts atomically
into an output location guarded by an advisory lock file, and returns a small
summary. Case-level problems (unreadable image, bad contour, region too small) are
collected and reported without stopping the other cases.
"""

from __future__ import annotations

import json
import os
from collections import defaultdict
from contextlib import contextmanager
from logging import getLogger
from pathlib import Path
from typing import TYPE_CHECKING, Any, NamedTuple

import numpy as np
import pandas as pd

from sdcnn import deep_features, evaluation, shallow_cnn, synthesizer
from sdcnn._lib import atomic_write_json, atomic_write_text, derive_seed
from sdcnn.errors import (
    ConfigurationError,
    DataCompletenessError,
    LockError,
    ManifestError,
    SdCnnError,
)
from sdcnn.grid_io import read_grid, remove_grid, write_grid
from sdcnn.imagecore import (
    ImageGrid,
    Label,
    SourceTag,
    ViewName,
    lesion_region,
    preprocess_view,
)
from sdcnn.manifest import (
    DatasetManifest,
    ManifestCase,
    ManifestView,
    load_case,
    load_view,
    write_manifest,
)
from sdcnn.synthetic import DatasetKindT, make_synthetic_dataset

if TYPE_CHECKING:  # pragma: no cover
    from collections.abc import Generator, Sequence

    from sdcnn.config import PipelineConfig
    from sdcnn.imagecore import RegionT

logger = getLogger(__name__)

LOCK_NAME = ".sdcnn.lock"
INDEX_NAME = "index.json"
_TRAIN_STREAM = 0
_VALIDATION_STREAM = 1
_SPLIT_STREAM = 1

#: ``(case_id, input entry, target entry)`` of one view.
_ViewPair = tuple[str, ManifestView, ManifestView]


@contextmanager
def output_lock(directory: str | os.PathLike[str]) -> Generator[Path, None, None]:
    """Hold ``.sdcnn.lock`` in *directory* for the duration of a command.

    :raises LockError: the lock file already exists.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as exc:
        msg = f"{directory} is in use by another command (remove {lock} if stale)"
        raise LockError(msg) from exc
    os.close(fd)
    try:
        yield lock
    finally:
        lock.unlink(missing_ok=True)


class CaseFailure(NamedTuple):
    """A case a command could not process."""

    case_id: str
    error: str


def _record_failure(failures: list[CaseFailure], case_id: str, exc: Exception) -> None:
    logger.warning("case %s failed: %s", case_id, exc)
    failures.append(CaseFailure(case_id, f"{type(exc).__name__}: {exc}"))


def _failures_json(failures: Sequence[CaseFailure]) -> list[dict[str, str]]:
    return [f._asdict() for f in failures]


class PreprocessResult(NamedTuple):
    """Location of the patch index and what went into it."""

    index_path: Path
    n_patches: int
    failures: tuple[CaseFailure, ...]


def cmd_preprocess(
    manifest: DatasetManifest, out_dir: str | os.PathLike[str]
) -> PreprocessResult:
    """Write one normalized 224×224 patch per (case, view, source) plus an index."""
    if not manifest.cases:
        raise ManifestError("no cases")
    out = Path(out_dir)
    entries: list[dict[str, Any]] = []
    failures: list[CaseFailure] = []
    with output_lock(out):
        for case in manifest.cases:
            try:
                record = load_case(manifest, case)
                patches = [
                    (view, preprocess_view(view.image, view.contour))
                    for view in record.views
                ]
            except (SdCnnError, OSError) as exc:
                _record_failure(failures, case.case_id, exc)
                continue
            for view, patch in patches:
                rel = (
                    f"patches/{case.case_id}_{view.view_name.value}"
                    f"_{view.source_tag.value}.f32"
                )
                write_grid(out / rel, patch)
                entries.append(
                    {
                        "case_id": case.case_id,
                        "label": case.label.value,
                        "patch_path": rel,
                        "source_tag": view.source_tag.value,
                        "view": view.view_name.value,
                    }
                )
            logger.info("case %s: %d patches", case.case_id, len(patches))
        index = atomic_write_json(
            out / INDEX_NAME,
            {
                "dataset": manifest.name,
                "failures": _failures_json(failures),
                "patches": entries,
            },
        )
    logger.info(
        "preprocessed %d patches, %d failed cases", len(entries), len(failures)
    )
    return PreprocessResult(index, len(entries), tuple(failures))


def _paired_views(
    case: ManifestCase, input_src: SourceTag, target_src: SourceTag
) -> list[tuple[ManifestView, ManifestView]] | None:
    """Input/target entries per view; ``None`` if any input lacks its target."""
    pairs = []
    for entry in case.views:
        if entry.source_tag is not input_src:
            continue
        target = case.get(entry.view, target_src)
        if target is None:
            return None
        pairs.append((entry, target))
    return pairs or None


def split_cases(
    case_ids: Sequence[str], n_validation: int, seed: int
) -> tuple[list[str], list[str]]:
    """Seeded case-level split into (training, validation), both in input order."""
    if n_validation >= len(case_ids):
        msg = f"{n_validation} validation cases leave none of {len(case_ids)} to train"
        raise ConfigurationError(msg)
    order = np.random.default_rng(derive_seed(seed, _SPLIT_STREAM)).permutation(
        len(case_ids)
    )
    held = {case_ids[i] for i in order[:n_validation]}
    return [c for c in case_ids if c not in held], [c for c in case_ids if c in held]


class TrainShallowResult(NamedTuple):
    """Artifacts and sizes of a shallow CNN training run."""

    model_path: Path
    history_path: Path
    n_train_images: int
    n_pairs: int
    validation: synthesizer.MseSummary | None


def cmd_train_shallow(
    manifest: DatasetManifest,
    out_dir: str | os.PathLike[str],
    config: PipelineConfig,
) -> TrainShallowResult:
    """Train the shallow CNN on input/target image pairs of the manifest.

    Cases, not images, are split into training and validation so both views of a
    subject land on the same side.

    :raises DataCompletenessError: cases lack a target image for an input view.
    """
    input_src = SourceTag(config.input_source)
    target_src = SourceTag(config.target_source)
    if not manifest.cases:
        raise ManifestError("no cases")
    paired = {
        c.case_id: _paired_views(c, input_src, target_src) for c in manifest.cases
    }
    unpaired = [cid for cid, views in paired.items() if views is None]
    if unpaired:
        msg = f"cases lack {input_src.value}/{target_src.value} image pairs"
        raise DataCompletenessError(msg, unpaired)
    train_ids, val_ids = split_cases(
        list(paired), config.validation_cases, config.seeds.master
    )

    def view_pairs(case_ids: list[str]) -> list[_ViewPair]:
        return [(cid, i, t) for cid in case_ids for i, t in paired[cid] or ()]

    def sample(stream: int, items: list[_ViewPair]) -> list[shallow_cnn.PatchPair]:
        pairs: list[shallow_cnn.PatchPair] = []
        for k, (_, inp_e, tgt_e) in enumerate(items):
            inp, tgt = load_view(manifest, inp_e), load_view(manifest, tgt_e)
            pairs.extend(
                synthesizer.training_pairs_for_view(
                    inp.image,
                    tgt.image,
                    inp.contour,
                    config.pairs_per_image,
                    derive_seed(config.seeds.shallow_train, stream, k),
                    config.region,
                )
            )
        return pairs

    out = Path(out_dir)
    summary = None
    with output_lock(out):
        train_items, val_items = view_pairs(train_ids), view_pairs(val_ids)
        train_pairs = sample(_TRAIN_STREAM, train_items)
        val_pairs = sample(_VALIDATION_STREAM, val_items)
        logger.info(
            "training on %d images (%d pairs), validating on %d images",
            len(train_items),
            len(train_pairs),
            len(val_items),
        )
        train_config = config.train_config
        result = shallow_cnn.train(
            shallow_cnn.init_model(train_config.rng_seed),
            train_pairs,
            train_config,
            validation=val_pairs,
        )
        model_path = shallow_cnn.save_model(
            out / "model.json", result.model, train_config
        )
        history = shallow_cnn.history_frame(result.history)
        history_path = atomic_write_text(
            out / "loss_history.csv", history.to_csv(index=False, lineterminator="\n")
        )
        if val_items:
            summary = _validation_images(manifest, val_items, result.model, config)
            atomic_write_json(
                out / "validation.json",
                {
                    "images": [
                        {"case_id": cid, "mse": mse, "view": inp.view.value}
                        for (cid, inp, _), mse in zip(val_items, summary.per_image)
                    ],
                    "mse_mean": summary.mean,
                    "mse_sd": summary.sd,
                },
            )
            logger.info(
                "validation image MSE %.6g +/- %.6g", summary.mean, summary.sd
            )
    return TrainShallowResult(
        model_path, history_path, len(train_items), len(train_pairs), summary
    )


def _validation_images(
    manifest: DatasetManifest,
    items: list[_ViewPair],
    model: shallow_cnn.ShallowCnnModel,
    config: PipelineConfig,
) -> synthesizer.MseSummary:
    """Render held-out views and compare them with their true targets."""
    triples = []
    for _, inp_e, tgt_e in items:
        inp, tgt = load_view(manifest, inp_e), load_view(manifest, tgt_e)
        rendered, _ = synthesizer.render_view(
            model, inp.image, inp.contour, config.region, config.window_step
        )
        truth = lesion_region(tgt.image, inp.contour, config.region).image
        covered = synthesizer.TumorMask(rendered.coverage > 0)
        triples.append((truth, rendered.virtual_image, covered))
    return synthesizer.validation_mse_summary(triples)


class SynthesizeResult(NamedTuple):
    """Augmented manifest and what was rendered."""

    manifest_path: Path
    n_images: int
    failures: tuple[CaseFailure, ...]


def _relocated(
    entry: ManifestView, manifest: DatasetManifest, out: Path
) -> ManifestView:
    """Same entry with its paths relative to *out*."""
    image = os.path.relpath(manifest.resolve(entry.image_path), out)
    mask = (
        None
        if entry.mask_path is None
        else os.path.relpath(manifest.resolve(entry.mask_path), out)
    )
    return ManifestView(
        entry.view,
        entry.source_tag,
        Path(image).as_posix(),
        entry.contour,
        None if mask is None else Path(mask).as_posix(),
    )


def cmd_synthesize(
    manifest: DatasetManifest,
    model_path: str | os.PathLike[str],
    out_dir: str | os.PathLike[str],
    region: RegionT = "crop",
    window_step: int = 1,
) -> SynthesizeResult:
    """Render a virtual recombined image for every LE/FFDM view.

    Writes the virtual image and its coverage as float32 grids and a new manifest
    listing the original views plus one ``VIRTUAL`` view per rendered image (its
    contour in the coordinates of the rendered region).
    """
    model = shallow_cnn.load_model(model_path)
    out = Path(out_dir).resolve()
    failures: list[CaseFailure] = []
    cases: list[ManifestCase] = []
    n_images = 0
    with output_lock(out):
        for case in manifest.cases:
            kept = [
                _relocated(v, manifest, out)
                for v in case.views
                if v.source_tag is not SourceTag.VIRTUAL
            ]
            added: list[ManifestView] = []
            written: list[Path] = []
            try:
                # render all views first; a failing view writes nothing
                renders = []
                for entry in case.views:
                    if not entry.source_tag.is_primary:
                        continue
                    view = load_view(manifest, entry)
                    renders.append(
                        (
                            entry,
                            *synthesizer.render_view(
                                model, view.image, view.contour, region, window_step
                            ),
                        )
                    )
                for entry, rendered, contour in renders:
                    stem = f"virtual/{case.case_id}_{entry.view.value}"
                    written.append(out / f"{stem}.f32")
                    write_grid(written[-1], rendered.virtual_image)
                    written.append(out / f"{stem}.coverage.f32")
                    write_grid(written[-1], ImageGrid(rendered.coverage))
                    added.append(
                        ManifestView(
                            entry.view,
                            SourceTag.VIRTUAL,
                            f"{stem}.f32",
                            contour=contour.points,
                        )
                    )
            except (SdCnnError, OSError) as exc:
                _record_failure(failures, case.case_id, exc)
                for path in written:
                    remove_grid(path)
                added = []
            n_images += len(added)
            cases.append(ManifestCase(case.case_id, case.label, (*kept, *added)))
            logger.info("case %s: %d virtual images", case.case_id, len(added))
        path = write_manifest(
            out / "manifest.json",
            DatasetManifest(manifest.name, tuple(cases), out),
        )
    logger.info("rendered %d virtual images, %d failed cases", n_images, len(failures))
    return SynthesizeResult(path, n_images, tuple(failures))


class ExtractResult(NamedTuple):
    """Feature matrix location and size."""

    csv_path: Path
    n_cases: int
    n_features: int


def _read_index(index_path: Path) -> list[dict[str, Any]]:
    try:
        index = json.loads(index_path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        msg = f"{index_path}: not valid JSON ({exc})"
        raise ManifestError(msg) from exc
    patches = index.get("patches") if isinstance(index, dict) else None
    if not patches:
        msg = f"{index_path}: patch index lists no patches"
        raise ManifestError(msg)
    return patches


def cmd_extract(
    index_path: str | os.PathLike[str],
    weights: deep_features.ResNetWeights,
    out_csv: str | os.PathLike[str],
) -> ExtractResult:
    """Extract deep features of every indexed patch into one row per case.

    Cases lacking a (view, source) block another case has get blank values there.

    :raises DataCompletenessError: an indexed patch file is missing.
    """
    index_path = Path(index_path)
    patches = _read_index(index_path)
    by_case: dict[str, list[dict[str, Any]]] = defaultdict(list)
    labels: dict[str, int] = {}
    for entry in patches:
        by_case[entry["case_id"]].append(entry)
        labels[entry["case_id"]] = Label(entry["label"]).as_int
    missing = sorted(
        {
            e["case_id"]
            for e in patches
            if not (index_path.parent / e["patch_path"]).is_file()
        }
    )
    if missing:
        raise DataCompletenessError("indexed patches are missing", missing)

    vectors: dict[str, list[deep_features.FeatureVector]] = {}
    for case_id, entries in by_case.items():
        vectors[case_id] = [
            deep_features.extract_features(
                weights,
                read_grid(index_path.parent / e["patch_path"]),
                source_tag=SourceTag(e["source_tag"]),
                view_name=ViewName(e["view"]),
            )
            for e in entries
        ]
        logger.info("case %s: %d feature vectors", case_id, len(entries))

    blocks = sorted(
        {(v.view_name, v.source_tag) for vs in vectors.values() for v in vs},
        key=deep_features.vector_order,
    )
    width = deep_features.N_FEATURES
    values = np.full((len(vectors), len(blocks) * width), np.nan)
    tags: list[str] = []
    for b, (view, source) in enumerate(blocks):
        tags.extend(
            deep_features.feature_tag(source, view, stage + 1, ch)
            for stage, n_ch in enumerate(deep_features.STAGE_CHANNELS)
            for ch in range(n_ch)
        )
        for row, vs in enumerate(vectors.values()):
            for v in vs:
                if (v.view_name, v.source_tag) == (view, source):
                    values[row, b * width : (b + 1) * width] = v.values
    case_ids = list(vectors)
    matrix = pd.concat(
        [
            pd.DataFrame(
                {"case_id": case_ids, "label": [labels[c] for c in case_ids]}
            ),
            pd.DataFrame(values, columns=tags),
        ],
        axis=1,
    )
    out_csv = Path(out_csv)
    with output_lock(out_csv.parent):
        evaluation.write_feature_matrix(out_csv, matrix)
    logger.info("wrote %d cases x %d features to %s", len(case_ids), len(tags), out_csv)
    return ExtractResult(out_csv, len(case_ids), len(tags))


def cmd_evaluate(
    features_csv: str | os.PathLike[str],
    out_dir: str | os.PathLike[str],
    config: PipelineConfig,
) -> evaluation.EvalReport:
    """Cross-validate on the configured sources and write the report files."""
    matrix = evaluation.read_feature_matrix(features_csv)
    report = evaluation.run_experiment(
        matrix,
        config.source_tags,
        config.fold_scheme,
        config.gbt_config,
        config.threshold,
        config.seeds.master,
    )
    with output_lock(out_dir):
        evaluation.write_report(report, out_dir)
    return report


def cmd_compare(
    features_csv: str | os.PathLike[str],
    out_dir: str | os.PathLike[str],
    config: PipelineConfig,
    selections: Sequence[Sequence[SourceTag]],
) -> evaluation.Comparison:
    """Evaluate several source selections on one fold plan, side by side."""
    matrix = evaluation.read_feature_matrix(features_csv)
    comparison = evaluation.compare_experiments(
        matrix,
        selections,
        config.fold_scheme,
        config.gbt_config,
        config.threshold,
        config.seeds.master,
    )
    out = Path(out_dir)
    with output_lock(out):
        atomic_write_text(
            out / "comparison.csv",
            comparison.table.to_csv(index=False, lineterminator="\n"),
        )
        for report in comparison.reports:
            name = "+".join(s.value for s in report.sources)
            evaluation.write_report(report, out / name)
    return comparison


def cmd_gen_random_weights(out_path: str | os.PathLike[str], seed: int) -> Path:
    """Write a randomly initialized weight container (for tests and demos)."""
    out_path = Path(out_path)
    with output_lock(out_path.parent):
        return deep_features.save_weights(out_path, deep_features.random_weights(seed))


def cmd_make_synthetic_dataset(
    out_dir: str | os.PathLike[str],
    kind: DatasetKindT,
    n_cases: int,
    seed: int,
    image_size: int,
) -> Path:
    """Generate a synthetic dataset and return its manifest path."""
    with output_lock(out_dir):
        return make_synthetic_dataset(out_dir, kind, n_cases, seed, image_size)
