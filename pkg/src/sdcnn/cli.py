"""Command-line interface: ``sdcnn <command> [options]``.

Commands, in pipeline order::

    make-synthetic-dataset  write a synthetic CEDM or FFDM dataset
    preprocess              annotated views -> 224x224 lesion patches + index
    train-shallow           LE/recombined pairs -> shallow CNN model
    synthesize              LE/FFDM views -> virtual recombined images + manifest
    gen-random-weights      random residual-network weights (tests, demos)
    extract                 patch index + weights -> feature matrix CSV
    evaluate                feature matrix -> cross-validated report
    compare                 feature matrix -> report per source selection

Every command accepts ``--manifest``, ``--out``, ``--seed``, ``--config`` and
``--log-level``. Exit codes: 0 success, 1 input error, 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from logging import getLogger
from pathlib import Path
from typing import TYPE_CHECKING, Any

from sdcnn import __version__, pipeline
from sdcnn._lib import split_or_list
from sdcnn.config import PipelineConfig, load_config
from sdcnn.deep_features import load_weights
from sdcnn.errors import ConfigurationError, SdCnnError
from sdcnn.imagecore import SourceTag
from sdcnn.manifest import read_manifest

if TYPE_CHECKING:  # pragma: no cover
    from collections.abc import Sequence

logger = getLogger(__name__)

#: Environment variable holding the default log level.
SDCNN_LOG_LEVEL_ENV = "SDCNN_LOG_LEVEL"
_LOG_LEVELS = ("debug", "info", "warning", "error")

EXIT_OK = 0
EXIT_INPUT_ERROR = 1
EXIT_INTERNAL_ERROR = 2


def configure_logging(level: str | None) -> None:
    """Configure the root logger from ``--log-level`` or :data:`SDCNN_LOG_LEVEL_ENV`."""
    name = (level or os.getenv(SDCNN_LOG_LEVEL_ENV) or "info").lower()
    valid = name in _LOG_LEVELS
    logging.basicConfig(
        level=getattr(logging, name.upper()) if valid else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )
    if not valid:
        logger.warning("Invalid log level %r. Using info.", name)


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--manifest", type=Path, help="dataset manifest (JSON)")
    common.add_argument("--out", type=Path, help="output directory or file")
    common.add_argument("--seed", type=int, help="master seed (default: config, 0)")
    common.add_argument("--config", type=Path, help="pipeline configuration (JSON)")
    common.add_argument("--log-level", choices=_LOG_LEVELS, help="logging verbosity")
    return common


def _evaluation_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--features", type=Path, required=True, help="feature CSV")
    parser.add_argument("--folds", help="'loocv' or 'stratified:K'")
    parser.add_argument("--threshold", type=float, help="decision threshold")
    parser.add_argument("--trees", type=int, help="number of boosted trees")
    parser.add_argument("--max-depth", type=int, help="depth of each tree")
    parser.add_argument(
        "--class-weights", help="benign,cancer sample weights, e.g. '1,0.5'"
    )


def build_parser() -> argparse.ArgumentParser:
    """The argument parser of the ``sdcnn`` command."""
    common = _common_options()
    parser = argparse.ArgumentParser(
        prog="sdcnn",
        description="Mammographic lesion classification with virtual recombined "
        "images.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", parents=[common], help="make lesion patches")
    p.set_defaults(handler=_run_preprocess)

    p = sub.add_parser("train-shallow", parents=[common], help="train the shallow CNN")
    p.add_argument("--epochs", type=int)
    p.add_argument("--pairs-per-image", type=int)
    p.add_argument("--validation-cases", type=int)
    p.add_argument("--region", choices=("crop", "full"))
    p.set_defaults(handler=_run_train_shallow)

    p = sub.add_parser("synthesize", parents=[common], help="render virtual images")
    p.add_argument("--model", type=Path, required=True, help="shallow CNN model")
    p.add_argument("--region", choices=("crop", "full"))
    p.add_argument("--window-step", type=int)
    p.set_defaults(handler=_run_synthesize)

    p = sub.add_parser("extract", parents=[common], help="extract deep features")
    p.add_argument("--index", type=Path, required=True, help="patch index (JSON)")
    p.add_argument("--weights", type=Path, help="weight manifest (JSON)")
    p.set_defaults(handler=_run_extract)

    p = sub.add_parser("evaluate", parents=[common], help="cross-validate a model")
    _evaluation_options(p)
    p.add_argument("--sources", help="comma-separated sources, e.g. FFDM,VIRTUAL")
    p.set_defaults(handler=_run_evaluate)

    p = sub.add_parser("compare", parents=[common], help="compare source selections")
    _evaluation_options(p)
    p.add_argument(
        "--selection",
        action="append",
        required=True,
        help="comma-separated sources; repeat for every selection",
    )
    p.set_defaults(handler=_run_compare)

    p = sub.add_parser(
        "gen-random-weights", parents=[common], help="write random network weights"
    )
    p.set_defaults(handler=_run_gen_random_weights)

    p = sub.add_parser(
        "make-synthetic-dataset", parents=[common], help="write a synthetic dataset"
    )
    p.add_argument("--kind", choices=("cedm", "ffdm"), default="cedm")
    p.add_argument("--cases", type=int, default=40)
    p.add_argument("--size", type=int, default=96, help="image width and height")
    p.set_defaults(handler=_run_make_synthetic_dataset)
    return parser


def _require(value: Any, flag: str) -> Any:
    if value is None:
        msg = f"{flag} is required for this command"
        raise ConfigurationError(msg)
    return value


def _out(args: argparse.Namespace, config: PipelineConfig) -> Path:
    if args.out is not None:
        return args.out
    return Path(_require(config.out_dir, "--out"))


def _parse_sources(text: str) -> tuple[str, ...]:
    names = tuple(s.upper() for s in split_or_list(text))
    for name in names:
        try:
            SourceTag(name)
        except ValueError as exc:
            msg = f"unknown image source {name!r}"
            raise ConfigurationError(msg) from exc
    return names


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    """Configuration file overridden by the command-line flags."""
    config = load_config(args.config)
    if args.seed is not None:
        config = replace(config, seeds=replace(config.seeds, master=args.seed))
    flags = vars(args)
    train: dict[str, Any] = {}
    if flags.get("epochs") is not None:
        train["epochs"] = args.epochs
    gbt: dict[str, Any] = {}
    if flags.get("trees") is not None:
        gbt["n_trees"] = args.trees
    if flags.get("max_depth") is not None:
        gbt["max_depth"] = args.max_depth
    if flags.get("class_weights") is not None:
        try:
            weights = tuple(float(w) for w in split_or_list(args.class_weights))
        except ValueError as exc:
            msg = f"invalid --class-weights {args.class_weights!r}"
            raise ConfigurationError(msg) from exc
        gbt["class_weights"] = weights
    top: dict[str, Any] = {}
    for flag, key in (
        ("folds", "folds"),
        ("threshold", "threshold"),
        ("pairs_per_image", "pairs_per_image"),
        ("validation_cases", "validation_cases"),
        ("region", "region"),
        ("window_step", "window_step"),
    ):
        if flags.get(flag) is not None:
            top[key] = flags[flag]
    if flags.get("sources") is not None:
        top["sources"] = _parse_sources(args.sources)
    return replace(
        config,
        train=replace(config.train, **train),
        gbt=replace(config.gbt, **gbt),
        **top,
    )


def _run_preprocess(args: argparse.Namespace, config: PipelineConfig) -> int:
    manifest = read_manifest(_require(args.manifest, "--manifest"))
    result = pipeline.cmd_preprocess(manifest, _out(args, config))
    return EXIT_INPUT_ERROR if result.failures else EXIT_OK


def _run_train_shallow(args: argparse.Namespace, config: PipelineConfig) -> int:
    manifest = read_manifest(_require(args.manifest, "--manifest"))
    pipeline.cmd_train_shallow(manifest, _out(args, config), config)
    return EXIT_OK


def _run_synthesize(args: argparse.Namespace, config: PipelineConfig) -> int:
    manifest = read_manifest(_require(args.manifest, "--manifest"))
    result = pipeline.cmd_synthesize(
        manifest, args.model, _out(args, config), config.region, config.window_step
    )
    return EXIT_INPUT_ERROR if result.failures else EXIT_OK


def _run_extract(args: argparse.Namespace, config: PipelineConfig) -> int:
    weights_path = args.weights or _require(config.weights_path, "--weights")
    out = _out(args, config)
    if out.suffix.lower() != ".csv":
        out = out / "features.csv"
    pipeline.cmd_extract(args.index, load_weights(weights_path), out)
    return EXIT_OK


def _run_evaluate(args: argparse.Namespace, config: PipelineConfig) -> int:
    pipeline.cmd_evaluate(args.features, _out(args, config), config)
    return EXIT_OK


def _run_compare(args: argparse.Namespace, config: PipelineConfig) -> int:
    selections = [
        tuple(SourceTag(s) for s in _parse_sources(sel)) for sel in args.selection
    ]
    comparison = pipeline.cmd_compare(
        args.features, _out(args, config), config, selections
    )
    print(comparison.table.to_string(index=False))  # noqa: T201
    return EXIT_OK


def _run_gen_random_weights(args: argparse.Namespace, config: PipelineConfig) -> int:
    out = _out(args, config)
    if out.suffix.lower() != ".json":
        out = out / "weights.json"
    pipeline.cmd_gen_random_weights(out, config.seeds.master)
    return EXIT_OK


def _run_make_synthetic_dataset(
    args: argparse.Namespace, config: PipelineConfig
) -> int:
    pipeline.cmd_make_synthetic_dataset(
        _out(args, config), args.kind, args.cases, config.seeds.master, args.size
    )
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    """Run the command line; returns the process exit code."""
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        config = resolve_config(args)
        return int(args.handler(args, config))
    except (SdCnnError, OSError, json.JSONDecodeError) as exc:
        logger.error("%s: %s", type(exc).__name__, exc)  # noqa: TRY400
        return EXIT_INPUT_ERROR
    except Exception:
        logger.exception("internal error")
        return EXIT_INTERNAL_ERROR


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
