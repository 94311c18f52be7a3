"""
Command-line surface: ``histo-ssl <subcommand> --out DIR [--config F] [--seed S] [--override k=v ...]``.

Every subcommand resolves its configuration and writes ``resolved_config.cfg``
into ``--out`` before doing any work. Errors are reported on stderr with their
category; the exit code is 2 for configuration errors, 3 for numeric aborts and
4 for missing inputs and other I/O failures.
"""

import argparse
import logging
import pathlib
import sys
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from histo_ssl import utils
from histo_ssl.augment.ect import (
    DEFAULT_CROP_ASPECT,
    GLOBAL_CROP_SCALE,
    CropRect,
    EctConfig,
    sample_crop_resize,
    sample_ect,
)
from histo_ssl.augment.photometric import apply_photometric
from histo_ssl.dataset_types import SlideSpec
from histo_ssl.errors import ConfigError, DataError, HistoSSLError, ParameterError
from histo_ssl.evaluation.probe import (
    ProbeConfig,
    linear_regression_probe,
    make_splits,
    patch_aggregate_probe,
    regression_metrics,
    split_indices,
)
from histo_ssl.evaluation.report import (
    COMPARISON_NAME,
    REPORT_NAME,
    collect_reports,
    compare_models,
    write_comparison_report,
    write_report,
)
from histo_ssl.model.checkpoint import load_checkpoint
from histo_ssl.model.config import EmbeddingMode
from histo_ssl.model.vit import TokenOutput, extract_embedding
from histo_ssl.tensor_kernel import Rng
from histo_ssl.tissue.manifest import MANIFEST_NAME, build_manifest, read_manifest
from histo_ssl.tissue.raster_io import read_ppm, write_ppm
from histo_ssl.tissue.synthetic import gen_localized_feature_tiles, gen_synthetic_slides
from histo_ssl.training.config import (
    TrainConfig,
    build_train_config,
    resolve_config,
    write_config_snapshot,
)
from histo_ssl.training.loop import (
    BACKBONE,
    CHECKPOINT_NAME,
    EMA,
    TileStore,
    distill,
    embed_token_outputs,
    train,
)
from histo_ssl.training.metrics import METRICS_NAME, RunMetrics

logger = logging.getLogger(__name__)

EXIT_CODES = {"config": 2, "numeric": 3, "data": 4, "io": 4, "internal": 1}
PREVIEW_TILE_SIZE = 392
RECTS_NAME = "rects.tsv"
SLIDE_SEED_STRIDE = 10_000


def _manifest_path(path: pathlib.Path) -> pathlib.Path:
    return path / MANIFEST_NAME if path.is_dir() else path


def _resolve(args: argparse.Namespace) -> TrainConfig:
    """Resolve the run config and write its snapshot into ``--out``."""
    overrides = list(args.override or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    values = resolve_config(args.config, overrides)
    snapshot = write_config_snapshot(values, args.out)
    logger.info(f"Resolved configuration written to {snapshot}")
    return build_train_config(values)


def gen_data(args: argparse.Namespace) -> None:
    cfg = _resolve(args)
    data = cfg.data
    spec = SlideSpec(
        size=data.slide_size,
        n_classes=data.texture_classes,
        background_fraction=data.background_fraction,
    )
    seeds = [cfg.seed * SLIDE_SEED_STRIDE + i for i in range(data.n_slides)]
    slides = gen_synthetic_slides(seeds, spec, workers=utils.worker_count())
    manifest = build_manifest(slides, args.out, data.tile_size, data.min_coverage, seed=cfg.seed)
    if len(manifest) == 0:
        raise DataError(f"no tile reached {data.min_coverage} tissue coverage")
    size_mb = utils.get_directory_size(args.out) / 1e6
    logger.info(f"Generated {len(manifest)} tiles from {len(slides)} slides ({size_mb:.1f} MB)")


def run_train(args: argparse.Namespace) -> None:
    cfg = _resolve(args)
    manifest = read_manifest(_manifest_path(args.manifest))
    resume, resume_metrics = None, None
    if args.resume is not None:
        resume = load_checkpoint(args.resume)
        metrics_path = args.resume.parent / METRICS_NAME
        if metrics_path.exists():
            resume_metrics = RunMetrics.read_tsv(metrics_path)
        else:
            logger.warning(f"No {METRICS_NAME} next to {args.resume}; metrics restart empty")
    result = train(cfg, manifest, out_dir=args.out, resume=resume, resume_metrics=resume_metrics)
    logger.info(f"Checkpoint written to {result.checkpoint_path}")


def run_distill(args: argparse.Namespace) -> None:
    cfg = _resolve(args)
    teacher = load_checkpoint(args.teacher)
    manifest = read_manifest(_manifest_path(args.manifest))
    result = distill(teacher, cfg.model, manifest, cfg, out_dir=args.out)
    logger.info(f"Distilled checkpoint written to {result.checkpoint_path}")


def _classification_task(
    task: str,
    outputs: Dict[str, np.ndarray],
    labels: np.ndarray,
    splits: Dict[str, np.ndarray],
    modes: Sequence[EmbeddingMode],
    probe_cfg: ProbeConfig,
    rng: Rng,
) -> tuple[List[dict], List[dict]]:
    rows, comparisons = [], []
    predictions = {}
    for index, mode in enumerate(modes):
        metrics, result = patch_aggregate_probe(
            outputs, labels, mode, splits, probe_cfg, rng.fork(index)
        )
        rows.extend(metrics.as_rows(task))
        predictions[mode.value] = result.predictions
        logger.info(
            f"{task} [{mode.value}]: accuracy {metrics.accuracy:.4f}, "
            f"weighted F1 {metrics.weighted_f1:.4f} on {metrics.n_test} tiles"
        )
    test_labels = labels[splits["test"]]
    names = list(predictions)
    for a, b in zip(names, names[1:]):
        comparisons.append(
            compare_models(
                predictions[a],
                predictions[b],
                test_labels,
                task=task,
                config="paired",
                model_a=a,
                model_b=b,
            )
        )
    return rows, comparisons


def run_probe(args: argparse.Namespace) -> None:
    cfg = _resolve(args)
    checkpoint = load_checkpoint(args.checkpoint)
    if not checkpoint.config:
        raise DataError(f"checkpoint {args.checkpoint} carries no configuration")
    model_cfg = build_train_config(checkpoint.config)
    params = checkpoint.subset(EMA + BACKBONE)
    if not params:
        raise DataError(f"checkpoint {args.checkpoint} has no EMA backbone")
    model = model_cfg.model
    probe_cfg = ProbeConfig(
        iterations=cfg.probe.iterations,
        batch_size=cfg.probe.batch_size,
        lr=cfg.probe.learning_rate,
    )
    root = Rng(cfg.seed)
    rows: List[dict] = []
    comparisons: List[dict] = []

    if args.manifest is not None:
        manifest = read_manifest(_manifest_path(args.manifest))
        store = TileStore(manifest, model_cfg.views.source_size)
        rasters = np.stack([store[i] for i in range(len(manifest))])
        outputs = embed_token_outputs(params, model, rasters)
        df = manifest.to_dataframe()
        splits = split_indices(
            len(manifest),
            cfg.probe.val_fraction,
            cfg.probe.test_fraction,
            root.fork(0),
            groups=df["slide_id"].to_numpy(),
        )
        task_rows, task_comparisons = _classification_task(
            "tissue",
            outputs,
            df["tissue"].to_numpy(),
            splits,
            (EmbeddingMode.CLS_ONLY, EmbeddingMode.CLS_MEAN),
            probe_cfg,
            root.fork(1),
        )
        rows.extend(task_rows)
        comparisons.extend(task_comparisons)

        token_out = TokenOutput(
            cls=outputs["cls"],
            registers=np.zeros((len(manifest), 0, model.embed_dim)),
            patches=outputs["patches"],
        )
        vectors = extract_embedding(token_out, cfg.probe.embedding)
        train_set, val_set, test_set = make_splits(
            vectors, df["coverage"].to_numpy(dtype=np.float64), splits, cfg.probe.embedding
        )
        try:
            result = linear_regression_probe(train_set, val_set, test_set, probe_cfg, root.fork(2))
            r = regression_metrics(result, test_set)
            rows.append(
                {
                    "task": "coverage",
                    "config": cfg.probe.embedding.value,
                    "metric": "pearson",
                    "value": r,
                    "n_test": len(test_set),
                }
            )
            logger.info(f"coverage [{cfg.probe.embedding.value}]: pearson {r:.4f}")
        except DataError as e:
            logger.warning(f"Skipping coverage regression: {e}")

    n_localized = cfg.probe.localized_tiles
    if n_localized:
        tiles, labels = gen_localized_feature_tiles(n_localized, model.image_size, root.fork(3))
        outputs = embed_token_outputs(params, model, tiles)
        splits = split_indices(
            n_localized, cfg.probe.val_fraction, cfg.probe.test_fraction, root.fork(4)
        )
        task_rows, task_comparisons = _classification_task(
            "localized",
            outputs,
            labels,
            splits,
            (
                EmbeddingMode.CLS_ONLY,
                EmbeddingMode.CLS_MEAN,
                EmbeddingMode.PATCH_MEAN,
                EmbeddingMode.PATCH_MAX,
            ),
            probe_cfg,
            root.fork(5),
        )
        rows.extend(task_rows)
        comparisons.extend(task_comparisons)

    if not rows:
        raise DataError("nothing to probe: pass --manifest or set probe_localized_tiles")
    write_report(rows, args.out / REPORT_NAME)
    if comparisons:
        write_comparison_report(comparisons, args.out / COMPARISON_NAME)


def preview_augment(args: argparse.Namespace) -> None:
    cfg = _resolve(args)
    tile = read_ppm(args.tile)
    if tile.shape[:2] != (PREVIEW_TILE_SIZE, PREVIEW_TILE_SIZE):
        raise ParameterError(
            f"preview needs a {PREVIEW_TILE_SIZE}x{PREVIEW_TILE_SIZE} tile, got {tile.shape[:2]}"
        )
    if args.n < 1:
        raise ParameterError(f"number of previews must be >= 1, got {args.n}")
    geometry = EctConfig(
        source_size=PREVIEW_TILE_SIZE,
        scale_range=cfg.views.scale_range,
        aspect_range=cfg.views.aspect_range,
    )
    size = geometry.global_size
    offset = (PREVIEW_TILE_SIZE - size) // 2
    centre = tile[offset : offset + size, offset : offset + size]
    rng = Rng(cfg.seed)
    records = []
    for method, method_rng in (("ect", rng.fork(0)), ("crop_resize", rng.fork(1))):
        for i in range(args.n):
            view_rng = method_rng.fork(i)
            if method == "ect":
                rect, view = sample_ect(tile, size, geometry, view_rng)
            else:
                rect, view = sample_crop_resize(
                    centre, size, GLOBAL_CROP_SCALE, DEFAULT_CROP_ASPECT, view_rng
                )
                rect = CropRect(rect.x + offset, rect.y + offset, rect.w, rect.h)
            view, applied = apply_photometric(view, cfg.photometric, view_rng.fork(0))
            name = f"{method}_{i:03d}.ppm"
            write_ppm(args.out / name, view)
            records.append(
                {
                    "file": name,
                    "method": method,
                    "x": rect.x,
                    "y": rect.y,
                    "w": rect.w,
                    "h": rect.h,
                    "photometric": ",".join(applied) or "none",
                }
            )
    pd.DataFrame(records).to_csv(args.out / RECTS_NAME, sep="\t", index=False)
    logger.info(f"Wrote {len(records)} preview views to {args.out}")


def report(args: argparse.Namespace) -> None:
    _resolve(args)
    report_df, metrics_df = collect_reports(args.runs)
    if not report_df.empty:
        report_df.to_csv(args.out / "combined_report.tsv", sep="\t", index=False)
    if not metrics_df.empty:
        metrics_df.to_csv(args.out / "combined_metrics.tsv", sep="\t", index=False)
    if args.plots:
        try:
            from histo_ssl.plotting_functions import create_run_plots
        except ImportError as e:
            raise ConfigError(f"plots need the 'plots' extra: {e}") from e
        create_run_plots(metrics_df, report_df, args.out / "plots")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="histo-ssl",
        description="Self-supervised pretraining and frozen-embedding evaluation on synthetic "
        "pathology tiles.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=pathlib.Path, help="run configuration file (key = value)")
    common.add_argument("--seed", type=int, help="overrides the configured seed")
    common.add_argument("--out", type=pathlib.Path, required=True, help="output directory")
    common.add_argument(
        "--override",
        action="append",
        metavar="KEY=VALUE",
        help="configuration override, applied after the config file (repeatable)",
    )
    common.add_argument("--verbose", action="store_true", help="debug logging")

    subparsers = parser.add_subparsers(dest="command", required=True)

    sub = subparsers.add_parser("gen-data", parents=[common], help="generate synthetic slides and tiles")
    sub.set_defaults(func=gen_data)

    sub = subparsers.add_parser("train", parents=[common], help="self-supervised pretraining")
    sub.add_argument("--manifest", type=pathlib.Path, required=True, help="manifest or data directory")
    sub.add_argument("--resume", type=pathlib.Path, help="checkpoint to continue from")
    sub.set_defaults(func=run_train)

    sub = subparsers.add_parser("distill", parents=[common], help="distil a pretrained teacher")
    sub.add_argument("--teacher", type=pathlib.Path, required=True, help="teacher checkpoint")
    sub.add_argument("--manifest", type=pathlib.Path, required=True, help="manifest or data directory")
    sub.set_defaults(func=run_distill)

    sub = subparsers.add_parser("probe", parents=[common], help="linear probes on frozen embeddings")
    sub.add_argument(
        "--checkpoint",
        type=pathlib.Path,
        help=f"checkpoint to evaluate (default: OUT/{CHECKPOINT_NAME})",
    )
    sub.add_argument("--manifest", type=pathlib.Path, help="manifest for the tissue and coverage tasks")
    sub.set_defaults(func=run_probe)

    sub = subparsers.add_parser(
        "preview-augment", parents=[common], help="write ECT and crop-and-resize views of one tile"
    )
    sub.add_argument("--tile", type=pathlib.Path, required=True, help=f"{PREVIEW_TILE_SIZE}px PPM tile")
    sub.add_argument("--n", type=int, default=4, help="views per method")
    sub.set_defaults(func=preview_augment)

    sub = subparsers.add_parser("report", parents=[common], help="combine reports and metrics of runs")
    sub.add_argument("runs", type=pathlib.Path, nargs="+", help="run directories")
    sub.add_argument("--plots", action="store_true", help="render PNG plots (needs the plots extra)")
    sub.set_defaults(func=report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    utils.configure_logging(logging.DEBUG if args.verbose else logging.INFO)
    if args.command == "probe" and args.checkpoint is None:
        args.checkpoint = args.out / CHECKPOINT_NAME
    try:
        args.func(args)
    except HistoSSLError as e:
        detail = " (missing input)" if isinstance(e, DataError) and e.missing_path else ""
        print(f"histo-ssl: {e.category} error{detail}: {e}", file=sys.stderr)
        return EXIT_CODES[e.category]
    except OSError as e:
        print(f"histo-ssl: io error: {e}", file=sys.stderr)
        return EXIT_CODES["io"]
    return 0


if __name__ == "__main__":
    sys.exit(main())
