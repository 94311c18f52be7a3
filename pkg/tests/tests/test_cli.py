import numpy as np
import pandas as pd
import pytest

from histo_ssl.cli import RECTS_NAME, main
from histo_ssl.evaluation.report import COMPARISON_NAME, REPORT_NAME
from histo_ssl.tensor_kernel import Rng
from histo_ssl.tissue.manifest import MANIFEST_NAME
from histo_ssl.tissue.raster_io import write_ppm
from histo_ssl.training.config import SNAPSHOT_NAME, read_config_file
from histo_ssl.training.loop import CHECKPOINT_NAME
from histo_ssl.training.metrics import METRICS_NAME

TINY_RUN = [
    "total_tiles=4",
    "batch_size=2",
    "layers=1",
    "embedding_dimension=16",
    "heads=2",
    "registers=1",
    "bottleneck_dimension=8",
    "hidden_dimension=16",
    "prototypes=16",
    "local_crops=2",
    "checkpoint_every=0",
    "log_every=1",
    "rank_every=1",
    "probe_iterations=20",
    "probe_localized_tiles=40",
]


def _overrides(values):
    args = []
    for value in values:
        args += ["--override", value]
    return args


@pytest.fixture
def preview_tile(tmp_path):
    path = tmp_path / "tile.ppm"
    write_ppm(path, Rng(0).integers(0, 256, size=(392, 392, 3)).astype(np.uint8))
    return path


def test_gen_data_is_deterministic(tmp_path):
    small = _overrides(["n_slides=2", "slide_size=448", "min_coverage=0.1"])
    for name in ("first", "second"):
        assert main(["gen-data", "--seed", "7", "--out", str(tmp_path / name)] + small) == 0
    first = (tmp_path / "first" / MANIFEST_NAME).read_bytes()
    assert first == (tmp_path / "second" / MANIFEST_NAME).read_bytes()
    assert len(first.splitlines()) > 1
    assert read_config_file(tmp_path / "first" / SNAPSHOT_NAME)["seed"] == 7


def test_preview_augment_writes_views(tmp_path, preview_tile):
    out = tmp_path / "preview"
    assert main(["preview-augment", "--tile", str(preview_tile), "--n", "4", "--out", str(out)]) == 0
    assert len(list(out.glob("*.ppm"))) == 8
    rects = pd.read_csv(out / RECTS_NAME, sep="\t")
    assert len(rects) == 8
    assert sorted(rects["method"].unique()) == ["crop_resize", "ect"]
    assert (rects["x"] >= 0).all() and (rects["y"] >= 0).all()
    assert ((rects["x"] + rects["w"]) <= 392).all()
    assert ((rects["y"] + rects["h"]) <= 392).all()


def test_preview_augment_is_deterministic(tmp_path, preview_tile):
    for name in ("a", "b"):
        args = ["preview-augment", "--tile", str(preview_tile), "--n", "2", "--seed", "3"]
        assert main(args + ["--out", str(tmp_path / name)]) == 0
    for path in sorted((tmp_path / "a").iterdir()):
        assert path.read_bytes() == (tmp_path / "b" / path.name).read_bytes()


def test_preview_augment_rejects_wrong_tile_size(tmp_path, capsys):
    tile = tmp_path / "small.ppm"
    write_ppm(tile, np.zeros((224, 224, 3), dtype=np.uint8))
    assert main(["preview-augment", "--tile", str(tile), "--out", str(tmp_path / "out")]) == 2
    assert "config error" in capsys.readouterr().err


def test_unknown_override_exits_with_config_error(tmp_path, capsys):
    code = main(["gen-data", "--out", str(tmp_path), "--override", "no_such_key=1"])
    assert code == 2
    assert "no_such_key" in capsys.readouterr().err


def test_probe_without_checkpoint(tmp_path, capsys):
    assert main(["probe", "--out", str(tmp_path)]) == 4
    err = capsys.readouterr().err
    assert "data error" in err
    assert CHECKPOINT_NAME in err


def test_train_with_missing_manifest(tmp_path):
    assert main(["train", "--manifest", str(tmp_path / "nowhere"), "--out", str(tmp_path)]) == 4


def test_train_probe_and_report(tmp_path, small_manifest):
    run = tmp_path / "run"
    code = main(
        ["train", "--manifest", str(small_manifest.root), "--out", str(run)]
        + _overrides(TINY_RUN + ["regularizer=none"])
    )
    assert code == 0
    assert read_config_file(run / SNAPSHOT_NAME)["regularizer"] == "none"
    assert (run / CHECKPOINT_NAME).exists()
    metrics = pd.read_csv(run / METRICS_NAME, sep="\t")
    assert metrics["step"].tolist() == [0, 1]
    assert (metrics["l_reg"] == 0).all()

    assert main(["probe", "--out", str(run)] + _overrides(TINY_RUN)) == 0
    report = pd.read_csv(run / REPORT_NAME, sep="\t")
    assert sorted(report["config"].unique()) == ["cls_mean", "cls_only", "patch_max", "patch_mean"]
    comparisons = pd.read_csv(run / COMPARISON_NAME, sep="\t")
    localized = comparisons[comparisons["task"] == "localized"]
    assert list(zip(localized["model_a"], localized["model_b"])) == [
        ("cls_only", "cls_mean"),
        ("cls_mean", "patch_mean"),
        ("patch_mean", "patch_max"),
    ]

    combined = tmp_path / "combined"
    assert main(["report", str(run), "--out", str(combined)]) == 0
    assert (combined / "combined_report.tsv").exists()
    assert (combined / "combined_metrics.tsv").exists()


def test_train_resume_keeps_earlier_metrics(tmp_path, small_manifest):
    run = tmp_path / "run"
    base = ["train", "--manifest", str(small_manifest.root), "--out", str(run)]
    assert main(base + _overrides(TINY_RUN)) == 0
    resumed = base + ["--resume", str(run / CHECKPOINT_NAME)]
    assert main(resumed + _overrides(TINY_RUN + ["total_tiles=8"])) == 0
    metrics = pd.read_csv(run / METRICS_NAME, sep="\t")
    assert metrics["step"].tolist() == [0, 1, 2, 3]
