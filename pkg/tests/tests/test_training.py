import dataclasses

import numpy as np
import pytest

from histo_ssl.dataset_types import SlideSpec
from histo_ssl.errors import ConfigError, DataError, NumericError
from histo_ssl.evaluation.metrics import accuracy
from histo_ssl.evaluation.probe import (
    ProbeConfig,
    linear_probe,
    make_splits,
    patch_aggregate_probe,
    split_indices,
)
from histo_ssl.model.checkpoint import load_checkpoint
from histo_ssl.model.config import ModelConfig
from histo_ssl.optim import EmaSchedule
from histo_ssl.tensor_kernel import Rng
from histo_ssl.tissue.manifest import build_manifest
from histo_ssl.tissue.raster_io import read_ppm
from histo_ssl.tissue.synthetic import gen_localized_feature_tiles, gen_synthetic_slides
from histo_ssl.training.config import load_train_config
from histo_ssl.training.loop import (
    CHECKPOINT_NAME,
    TileStore,
    Trainer,
    distill,
    embed_tiles,
    embed_token_outputs,
    init_student,
    train,
)
from histo_ssl.training.metrics import METRIC_COLUMNS, METRICS_NAME, RunMetrics

PROBE = ProbeConfig(iterations=500, batch_size=32, lr=0.1)

TINY = {
    "total_tiles": 6,
    "batch_size": 2,
    "layers": 1,
    "embedding_dimension": 16,
    "heads": 2,
    "registers": 1,
    "bottleneck_dimension": 8,
    "hidden_dimension": 16,
    "prototypes": 16,
    "local_crops": 2,
    "checkpoint_every": 0,
    "log_every": 1,
    "rank_every": 1,
}


def _tiny(**overrides):
    return load_train_config(overrides={**TINY, **overrides})


def test_init_student_prefixes(rng):
    cfg = _tiny()
    params = init_student(cfg.model, cfg.head, rng)
    prefixes = {name.split(".", 1)[0] for name in params}
    assert prefixes == {"backbone", "dino_head", "ibot_head"}
    shared = init_student(cfg.model, _tiny(shared_heads=True).head, rng)
    assert not any(name.startswith("ibot_head.") for name in shared)


def test_tiny_training_run(tmp_path, small_manifest):
    cfg = _tiny()
    result = train(cfg, small_manifest, out_dir=tmp_path)
    assert len(result.metrics) == cfg.steps == 3
    for column in METRIC_COLUMNS:
        assert np.all(np.isfinite(result.metrics.column(column))), column
    assert (tmp_path / CHECKPOINT_NAME).exists()
    assert (tmp_path / METRICS_NAME).exists()
    checkpoint = load_checkpoint(tmp_path / CHECKPOINT_NAME)
    assert checkpoint.meta["step"] == 3
    assert checkpoint.config["layers"] == 1
    student = init_student(cfg.model, cfg.head, Rng(0))
    assert set(result.backbone()) == {
        name[len("backbone.") :] for name in student if name.startswith("backbone.")
    }


def test_training_is_deterministic(small_manifest):
    cfg = _tiny(total_tiles=4)
    first = train(cfg, small_manifest)
    second = train(cfg, small_manifest)
    assert [p.total for p in first.loss_history] == [p.total for p in second.loss_history]
    for name, value in first.tensors.items():
        np.testing.assert_array_equal(value, second.tensors[name])


def test_seed_changes_the_run(small_manifest):
    cfg = _tiny(total_tiles=2)
    first = train(cfg, small_manifest, seed=1)
    second = train(cfg, small_manifest, seed=2)
    assert first.loss_history[0].total != second.loss_history[0].total


def test_resume_replays_the_same_steps(tmp_path, small_manifest):
    # rank_every=3 carries the step-0 rank across the interruption
    cfg = _tiny(total_tiles=8, rank_every=3)
    reference = Trainer(cfg, small_manifest)
    reference.run(tmp_path / "reference")

    interrupted = Trainer(cfg, small_manifest)
    interrupted.step()
    interrupted.step()
    interrupted.save(tmp_path / "resumed" / CHECKPOINT_NAME)

    resumed = Trainer(cfg, small_manifest)
    resumed.restore(
        load_checkpoint(tmp_path / "resumed" / CHECKPOINT_NAME),
        RunMetrics.read_tsv(tmp_path / "resumed" / METRICS_NAME),
    )
    assert resumed.step_index == 2
    assert list(resumed.spikes.history) == list(reference.metrics.column("total")[:2])
    result = resumed.run(tmp_path / "resumed")
    assert result.metrics.column("step").tolist() == [0, 1, 2, 3]
    for name, value in reference.student.items():
        np.testing.assert_array_equal(resumed.student[name], value)
    for name, value in reference.ema.items():
        np.testing.assert_array_equal(resumed.ema[name], value)
    expected = (tmp_path / "reference" / METRICS_NAME).read_text()
    assert (tmp_path / "resumed" / METRICS_NAME).read_text() == expected


def test_resume_without_metrics_starts_an_empty_table(tmp_path, small_manifest):
    cfg = _tiny(total_tiles=8)
    interrupted = Trainer(cfg, small_manifest)
    interrupted.step()
    interrupted.step()
    interrupted.save(tmp_path / CHECKPOINT_NAME)

    resumed = Trainer(cfg, small_manifest)
    resumed.restore(load_checkpoint(tmp_path / CHECKPOINT_NAME))
    assert resumed.run().metrics.column("step").tolist() == [2, 3]


def test_trainer_momentum_follows_the_ema_schedule(small_manifest):
    cfg = _tiny(total_tiles=8)
    trainer = Trainer(cfg, small_manifest)
    schedule = EmaSchedule(*cfg.teacher_momentum, horizon=cfg.steps)
    assert [trainer.schedules(t)["ema_m"] for t in range(cfg.steps)] == [
        schedule(t) for t in range(cfg.steps)
    ]
    assert trainer.schedules(0)["ema_m"] == cfg.teacher_momentum[0]


def test_restore_rejects_a_different_model(tmp_path, small_manifest):
    trainer = Trainer(_tiny(total_tiles=2), small_manifest)
    trainer.save(tmp_path / CHECKPOINT_NAME)
    other = Trainer(_tiny(total_tiles=2, layers=2), small_manifest)
    with pytest.raises(DataError):
        other.restore(load_checkpoint(tmp_path / CHECKPOINT_NAME))


def test_non_finite_loss_aborts_with_the_step(small_manifest):
    trainer = Trainer(_tiny(), small_manifest)
    trainer.student["dino_head.prototypes.v"][:] = np.nan
    with pytest.raises(NumericError, match="step=0"):
        trainer.step()


def test_regularizer_off_gives_zero_regularizer_loss(small_manifest):
    result = train(_tiny(total_tiles=2, regularizer="none"), small_manifest)
    assert result.metrics.column("l_reg").tolist() == [0.0]


def test_distill(tmp_path, small_manifest):
    cfg = _tiny(total_tiles=2)
    train(cfg, small_manifest, out_dir=tmp_path / "teacher")
    teacher = load_checkpoint(tmp_path / "teacher" / CHECKPOINT_NAME)
    student = ModelConfig(patch_size=8, embed_dim=8, depth=1, heads=2, registers=0, image_size=64)
    result = distill(teacher, student, small_manifest, cfg, out_dir=tmp_path / "student")
    assert len(result.metrics) == 1
    assert result.backbone()["pos_embed"].shape[-1] == 8
    checkpoint = load_checkpoint(tmp_path / "student" / CHECKPOINT_NAME)
    assert checkpoint.meta["mode"] == "distill"
    assert checkpoint.config["embedding_dimension"] == 8
    assert result.metrics.column("ema_m").tolist() == [cfg.student_ema_copy_momentum]


def test_distill_rejects_mismatched_prototypes(tmp_path, small_manifest):
    cfg = _tiny(total_tiles=2)
    train(cfg, small_manifest, out_dir=tmp_path)
    teacher = load_checkpoint(tmp_path / CHECKPOINT_NAME)
    with pytest.raises(ConfigError, match="prototypes"):
        distill(teacher, cfg.model, small_manifest, _tiny(total_tiles=2, prototypes=32))


def test_distill_rejects_mismatched_patch_size(tmp_path, small_manifest):
    cfg = _tiny(total_tiles=2)
    train(cfg, small_manifest, out_dir=tmp_path)
    teacher = load_checkpoint(tmp_path / CHECKPOINT_NAME)
    student = ModelConfig(patch_size=16, embed_dim=8, depth=1, heads=2, image_size=64)
    with pytest.raises(ConfigError, match="patch size"):
        distill(teacher, student, small_manifest, cfg)


def test_embed_tiles(small_manifest):
    cfg = _tiny(total_tiles=2)
    result = train(cfg, small_manifest)
    rasters = np.stack(
        [read_ppm(small_manifest.resolve(record)) for record in small_manifest.records[:3]]
    )
    embeddings = embed_tiles(result.backbone(), cfg.model, rasters, "cls_mean", source_size=112)
    assert embeddings.shape == (3, 32)
    assert embeddings.dtype == np.float32
    cls_only = embed_tiles(result.backbone(), cfg.model, rasters, "cls_only", source_size=112)
    np.testing.assert_array_equal(cls_only, embeddings[:, :16])


@pytest.mark.slow
def test_short_toy_run_stays_healthy(small_manifest):
    cfg = load_train_config(overrides={"total_tiles": 60 * 8, "batch_size": 8, "rank_every": 10})
    result = train(cfg, small_manifest)
    totals = result.metrics.column("total")
    assert np.all(np.isfinite(totals))
    after_warmup = result.metrics.column("spike")[cfg.warmup_steps :]
    assert after_warmup.sum() == 0
    ranks = result.metrics.column("eff_rank")
    assert ranks[-1] > 1.0


@pytest.mark.slow
@pytest.mark.acceptance
def test_entropy_regularizer_raises_effective_rank(small_manifest, probe_manifest):
    budget = {"total_tiles": 100 * 8, "batch_size": 8, "rank_every": 1}
    regularized, plain = [], []
    for seed in (0, 1, 2):
        with_reg = load_train_config(overrides={**budget, "regularizer_weight": 0.05})
        without = load_train_config(overrides={**budget, "regularizer": "none"})
        reg_run = train(with_reg, small_manifest, seed=seed)
        plain_run = train(without, small_manifest, seed=seed)
        regularized.append(np.mean(reg_run.metrics.column("eff_rank")[-10:]))
        plain.append(np.mean(plain_run.metrics.column("eff_rank")[-10:]))
        # test-split accuracy on the EMA teacher's frozen embeddings
        reg_acc = _tissue_accuracy(reg_run.backbone(), with_reg, probe_manifest, seed)
        plain_acc = _tissue_accuracy(plain_run.backbone(), without, probe_manifest, seed)
        assert reg_acc >= plain_acc, (seed, reg_acc, plain_acc)
    assert np.median(regularized) > np.median(plain)


@pytest.fixture(scope="module")
def probe_manifest(tmp_path_factory):
    """Eight 896px slides, enough tiles per texture class for a stable probe."""
    spec = SlideSpec(size=896, background_fraction=0.2, missing_40x_probability=0.0)
    slides = gen_synthetic_slides(list(range(8)), spec)
    return build_manifest(slides, tmp_path_factory.mktemp("probe_data"), L=224, min_coverage=0.3, seed=0)


def _tissue_accuracy(backbone, cfg, manifest, seed):
    store = TileStore(manifest, cfg.views.source_size)
    rasters = np.stack([store[i] for i in range(len(manifest))])
    vectors = embed_tiles(backbone, cfg.model, rasters, "cls_mean")
    labels = manifest.to_dataframe()["tissue"].to_numpy()
    splits = split_indices(len(labels), 0.2, 0.2, Rng(seed))
    train_set, val_set, test_set = make_splits(vectors, labels, splits)
    result = linear_probe(train_set, val_set, test_set, PROBE, Rng(seed))
    return accuracy(result.predictions, test_set.labels)


@pytest.mark.slow
@pytest.mark.acceptance
def test_toy_run_reaches_probe_accuracy(probe_manifest):
    cfg = load_train_config()
    first = train(cfg, probe_manifest)
    second = train(cfg, probe_manifest)
    assert first.metrics.to_dataframe().equals(second.metrics.to_dataframe())
    assert _tissue_accuracy(first.backbone(), cfg, probe_manifest, seed=0) >= 0.90


@pytest.mark.slow
@pytest.mark.acceptance
def test_distilled_student_beats_scratch_student(tmp_path, probe_manifest):
    budget = {"total_tiles": 100 * 8, "batch_size": 8}
    cfg = load_train_config(overrides=budget)
    student_model = dataclasses.replace(cfg.model, depth=2)
    scratch_cfg = load_train_config(overrides={**budget, "layers": 2})
    teacher_acc, distilled_acc, scratch_acc = [], [], []
    for seed in (0, 1, 2):
        out_dir = tmp_path / f"teacher_{seed}"
        teacher = train(cfg, probe_manifest, seed=seed, out_dir=out_dir)
        checkpoint = load_checkpoint(out_dir / CHECKPOINT_NAME)
        student = distill(checkpoint, student_model, probe_manifest, cfg)
        scratch = train(scratch_cfg, probe_manifest, seed=seed)
        teacher_acc.append(_tissue_accuracy(teacher.backbone(), cfg, probe_manifest, seed))
        distilled_acc.append(_tissue_accuracy(student.backbone(), scratch_cfg, probe_manifest, seed))
        scratch_acc.append(_tissue_accuracy(scratch.backbone(), scratch_cfg, probe_manifest, seed))
    assert np.median(distilled_acc) >= np.median(scratch_acc)
    assert np.median(teacher_acc) - np.median(distilled_acc) <= 0.05


@pytest.mark.slow
@pytest.mark.acceptance
def test_patch_max_beats_cls_only_on_localized_features(small_manifest):
    cfg = load_train_config(overrides={"total_tiles": 50 * 8, "batch_size": 8})
    patch_max, cls_only = [], []
    for seed in (0, 1, 2):
        result = train(cfg, small_manifest, seed=seed)
        tiles, labels = gen_localized_feature_tiles(400, cfg.model.image_size, Rng(seed))
        outputs = embed_token_outputs(result.backbone(), cfg.model, tiles)
        splits = split_indices(len(labels), 0.2, 0.2, Rng(seed))
        for mode, scores in (("patch_max", patch_max), ("cls_only", cls_only)):
            metrics, _ = patch_aggregate_probe(outputs, labels, mode, splits, PROBE, Rng(seed))
            scores.append(metrics.accuracy)
    assert np.median(patch_max) >= np.median(cls_only)
