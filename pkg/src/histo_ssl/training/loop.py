"""
Student-teacher pretraining and distillation.

One step: draw a balanced batch of tiles, build the multi-crop views, run the
teacher on the global views (no masking, no stochastic depth), run the student
on every view (block masks on the global views, stochastic depth when
configured), combine the DINO, iBOT and entropy-regularizer losses, clip,
take an optimizer step and move the EMA weights.

Parameters live in flat dicts with ``backbone.``, ``dino_head.`` and
``ibot_head.`` prefixes; checkpoints add ``student.`` and ``ema.`` in front.
All randomness of step t comes from forks of ``Rng(seed).fork(t)``-style
streams, so a run resumed from a checkpoint replays the same steps.
"""

import dataclasses
import logging
import math
import pathlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import numpy.typing as npt

from histo_ssl.augment.views import ViewSet, batch_views, make_views
from histo_ssl.dataset_types import Manifest
from histo_ssl.errors import ConfigError, DataError, NumericError, ParameterError
from histo_ssl.model.checkpoint import Checkpoint, save_checkpoint
from histo_ssl.model.config import EmbeddingMode, ModelConfig
from histo_ssl.model.vit import (
    backward,
    extract_embedding,
    forward,
    forward_with_cache,
    init_params,
)
from histo_ssl.objective.entropy import RegularizerKind, regularizer_loss
from histo_ssl.objective.heads import HeadConfig, head_backward, head_forward, init_head
from histo_ssl.objective.losses import (
    LossParts,
    block_mask,
    dino_loss,
    ibot_loss,
    teacher_targets,
    total_loss,
)
from histo_ssl.optim import (
    EmaSchedule,
    Optimizer,
    clip_grad_norm,
    cosine_schedule,
    ema_update,
)
from histo_ssl.tensor_kernel import Rng, bilinear_resize
from histo_ssl.tissue.raster_io import read_ppm
from histo_ssl.tissue.sampler import BalancedSampler, targets_for_manifest
from histo_ssl.training.config import TeacherTempMode, TrainConfig, build_train_config
from histo_ssl.training.metrics import (
    METRICS_NAME,
    RunMetrics,
    SpikeDetector,
    effective_rank,
)

logger = logging.getLogger(__name__)

Array = npt.NDArray
Params = Dict[str, Array]

BACKBONE = "backbone."
DINO_HEAD = "dino_head."
IBOT_HEAD = "ibot_head."
STUDENT = "student."
EMA = "ema."
CHECKPOINT_NAME = "checkpoint.pssl"

ABLATION_ARMS = {
    "baseline": {},
    "+ECT": {"method": "ect"},
    "+KDE": {"regularizer": "kde", "regularizer_weight": 0.05},
    "+ECT,+KDE": {"method": "ect", "regularizer": "kde", "regularizer_weight": 0.05},
    "+ECT,+KDE,-SOL": {
        "method": "ect",
        "regularizer": "kde",
        "regularizer_weight": 0.05,
        "solarization": False,
    },
}
ABLATION_BASELINE = {
    "method": "crop_resize",
    "regularizer": "koleo",
    "regularizer_weight": 0.1,
    "solarization": True,
}


def ablation_overrides(arm: str) -> Dict[str, object]:
    """Config overrides for one arm of the augmentation/regularizer ablation."""
    if arm not in ABLATION_ARMS:
        raise ConfigError(f"unknown ablation arm {arm}, available: {list(ABLATION_ARMS)}")
    return {**ABLATION_BASELINE, **ABLATION_ARMS[arm]}


def teacher_temp(
    t: int,
    mode: TeacherTempMode | str,
    warmup_steps: int = 12_000,
    start: float = 0.04,
    final: float = 0.07,
) -> float:
    """``warmup``: linear start -> final over warmup_steps, then hold.
    ``constant``: start at every step."""
    if t < 0:
        raise ParameterError(f"step must be >= 0, got {t}")
    mode = TeacherTempMode(mode)
    if mode is TeacherTempMode.CONSTANT:
        return start
    if warmup_steps <= 0 or t >= warmup_steps:
        return final
    return start + (final - start) * t / warmup_steps


def _subset(params: Params, prefix: str) -> Params:
    return {name[len(prefix) :]: value for name, value in params.items() if name.startswith(prefix)}


def _prefixed(prefix: str, params: Params) -> Params:
    return {prefix + name: value for name, value in params.items()}


def init_student(model: ModelConfig, head: HeadConfig, rng: Rng) -> Params:
    params = _prefixed(BACKBONE, init_params(model, rng.fork(0)))
    params.update(_prefixed(DINO_HEAD, init_head(model.embed_dim, head, rng.fork(1))))
    if not head.shared_heads:
        params.update(_prefixed(IBOT_HEAD, init_head(model.embed_dim, head, rng.fork(2))))
    return params


def _ibot_prefix(head: HeadConfig) -> str:
    return DINO_HEAD if head.shared_heads else IBOT_HEAD


class TileStore:
    """Manifest tiles resized to the view source size, loaded on first use."""

    def __init__(self, manifest: Manifest, source_size: int):
        self.manifest = manifest
        self.source_size = source_size
        self._cache: Dict[int, npt.NDArray[np.uint8]] = {}

    def __getitem__(self, index: int) -> npt.NDArray[np.uint8]:
        if index not in self._cache:
            raster = read_ppm(self.manifest.resolve(self.manifest.records[index]))
            if raster.shape[0] != self.source_size:
                raster = bilinear_resize(raster, self.source_size, self.source_size)
            self._cache[index] = raster
        return self._cache[index]


@dataclass
class FrozenTeacher:
    """A fixed teacher network used for distillation"""

    params: Params
    model: ModelConfig
    head: HeadConfig


@dataclass
class TrainResult:
    tensors: Params
    metrics: RunMetrics
    checkpoint_path: Optional[pathlib.Path] = None
    loss_history: List[LossParts] = field(default_factory=list, repr=False)

    def backbone(self) -> Params:
        """Backbone weights of the evaluation model (the EMA network)."""
        return _subset(self.tensors, EMA + BACKBONE)


def _teacher_outputs(
    params: Params,
    model: ModelConfig,
    head: HeadConfig,
    cfg: TrainConfig,
    globals_: Array,
    masks: List[Array],
    tau_t: float,
) -> Tuple[List[Array], List[Array], Array]:
    """Teacher DINO targets per global view, iBOT targets at the masked
    positions of each global view, and the first view's class tokens."""
    backbone = _subset(params, BACKBONE)
    dino_head = _subset(params, DINO_HEAD)
    ibot_head = _subset(params, _ibot_prefix(head))
    dino_probs, ibot_probs = [], []
    first_cls = None
    for g, images in enumerate(globals_):
        out = forward(images, model, backbone, resample_pos=images.shape[1] != model.image_size)
        logits, _ = head_forward(out.cls, dino_head, head)
        dino_probs.append(
            teacher_targets(logits, tau_t, cfg.sinkhorn_centering, cfg.sinkhorn_iterations)
        )
        masked = out.patches[masks[g]]
        if masked.shape[0]:
            patch_logits, _ = head_forward(masked, ibot_head, head)
            ibot_probs.append(
                teacher_targets(
                    patch_logits, tau_t, cfg.sinkhorn_centering, cfg.sinkhorn_iterations
                )
            )
        else:
            ibot_probs.append(np.zeros((0, head.prototypes), dtype=logits.dtype))
        if first_cls is None:
            first_cls = out.cls
    return dino_probs, ibot_probs, first_cls


def _regularizer_terms(
    cls_tokens: List[Array], cfg: TrainConfig
) -> Tuple[float, List[Array]]:
    """Mean regularizer loss over the global views and the gradient it puts on
    each view's (unnormalized) class tokens, before weighting."""
    if cfg.regularizer.kind is RegularizerKind.NONE:
        return 0.0, [np.zeros_like(c) for c in cls_tokens]
    n_views = len(cls_tokens)
    loss = 0.0
    grads = []
    for cls in cls_tokens:
        c64 = cls.astype(np.float64)
        norm = np.maximum(np.linalg.norm(c64, axis=-1, keepdims=True), 1e-12)
        value, dz = regularizer_loss(c64 / norm, cfg.regularizer)
        loss += value / n_views
        grads.append((dz / norm / n_views).astype(cls.dtype))
    return loss, grads


def ssl_step(
    student: Params,
    teacher: Params,
    teacher_model: ModelConfig,
    teacher_head: HeadConfig,
    cfg: TrainConfig,
    globals_: Array,
    locals_: Array,
    rng: Rng,
    tau_t: float,
    step: int = 0,
) -> Tuple[LossParts, Params, Array]:
    """Losses and student gradients for one batch of views.

    Returns the loss breakdown, gradients keyed like ``student`` and the
    teacher's class tokens on the first global view.
    """
    model, head = cfg.model, cfg.head
    batch = globals_.shape[1]
    n_global = globals_.shape[0]
    grid = model.grid

    mask_rng = rng.fork(1)
    masks = []
    for g in range(n_global):
        view_rng = mask_rng.fork(g)
        masks.append(
            np.stack(
                [block_mask(grid, cfg.mask_ratio, view_rng.fork(i)).reshape(-1) for i in range(batch)]
            )
        )

    dino_probs, ibot_probs, teacher_cls = _teacher_outputs(
        teacher, teacher_model, teacher_head, cfg, globals_, masks, tau_t
    )

    backbone = _subset(student, BACKBONE)
    dino_head = _subset(student, DINO_HEAD)
    ibot_prefix = _ibot_prefix(head)
    ibot_head = _subset(student, ibot_prefix)
    drop_rng = rng.fork(2) if model.drop_path_rate > 0 else None

    views = list(globals_) + list(locals_)
    caches, head_caches, logits_all, cls_globals = [], [], [], []
    ibot_logits, ibot_caches = [], []
    for v, images in enumerate(views):
        is_global = v < n_global
        out, cache = forward_with_cache(
            images,
            model,
            backbone,
            mask=masks[v] if is_global else None,
            drop_rng=drop_rng.fork(v) if drop_rng is not None else None,
            resample_pos=not is_global,
            step=step,
        )
        logits, head_cache = head_forward(out.cls, dino_head, head)
        caches.append(cache)
        head_caches.append(head_cache)
        logits_all.append(logits)
        if is_global:
            cls_globals.append(out.cls)
            patch_logits, patch_cache = head_forward(out.patches[masks[v]], ibot_head, head)
            ibot_logits.append(patch_logits)
            ibot_caches.append(patch_cache)

    l_dino, dino_grads = dino_loss(logits_all, dino_probs, cfg.student_temperature)

    sizes = [p.shape[0] for p in ibot_logits]
    student_patches = np.concatenate(ibot_logits, axis=0)
    teacher_patches = np.concatenate(ibot_probs, axis=0)
    l_ibot, ibot_grad = ibot_loss(
        student_patches,
        teacher_patches,
        np.ones(student_patches.shape[0], dtype=bool),
        cfg.student_temperature,
    )
    ibot_grads = np.split(ibot_grad, np.cumsum(sizes)[:-1])

    l_reg, reg_grads = _regularizer_terms(cls_globals, cfg)
    weight = cfg.regularizer.weight
    parts = total_loss(
        l_dino,
        l_ibot,
        l_reg,
        weight,
        batch,
        tau_s=cfg.student_temperature,
        tau_t=tau_t,
        kappa=cfg.regularizer.kappa,
        epsilon=cfg.regularizer.epsilon,
    )

    grads: Params = {name: np.zeros_like(value) for name, value in student.items()}

    def accumulate(prefix: str, part: Params) -> None:
        for name, value in part.items():
            grads[prefix + name] += value

    for v in range(len(views)):
        d_cls, head_grads = head_backward(dino_grads[v], head_caches[v], dino_head, head)
        accumulate(DINO_HEAD, head_grads)
        d_patches = None
        if v < n_global:
            d_cls = d_cls + weight * reg_grads[v]
            if sizes[v]:
                d_masked, patch_head_grads = head_backward(
                    ibot_grads[v], ibot_caches[v], ibot_head, head
                )
                accumulate(ibot_prefix, patch_head_grads)
                d_patches = np.zeros((batch, model.n_patches, model.embed_dim), dtype=d_cls.dtype)
                d_patches[masks[v]] = d_masked
        accumulate(BACKBONE, backward(d_cls, d_patches, caches[v], model, backbone))
    return parts, grads, teacher_cls


class Trainer:
    """Owns the student, the EMA network, the optimizer and the metrics.

    With ``teacher`` set, the fixed teacher produces the targets (distillation)
    and the EMA network is the student's EMA copy; otherwise the EMA network
    is the teacher.
    """

    def __init__(
        self,
        cfg: TrainConfig,
        manifest: Manifest,
        teacher: Optional[FrozenTeacher] = None,
        student_model: Optional[ModelConfig] = None,
    ):
        if len(manifest) == 0:
            raise DataError("cannot train on an empty manifest")
        self.cfg = cfg
        self.model = student_model or cfg.model
        if student_model is not None:
            self.cfg = _with_model(cfg, student_model)
        self.teacher = teacher
        if teacher is not None:
            _check_distillation(teacher, self.cfg)
        root = Rng(cfg.seed)
        self.sampler = BalancedSampler(manifest, targets_for_manifest(manifest), root.fork(0))
        self.tiles = TileStore(manifest, cfg.views.source_size)
        self.student = init_student(self.model, cfg.head, root.fork(1))
        self.ema = {name: value.copy() for name, value in self.student.items()}
        self.optimizer = Optimizer(self.student, cfg.optim)
        total = max(self.cfg.steps, 1)
        if teacher is not None:
            momentum = self.cfg.student_ema_copy_momentum
            self.ema_schedule = EmaSchedule(momentum, momentum, horizon=total)
        else:
            self.ema_schedule = EmaSchedule(*self.cfg.teacher_momentum, horizon=total)
        self.step_rng = root.fork(2)
        self.metrics = RunMetrics()
        self.spikes = SpikeDetector()
        self.losses: List[LossParts] = []
        self.step_index = 0
        self.eff_rank = math.nan

    def schedules(self, t: int) -> Dict[str, float]:
        cfg = self.cfg
        total = max(cfg.steps, 1)
        tau = cfg.teacher_temperature
        return {
            "lr": cosine_schedule(t, total, cfg.peak_lr, 0.0, cfg.warmup_steps),
            "wd": cosine_schedule(t, total, *cfg.optim.weight_decay_range),
            "ema_m": self.ema_schedule(t),
            "tau_t": teacher_temp(t, tau.mode, cfg.teacher_warmup_steps, tau.start, tau.final),
        }

    def _batch(self, t: int, rng: Rng) -> Tuple[Array, Array]:
        indices = self.sampler.fork(t).sample(self.cfg.batch_size)
        view_rng = rng.fork(0)
        view_sets: List[ViewSet] = [
            make_views(
                self.tiles[int(index)],
                self.cfg.photometric,
                self.cfg.views,
                view_rng.fork(i),
                self.cfg.method,
            )
            for i, index in enumerate(indices)
        ]
        return batch_views(view_sets)

    def step(self) -> Dict[str, float]:
        t = self.step_index
        rng = self.step_rng.fork(t)
        sched = self.schedules(t)
        globals_, locals_ = self._batch(t, rng)

        if self.teacher is not None:
            teacher_params, teacher_model, teacher_head = (
                self.teacher.params,
                self.teacher.model,
                self.teacher.head,
            )
        else:
            teacher_params, teacher_model, teacher_head = self.ema, self.model, self.cfg.head

        try:
            parts, grads, teacher_cls = ssl_step(
                self.student,
                teacher_params,
                teacher_model,
                teacher_head,
                self.cfg,
                globals_,
                locals_,
                rng,
                sched["tau_t"],
                step=t,
            )
        except NumericError as e:
            logger.error(f"Non-finite values at step {t}: {e}")
            if e.step is None:
                raise NumericError(
                    "training aborted",
                    step=t,
                    block=e.block,
                    tensor=e.tensor,
                    components=e.components,
                ) from e
            raise

        grads, grad_norm = clip_grad_norm(grads, self.cfg.optim.grad_clip_norm)
        self.student = self.optimizer.step(self.student, grads, sched["lr"], sched["wd"])
        self.ema = ema_update(self.ema, self.student, sched["ema_m"])

        if t % self.cfg.rank_every == 0:
            self.eff_rank = effective_rank(teacher_cls)
        spike = self.spikes.update(parts.total)
        if spike:
            logger.warning(f"Loss spike at step {t}: total={parts.total:.4f}")
        row = {
            "step": t,
            "l_dino": parts.l_dino,
            "l_ibot": parts.l_ibot,
            "l_reg": parts.l_reg,
            "total": parts.total,
            "grad_norm": grad_norm,
            "eff_rank": self.eff_rank,
            "tau_t": sched["tau_t"],
            "lr": sched["lr"],
            "ema_m": sched["ema_m"],
            "spike": int(spike),
        }
        self.metrics.append(row)
        self.losses.append(parts)
        if t % self.cfg.log_every == 0:
            logger.info(
                f"step {t}/{self.cfg.steps} total={parts.total:.4f} dino={parts.l_dino:.4f} "
                f"ibot={parts.l_ibot:.4f} reg={parts.l_reg:.4f} grad_norm={grad_norm:.3f} "
                f"eff_rank={self.eff_rank:.2f} lr={sched['lr']:.2e}"
            )
        self.step_index += 1
        return row

    def tensors(self) -> Params:
        tensors = _prefixed(STUDENT, self.student)
        tensors.update(_prefixed(EMA, self.ema))
        tensors.update(self.optimizer.state_tensors())
        return tensors

    def save(self, path: pathlib.Path) -> None:
        """Write the checkpoint, and the metrics so far next to it."""
        meta = {
            "step": self.step_index,
            "mode": "distill" if self.teacher is not None else "train",
            "seed": self.cfg.seed,
        }
        save_checkpoint(path, self.tensors(), config=self.cfg.values, meta=meta)
        self.metrics.write_tsv(path.parent / METRICS_NAME)

    def restore(self, checkpoint: Checkpoint, metrics: Optional[RunMetrics] = None) -> None:
        """Continue from a checkpoint written by ``save``.

        ``metrics`` is the table written next to that checkpoint. Its rows
        before the checkpoint step are kept, their totals refill the spike
        detector and the last logged effective rank carries over, so the
        resumed metrics match an uninterrupted run.
        """
        student = checkpoint.subset(STUDENT)
        if set(student) != set(self.student):
            raise DataError("checkpoint tensors do not match the configured model")
        self.student = student
        self.ema = checkpoint.subset(EMA)
        self.step_index = int(checkpoint.meta.get("step", 0))
        self.optimizer.load_state_tensors(checkpoint.tensors, self.step_index)
        if metrics is None:
            return
        self.metrics = RunMetrics()
        for row in metrics.rows:
            if row["step"] < self.step_index:
                self.metrics.append(row)
        if len(self.metrics) != self.step_index:
            logger.warning(
                f"Metrics hold {len(self.metrics)} of the {self.step_index} steps before "
                "the checkpoint; spike detection resumes on a shorter history"
            )
        self.spikes.replay(self.metrics.column("total"))
        if len(self.metrics):
            self.eff_rank = float(self.metrics.rows[-1]["eff_rank"])

    def run(self, out_dir: Optional[pathlib.Path] = None) -> TrainResult:
        checkpoint_path = out_dir / CHECKPOINT_NAME if out_dir is not None else None
        logger.info(
            f"Training {self.cfg.steps} steps of batch {self.cfg.batch_size} "
            f"({self.cfg.preset} preset, seed {self.cfg.seed})"
        )
        while self.step_index < self.cfg.steps:
            self.step()
            every = self.cfg.checkpoint_every
            if checkpoint_path is not None and every and self.step_index % every == 0:
                self.save(checkpoint_path)
        if out_dir is not None:
            self.save(checkpoint_path)
        return TrainResult(
            tensors=self.tensors(),
            metrics=self.metrics,
            checkpoint_path=checkpoint_path,
            loss_history=self.losses,
        )


def _with_model(cfg: TrainConfig, model: ModelConfig) -> TrainConfig:
    """The run config with its backbone swapped for ``model``."""
    values = dict(cfg.values)
    values.update(
        {
            "patch_size": model.patch_size,
            "embedding_dimension": model.embed_dim,
            "layers": model.depth,
            "heads": model.heads,
            "mlp_ratio": model.mlp_ratio,
            "mlp_activation": model.mlp_activation.value,
            "registers": model.registers,
            "qk_normalization": model.qk_norm,
            "dual_patchnorm": model.dual_patchnorm,
            "drop_rate": model.drop_path_rate,
        }
    )
    return dataclasses.replace(cfg, model=model, values=values)


def _check_distillation(teacher: FrozenTeacher, cfg: TrainConfig) -> None:
    if teacher.model.patch_size != cfg.model.patch_size:
        raise ConfigError(
            f"teacher patch size {teacher.model.patch_size} does not match "
            f"student patch size {cfg.model.patch_size}"
        )
    if teacher.head.prototypes != cfg.head.prototypes:
        raise ConfigError(
            f"teacher has {teacher.head.prototypes} prototypes, "
            f"student is configured with {cfg.head.prototypes}"
        )


def train(
    cfg: TrainConfig,
    manifest: Manifest,
    seed: Optional[int] = None,
    out_dir: Optional[pathlib.Path] = None,
    resume: Optional[Checkpoint] = None,
    resume_metrics: Optional[RunMetrics] = None,
) -> TrainResult:
    """Self-supervised pretraining with an EMA teacher.

    ``resume`` continues from a checkpoint, ``resume_metrics`` from the metrics
    table written next to it.
    """
    if seed is not None and seed != cfg.seed:
        cfg = dataclasses.replace(cfg, seed=seed, values={**cfg.values, "seed": seed})
    trainer = Trainer(cfg, manifest)
    if resume is not None:
        trainer.restore(resume, resume_metrics)
    return trainer.run(out_dir)


def load_teacher(checkpoint: Checkpoint) -> FrozenTeacher:
    """The EMA network of a pretraining checkpoint as a frozen teacher."""
    if not checkpoint.config:
        raise DataError("checkpoint carries no configuration")
    teacher_cfg = build_train_config(checkpoint.config)
    params = checkpoint.subset(EMA)
    if not params:
        raise DataError("checkpoint has no EMA weights")
    return FrozenTeacher(params=params, model=teacher_cfg.model, head=teacher_cfg.head)


def distill(
    teacher_ckpt: Checkpoint,
    student_cfg: ModelConfig,
    manifest: Manifest,
    cfg: TrainConfig,
    out_dir: Optional[pathlib.Path] = None,
) -> TrainResult:
    """Train a fresh student against a frozen teacher (backbone and heads).

    The emitted model is the student's EMA copy (``ema.*`` tensors).
    """
    teacher = load_teacher(teacher_ckpt)
    trainer = Trainer(cfg, manifest, teacher=teacher, student_model=student_cfg)
    return trainer.run(out_dir)


def _center_crop(images: Array, size: int) -> Array:
    side = images.shape[1]
    if side <= size:
        return images
    offset = (side - size) // 2
    return images[:, offset : offset + size, offset : offset + size]


def embed_tiles(
    params: Params,
    model: ModelConfig,
    rasters: Array,
    mode: EmbeddingMode | str = EmbeddingMode.CLS_MEAN,
    source_size: Optional[int] = None,
    batch_size: int = 64,
) -> npt.NDArray[np.float32]:
    """Embeddings of non-augmented tiles.

    Tiles are resized to ``source_size`` (the training view source scale) and
    centre-cropped to the model's image size; smaller tiles are fed as they
    are with resampled positional embeddings.
    """
    rasters = np.asarray(rasters)
    if rasters.ndim != 4:
        raise ParameterError(f"expected n x S x S x 3 tiles, got {rasters.shape}")
    outputs = []
    for start in range(0, rasters.shape[0], batch_size):
        chunk = rasters[start : start + batch_size]
        if source_size is not None and chunk.shape[1] != source_size:
            chunk = np.stack([bilinear_resize(tile, source_size, source_size) for tile in chunk])
        chunk = _center_crop(chunk, model.image_size).astype(np.float32) / 255.0
        out = forward(chunk, model, params, resample_pos=chunk.shape[1] != model.image_size)
        outputs.append(extract_embedding(out, mode))
    return np.concatenate(outputs, axis=0).astype(np.float32)


def embed_token_outputs(
    params: Params, model: ModelConfig, rasters: Array, batch_size: int = 64
) -> Dict[str, Array]:
    """Class and patch token outputs per tile, for comparing aggregation modes."""
    cls, patches = [], []
    for start in range(0, rasters.shape[0], batch_size):
        chunk = _center_crop(rasters[start : start + batch_size], model.image_size)
        chunk = chunk.astype(np.float32) / 255.0
        out = forward(chunk, model, params, resample_pos=chunk.shape[1] != model.image_size)
        cls.append(out.cls)
        patches.append(out.patches)
    return {"cls": np.concatenate(cls), "patches": np.concatenate(patches)}
