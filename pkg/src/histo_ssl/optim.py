"""
AdamW / StableAdamW updates, schedules, gradient clipping and EMA.

Parameters and gradients are flat ``{name: ndarray}`` dicts. Optimizer moments
live in one ``OptState`` per tensor; ``Optimizer.step`` walks the dict in
sorted name order so updates are reproducible.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Tuple

import numpy as np
import numpy.typing as npt

from histo_ssl.errors import ConfigError, DimensionError, ParameterError
from histo_ssl.tensor_kernel import check_finite

logger = logging.getLogger(__name__)

Array = npt.NDArray
REFERENCE_BATCH = 1024


class OptimRule(Enum):
    ADAMW = "adamw"
    STABLE_ADAMW = "stable_adamw"


@dataclass
class OptimConfig:
    rule: OptimRule = OptimRule.ADAMW
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    base_lr: float = 2e-4
    weight_decay_range: Tuple[float, float] = (0.04, 0.2)
    grad_clip_norm: float = 3.0
    batch_size: int = 1024
    warmup_frac: float = 0.1

    def __post_init__(self):
        if isinstance(self.rule, str):
            self.rule = OptimRule(self.rule.lower())
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ConfigError(f"{name} must be in (0, 1), got {value}")
        if self.base_lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.base_lr}")
        if self.eps <= 0:
            raise ConfigError(f"optimizer epsilon must be positive, got {self.eps}")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError(f"warmup fraction must be in [0, 1), got {self.warmup_frac}")


@dataclass
class OptState:
    """Moments of one parameter tensor"""

    m: Array
    v: Array
    t: int = 0

    @classmethod
    def zeros_like(cls, param: Array) -> "OptState":
        return cls(m=np.zeros_like(param), v=np.zeros_like(param), t=0)


def _moments(grad: Array, state: OptState, cfg: OptimConfig) -> Tuple[Array, OptState]:
    t = state.t + 1
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad * grad
    m_hat = m / (1.0 - cfg.beta1**t)
    v_hat = v / (1.0 - cfg.beta2**t)
    update = m_hat / (np.sqrt(v_hat) + cfg.eps)
    return update, OptState(m=m, v=v, t=t)


def _apply(param: Array, update: Array, lr: float, wd: float) -> Array:
    return (param - lr * (update + wd * param)).astype(param.dtype, copy=False)


def adamw_step(
    param: Array,
    grad: Array,
    state: OptState,
    lr: float,
    wd: float,
    cfg: OptimConfig,
    name: str = "param",
) -> Tuple[Array, OptState]:
    """Bias-corrected AdamW with decoupled weight decay."""
    check_finite(grad, f"gradient of {name}")
    update, state = _moments(grad, state, cfg)
    return _apply(param, update, lr, wd), state


def update_rms(update: Array) -> float:
    return float(np.sqrt(np.mean(np.square(update, dtype=np.float64))))


def stable_adamw_step(
    param: Array,
    grad: Array,
    state: OptState,
    lr: float,
    wd: float,
    cfg: OptimConfig,
    name: str = "param",
) -> Tuple[Array, OptState]:
    """AdamW whose learning rate is divided by max(1, RMS(update)) per tensor."""
    check_finite(grad, f"gradient of {name}")
    update, state = _moments(grad, state, cfg)
    rms = update_rms(update)
    if rms > 1.0:
        lr = lr / rms
    return _apply(param, update, lr, wd), state


def no_weight_decay(name: str) -> bool:
    """Biases and normalization parameters are not decayed."""
    return name.endswith(".b") or "norm" in name


class Optimizer:
    """Steps a whole parameter dict with one rule and shared hyperparameters."""

    def __init__(self, params: Dict[str, Array], cfg: OptimConfig):
        self.cfg = cfg
        self.state: Dict[str, OptState] = {
            name: OptState.zeros_like(value) for name, value in params.items()
        }
        self._step_fn = (
            stable_adamw_step if cfg.rule is OptimRule.STABLE_ADAMW else adamw_step
        )

    def step(
        self, params: Dict[str, Array], grads: Dict[str, Array], lr: float, wd: float
    ) -> Dict[str, Array]:
        updated = dict(params)
        for name in sorted(grads):
            decay = 0.0 if no_weight_decay(name) else wd
            updated[name], self.state[name] = self._step_fn(
                params[name], grads[name], self.state[name], lr, decay, self.cfg, name
            )
        return updated

    def state_tensors(self) -> Dict[str, Array]:
        """Moments as checkpoint tensors (``opt.m.<name>``, ``opt.v.<name>``)."""
        tensors = {}
        for name, state in self.state.items():
            tensors[f"opt.m.{name}"] = state.m
            tensors[f"opt.v.{name}"] = state.v
        return tensors

    def load_state_tensors(self, tensors: Dict[str, Array], t: int) -> None:
        for name in self.state:
            m, v = tensors.get(f"opt.m.{name}"), tensors.get(f"opt.v.{name}")
            if m is None or v is None:
                continue
            self.state[name] = OptState(m=m.copy(), v=v.copy(), t=t)


def cosine_schedule(t: float, T: float, peak: float, end: float, warmup_steps: float = 0) -> float:
    """Linear warmup 0 -> peak, then half-cosine peak -> end; clamps to end past T."""
    if t < 0:
        raise ParameterError(f"schedule step must be >= 0, got {t}")
    if t >= T:
        return end
    if t < warmup_steps:
        return peak * t / warmup_steps
    progress = (t - warmup_steps) / (T - warmup_steps)
    return end + 0.5 * (peak - end) * (1.0 + math.cos(math.pi * progress))


def lr_scale(base_lr: float, batch: int) -> float:
    """Square-root scaling against a reference batch of 1024."""
    if batch < 1:
        raise ParameterError(f"batch size must be >= 1, got {batch}")
    return base_lr * math.sqrt(batch / REFERENCE_BATCH)


def global_norm(grads: Dict[str, Array]) -> float:
    return math.sqrt(
        math.fsum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())
    )


def clip_grad_norm(
    grads: Dict[str, Array], max_norm: float = 3.0
) -> Tuple[Dict[str, Array], float]:
    """Scale all gradients by max_norm / norm when the global L2 norm exceeds
    max_norm. Returns the clipped gradients and the pre-clip norm."""
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {name: (g * scale).astype(g.dtype, copy=False) for name, g in grads.items()}, norm


def ema_update(
    teacher: Dict[str, Array], student: Dict[str, Array], m: float
) -> Dict[str, Array]:
    """teacher <- m * teacher + (1 - m) * student, per tensor."""
    if not 0.0 <= m <= 1.0:
        raise ParameterError(f"EMA momentum must be in [0, 1], got {m}")
    updated = {}
    for name, value in teacher.items():
        if name not in student:
            raise DimensionError(f"student has no tensor {name}")
        if student[name].shape != value.shape:
            raise DimensionError(
                f"EMA shape mismatch for {name}: {value.shape} vs {student[name].shape}"
            )
        updated[name] = (m * value + (1.0 - m) * student[name]).astype(value.dtype)
    return updated


@dataclass
class EmaSchedule:
    """Cosine momentum from start to end over ``horizon`` steps"""

    start: float = 0.994
    end: float = 1.0
    horizon: int = 1

    def __post_init__(self):
        if not (0.0 <= self.start <= 1.0 and 0.0 <= self.end <= 1.0):
            raise ConfigError(f"EMA momenta must be in [0, 1], got {self.start}, {self.end}")

    def __call__(self, t: int) -> float:
        return cosine_schedule(t, self.horizon, self.start, self.end)
