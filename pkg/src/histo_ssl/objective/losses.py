"""
Self-distillation losses.

The teacher's prototype logits are sharpened by its temperature and balanced
with a few log-space Sinkhorn-Knopp iterations; the student is trained with
cross-entropy against those targets, on class tokens across views (DINO) and
on masked patch tokens (iBOT).
"""

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
import numpy.typing as npt
from scipy.special import logsumexp

from histo_ssl.errors import DimensionError, NumericError, ParameterError
from histo_ssl.tensor_kernel import Rng, log_softmax_rows, softmax_rows

Array = npt.NDArray

DEFAULT_SINKHORN_ITERATIONS = 3
DEFAULT_MASK_RATIO = 0.3
MIN_BLOCK_PATCHES = 4
MAX_BLOCK_ATTEMPTS = 10


@dataclass
class LossParts:
    """One step's loss breakdown"""

    l_dino: float
    l_ibot: float
    l_reg: float
    total: float
    n: int
    weight: float = 0.05
    tau_s: float = 0.1
    tau_t: float = 0.04
    kappa: float = 5.0
    epsilon: float = 1e-8

    def as_dict(self) -> dict:
        return {
            "l_dino": self.l_dino,
            "l_ibot": self.l_ibot,
            "l_reg": self.l_reg,
            "total": self.total,
        }


def sinkhorn_center(
    teacher_logits: Array, iters: int = DEFAULT_SINKHORN_ITERATIONS
) -> Array:
    """Balanced teacher targets from (already temperature-scaled) logits.

    Each iteration rescales prototype columns to mass n/K and then rows to
    mass one, in log space. Rows therefore sum to one exactly; column sums
    approach n/K as iterations increase.
    """
    if iters < 1:
        raise ParameterError(f"sinkhorn needs at least one iteration, got {iters}")
    logits = np.asarray(teacher_logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite teacher logits", tensor="teacher_logits")
    n, k = logits.shape
    log_q = logits - logsumexp(logits)
    log_col_target = math.log(n / k)
    for _ in range(iters):
        log_q = log_q - logsumexp(log_q, axis=0, keepdims=True) + log_col_target
        log_q = log_q - logsumexp(log_q, axis=1, keepdims=True)
    q = np.exp(log_q)
    return (q / q.sum(axis=1, keepdims=True)).astype(teacher_logits.dtype, copy=False)


def teacher_targets(
    teacher_logits: Array, tau_t: float, centering: bool = True, iters: int = 3
) -> Array:
    """Sharpen at tau_t, then Sinkhorn-center (or plain softmax when off)."""
    if not tau_t > 0:
        raise ParameterError(f"teacher temperature must be positive, got {tau_t}")
    if centering:
        return sinkhorn_center(teacher_logits / tau_t, iters)
    return softmax_rows(teacher_logits, tau_t)


def dino_loss(
    student_logits: Sequence[Array],
    teacher_probs: Sequence[Array],
    tau_s: float,
) -> Tuple[float, List[Array]]:
    """Mean cross-entropy over (teacher global view g, student view v != g).

    Student views are ordered globals first, so teacher view g and student
    view g see the same crop. Returns the loss and the gradient for every
    student view's logits.
    """
    if not tau_s > 0:
        raise ParameterError(f"student temperature must be positive, got {tau_s}")
    n_global = len(teacher_probs)
    n_views = len(student_logits)
    if n_views < n_global:
        raise DimensionError(
            f"{n_views} student views cannot cover {n_global} teacher views"
        )
    pairs = [(g, v) for g in range(n_global) for v in range(n_views) if v != g]
    if not pairs:
        return 0.0, [np.zeros_like(s) for s in student_logits]
    batch = student_logits[0].shape[0]
    scale = 1.0 / (len(pairs) * batch)

    log_probs = [log_softmax_rows(s.astype(np.float64), tau_s) for s in student_logits]
    loss = 0.0
    grads = []
    for v in range(n_views):
        teachers = [teacher_probs[g].astype(np.float64) for g in range(n_global) if g != v]
        for t in teachers:
            loss -= float(np.sum(t * log_probs[v]))
        if teachers:
            grad = (len(teachers) * np.exp(log_probs[v]) - sum(teachers)) / tau_s
        else:
            grad = np.zeros_like(log_probs[v])
        grads.append((grad * scale).astype(student_logits[v].dtype, copy=False))
    return loss * scale, grads


def ibot_loss(
    student_patch_logits: Array,
    teacher_patch_probs: Array,
    mask: Array,
    tau_s: float,
) -> Tuple[float, Array]:
    """Cross-entropy at masked patch positions, averaged over masked tokens.

    Arrays share leading axes (..., N, K) / mask (..., N). An empty mask gives
    zero loss and zero gradient.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != student_patch_logits.shape[:-1]:
        raise DimensionError(
            f"mask shape {mask.shape} does not match logits {student_patch_logits.shape}"
        )
    grad = np.zeros_like(student_patch_logits)
    count = int(mask.sum())
    if count == 0:
        return 0.0, grad
    s = student_patch_logits[mask].astype(np.float64)
    t = teacher_patch_probs[mask].astype(np.float64)
    log_p = log_softmax_rows(s, tau_s)
    loss = -float(np.sum(t * log_p)) / count
    grad[mask] = ((np.exp(log_p) - t) / (tau_s * count)).astype(grad.dtype, copy=False)
    return loss, grad


def mask_count(n_patches: int, ratio: float) -> int:
    """round(ratio * n) with halves rounded up."""
    return int(math.floor(ratio * n_patches + 0.5))


def block_mask(grid: int, ratio: float, rng: Rng) -> npt.NDArray[np.bool_]:
    """Block-wise random mask over a grid x grid patch layout with exactly
    round(ratio * grid**2) masked patches."""
    if not 0.0 <= ratio <= 1.0:
        raise ParameterError(f"mask ratio must be in [0, 1], got {ratio}")
    n = grid * grid
    target = mask_count(n, ratio)
    mask = np.zeros((grid, grid), dtype=bool)
    log_aspect = (math.log(0.3), math.log(1 / 0.3))

    for _ in range(MAX_BLOCK_ATTEMPTS * max(1, target)):
        remaining = target - int(mask.sum())
        if remaining < MIN_BLOCK_PATCHES:
            break
        area = rng.uniform(MIN_BLOCK_PATCHES, remaining + 1e-9)
        aspect = math.exp(rng.uniform(*log_aspect))
        h = int(round(math.sqrt(area * aspect)))
        w = int(round(math.sqrt(area / aspect)))
        if not (1 <= h <= grid and 1 <= w <= grid):
            continue
        top = int(rng.integers(0, grid - h + 1))
        left = int(rng.integers(0, grid - w + 1))
        block = mask[top : top + h, left : left + w]
        if int((~block).sum()) > remaining:
            continue
        block[:] = True

    flat = mask.reshape(-1)
    missing = target - int(flat.sum())
    if missing > 0:
        free = np.flatnonzero(~flat)
        flat[rng.choice(free, size=missing, replace=False)] = True
    return mask


def total_loss(
    l_dino: float,
    l_ibot: float,
    l_reg: float,
    weight: float,
    n: int,
    **temperatures,
) -> LossParts:
    """total = l_dino + l_ibot + weight * l_reg"""
    total = l_dino + l_ibot + weight * l_reg
    parts = LossParts(
        l_dino=float(l_dino),
        l_ibot=float(l_ibot),
        l_reg=float(l_reg),
        total=float(total),
        n=n,
        weight=weight,
        **temperatures,
    )
    if not all(math.isfinite(v) for v in parts.as_dict().values()):
        raise NumericError("non-finite loss", components=parts.as_dict())
    return parts
