"""
Entropy estimators on the unit hypersphere used as diversity regularizers.

``kde_entropy`` is the resubstitution estimate from a von Mises-Fisher kernel
density; including the self-comparison keeps its gradient bounded by 2 kappa.
``koleo_entropy`` is the nearest-neighbour (Kozachenko-Leonenko) estimate,
whose gradient grows like 1 / distance for near-duplicate samples.

Both return (H, dH/dZ) with the gradient projected onto the tangent space of
each input row, which equals the gradient through an upstream L2
normalization evaluated at unit inputs.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, Tuple

import numpy as np
import numpy.typing as npt
from scipy.special import logsumexp, softmax

from histo_ssl.errors import ConfigError, ContractError, ParameterError
from histo_ssl.tensor_kernel import matmul

Array = npt.NDArray
UNIT_TOLERANCE = 1e-6


class RegularizerKind(Enum):
    KOLEO = "koleo"
    KDE = "kde"
    NONE = "none"


@dataclass
class RegularizerConfig:
    """Entropy regularizer: kind, vMF concentration, KoLeo floor and weight"""

    kind: RegularizerKind = RegularizerKind.KDE
    kappa: float = 5.0
    epsilon: float = 1e-8
    weight: float = 0.05
    kernel: str = "vmf"

    def __post_init__(self):
        if isinstance(self.kind, str):
            self.kind = RegularizerKind(self.kind.lower())
        if self.kappa <= 0:
            raise ConfigError(f"vMF concentration must be positive, got {self.kappa}")
        if self.epsilon <= 0:
            raise ConfigError(f"KoLeo epsilon must be positive, got {self.epsilon}")
        if self.weight < 0:
            raise ConfigError(f"regularizer weight must be >= 0, got {self.weight}")
        if self.kernel not in KERNELS:
            raise ConfigError(
                f"unknown kernel {self.kernel}, available: {sorted(KERNELS)}"
            )


def _check_unit(z: Array, name: str) -> None:
    norms = np.linalg.norm(z, axis=-1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOLERANCE):
        worst = float(np.max(np.abs(norms - 1.0)))
        raise ContractError(f"{name} must be unit vectors (max |norm - 1| = {worst:.3g})")


def tangent_project(z: Array, grad: Array) -> Array:
    """Remove the radial component of each row of ``grad``."""
    return grad - np.sum(grad * z, axis=-1, keepdims=True) * z


def vmf_kernel(x: Array, y: Array, kappa: float) -> float:
    """Unnormalized von Mises-Fisher kernel exp(kappa x.y) on unit vectors."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_unit(x[None], "vmf_kernel inputs")
    _check_unit(y[None], "vmf_kernel inputs")
    return float(np.exp(kappa * np.dot(x, y)))


def _vmf_log_gram(z: Array, kappa: float) -> Array:
    """log k(z_i, z_j) for the vMF kernel."""
    return kappa * matmul(z, z.T)


# Log-kernel Gram builders; the gradient code below assumes log k is
# kappa * <z_i, z_j>, so only the vMF kernel is registered.
KERNELS: Dict[str, Callable[[Array, float], Array]] = {"vmf": _vmf_log_gram}


def kde_entropy(z: Array, kappa: float) -> Tuple[float, Array]:
    """H = -(1/n) sum_i log sum_j exp(kappa z_i.z_j), self-term included."""
    z = np.asarray(z)
    n = z.shape[0]
    if n < 1:
        raise ParameterError("kde_entropy needs at least one sample")
    if kappa <= 0:
        raise ParameterError(f"vMF concentration must be positive, got {kappa}")
    _check_unit(z, "kde_entropy inputs")
    z64 = z.astype(np.float64)
    log_gram = KERNELS["vmf"](z64, kappa)
    h = -float(np.mean(logsumexp(log_gram, axis=1)))
    weights = softmax(log_gram, axis=1)
    grad = -(kappa / n) * ((weights + weights.T) @ z64)
    return h, tangent_project(z64, grad).astype(z.dtype, copy=False)


def koleo_entropy(z: Array, epsilon: float = 1e-8) -> Tuple[float, Array]:
    """H = (1/n) sum_i log max(||z_i - z_nn(i)||, epsilon), nearest neighbour
    excluding i itself."""
    z = np.asarray(z)
    n = z.shape[0]
    if n < 2:
        raise ParameterError(f"koleo_entropy needs at least 2 samples, got {n}")
    _check_unit(z, "koleo_entropy inputs")
    z64 = z.astype(np.float64)
    sq = np.sum(z64 * z64, axis=1)
    dist2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (z64 @ z64.T), 0.0)
    np.fill_diagonal(dist2, np.inf)
    nearest = np.argmin(dist2, axis=1)
    diff = z64 - z64[nearest]
    dist = np.linalg.norm(diff, axis=1)
    floored = dist < epsilon
    h = float(np.mean(np.log(np.where(floored, epsilon, dist))))

    coeff = np.where(floored, 0.0, 1.0 / (n * np.maximum(dist, epsilon) ** 2))
    pull = coeff[:, None] * diff
    grad = pull.copy()
    np.subtract.at(grad, nearest, pull)
    return h, tangent_project(z64, grad).astype(z.dtype, copy=False)


def regularizer_loss(z: Array, cfg: RegularizerConfig) -> Tuple[float, Array]:
    """Loss -H (minimizing it maximizes entropy) and its gradient."""
    if cfg.kind is RegularizerKind.NONE:
        return 0.0, np.zeros_like(z)
    if cfg.kind is RegularizerKind.KDE:
        h, grad = kde_entropy(z, cfg.kappa)
    else:
        h, grad = koleo_entropy(z, cfg.epsilon)
    return -h, -grad
