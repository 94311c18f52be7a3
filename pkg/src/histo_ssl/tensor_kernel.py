"""
Dense numeric primitives the rest of the package is built on.

Arrays are numpy ``ndarray`` objects: float32 by default, float64 for gradient
checks. Reductions inside ``matmul`` always accumulate in float64.
"""

from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
import numpy.typing as npt

from histo_ssl.errors import DimensionError, NumericError, ParameterError

DEFAULT_DTYPE = np.float32
LAYER_NORM_EPS = 1e-6


def check_finite(x: npt.NDArray, name: str, **context) -> npt.NDArray:
    """Raise NumericError if ``x`` holds NaN or Inf."""
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {name}", tensor=name, **context)
    return x


def matmul(a: npt.NDArray, b: npt.NDArray) -> npt.NDArray:
    """Batched matrix product with float64 accumulation.

    Leading dimensions broadcast as in ``numpy.matmul``; the result keeps the
    floating dtype of the inputs.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >= 2-D inputs, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    out_dtype = np.result_type(a.dtype, b.dtype, np.float32)
    product = np.matmul(a.astype(np.float64, copy=False), b.astype(np.float64, copy=False))
    return product.astype(out_dtype, copy=False)


def softmax_rows(x: npt.NDArray, temp: float = 1.0) -> npt.NDArray:
    """Softmax over the last axis of ``x / temp`` using max-subtraction."""
    if not temp > 0:
        raise ParameterError(f"softmax temperature must be positive, got {temp}")
    z = x / temp
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax_rows(x: npt.NDArray, temp: float = 1.0) -> npt.NDArray:
    if not temp > 0:
        raise ParameterError(f"softmax temperature must be positive, got {temp}")
    z = x / temp
    z = z - np.max(z, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def normalize(x: npt.NDArray, eps: float = LAYER_NORM_EPS) -> tuple[npt.NDArray, npt.NDArray]:
    """Standardize the last axis. Returns (x_hat, inverse std)."""
    if x.shape[-1] < 2:
        raise ParameterError(f"layer norm needs at least 2 features, got {x.shape[-1]}")
    mean = np.mean(x, axis=-1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    return centered * inv_std, inv_std


def layer_norm(
    x: npt.NDArray,
    gain: Optional[npt.NDArray] = None,
    bias: Optional[npt.NDArray] = None,
    eps: float = LAYER_NORM_EPS,
) -> npt.NDArray:
    x_hat, _ = normalize(x, eps)
    if gain is not None:
        x_hat = x_hat * gain
    if bias is not None:
        x_hat = x_hat + bias
    return x_hat


@lru_cache(maxsize=64)
def _bilinear_matrix_cached(in_size: int, out_size: int) -> npt.NDArray:
    scale = in_size / out_size
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, in_size - 1)
    w1 = src - i0
    matrix = np.zeros((out_size, in_size), dtype=np.float64)
    rows = np.arange(out_size)
    np.add.at(matrix, (rows, i0), 1.0 - w1)
    np.add.at(matrix, (rows, i1), w1)
    matrix.setflags(write=False)
    return matrix


def bilinear_matrix(in_size: int, out_size: int) -> npt.NDArray:
    """Interpolation weights (out_size x in_size) for half-pixel-centre bilinear
    sampling with edge clamping. Rows sum to one."""
    if in_size < 1 or out_size < 1:
        raise ParameterError(f"resize sizes must be >= 1, got {in_size} -> {out_size}")
    return _bilinear_matrix_cached(int(in_size), int(out_size))


def bilinear_resize(img: npt.NDArray, out_h: int, out_w: int) -> npt.NDArray:
    """Resize an H x W x C raster.

    Integer rasters are rounded back to their dtype; float rasters keep full
    precision. Equal sizes return an exact copy.
    """
    if out_h < 1 or out_w < 1:
        raise ParameterError(f"resize target must be >= 1x1, got {out_h}x{out_w}")
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    rows = bilinear_matrix(h, out_h)
    cols = bilinear_matrix(w, out_w)
    resized = np.einsum("oh,hw...,pw->op...", rows, img.astype(np.float64), cols)
    if np.issubdtype(img.dtype, np.integer):
        info = np.iinfo(img.dtype)
        return np.clip(np.rint(resized), info.min, info.max).astype(img.dtype)
    return resized.astype(img.dtype, copy=False)


class Rng:
    """Counter-based random stream (numpy Philox).

    The stream is fully determined by ``(seed, stream)``; ``fork`` derives a
    child stream by hashing the parent key with the worker id through
    ``numpy.random.SeedSequence``, so forks do not depend on how many numbers
    the parent has drawn.
    """

    def __init__(self, seed: int, stream: Sequence[int] = ()):
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=self.stream)
        self.generator = np.random.Generator(np.random.Philox(sequence))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"

    def fork(self, worker_id: int) -> "Rng":
        if worker_id < 0:
            raise ParameterError(f"worker id must be >= 0, got {worker_id}")
        return Rng(self.seed, self.stream + (worker_id,))

    def uniform(self, lo: float = 0.0, hi: float = 1.0, size=None):
        if not lo < hi:
            raise ParameterError(f"uniform bounds need lo < hi, got [{lo}, {hi})")
        return self.generator.uniform(lo, hi, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def integers(self, low: int, high: Optional[int] = None, size=None):
        return self.generator.integers(low, high, size)

    def choice(self, a, size=None, replace: bool = True, p=None):
        return self.generator.choice(a, size=size, replace=replace, p=p)

    def permutation(self, x):
        return self.generator.permutation(x)

    def random(self, size=None):
        return self.generator.random(size)


def rng_uniform(rng: Rng, lo: float, hi: float) -> float:
    return float(rng.uniform(lo, hi))


def rng_fork(rng: Rng, worker_id: int) -> Rng:
    return rng.fork(worker_id)


def truncated_normal(
    rng: Rng, shape: Sequence[int], std: float = 0.02, dtype=DEFAULT_DTYPE
) -> npt.NDArray:
    """Normal samples truncated at two standard deviations (resampled)."""
    values = rng.normal(0.0, std, size=tuple(shape))
    outside = np.abs(values) > 2 * std
    while np.any(outside):
        values[outside] = rng.normal(0.0, std, size=int(outside.sum()))
        outside = np.abs(values) > 2 * std
    return values.astype(dtype)
