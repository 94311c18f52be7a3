"""Projection heads: MLP to a bottleneck, L2 normalization, then a
weight-normalized prototype layer (unit-norm prototype columns, no bias)."""

import itertools
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np
import numpy.typing as npt

from histo_ssl.errors import ConfigError
from histo_ssl.model.layers import gelu, gelu_grad, linear_backward, linear_forward
from histo_ssl.tensor_kernel import DEFAULT_DTYPE, Rng, matmul, truncated_normal

Array = npt.NDArray
NORM_EPS = 1e-12


@dataclass
class HeadConfig:
    layers: int = 3
    bottleneck_dim: int = 384
    hidden_dim: int = 2048
    prototypes: int = 1024
    shared_heads: bool = False

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError(f"head needs at least one layer, got {self.layers}")
        if self.prototypes < 2:
            raise ConfigError(f"need at least 2 prototypes, got {self.prototypes}")


def init_head(in_dim: int, cfg: HeadConfig, rng: Rng, dtype=DEFAULT_DTYPE) -> Dict[str, Array]:
    rngs = (rng.fork(i) for i in itertools.count())
    dims = [in_dim] + [cfg.hidden_dim] * (cfg.layers - 1) + [cfg.bottleneck_dim]
    params = {}
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        params[f"mlp.{i}.w"] = truncated_normal(next(rngs), (d_in, d_out), dtype=dtype)
        params[f"mlp.{i}.b"] = np.zeros(d_out, dtype=dtype)
    params["prototypes.v"] = truncated_normal(
        next(rngs), (cfg.bottleneck_dim, cfg.prototypes), dtype=dtype
    )
    return params


def head_forward(x: Array, params: Dict[str, Array], cfg: HeadConfig) -> Tuple[Array, dict]:
    """x (..., D) -> prototype logits (..., K)."""
    caches = []
    h = x
    for i in range(cfg.layers):
        h, linear_cache = linear_forward(h, params[f"mlp.{i}.w"], params[f"mlp.{i}.b"])
        pre = h
        if i < cfg.layers - 1:
            h = gelu(h)
        caches.append((linear_cache, pre))
    norm = np.maximum(np.linalg.norm(h, axis=-1, keepdims=True), NORM_EPS)
    z = h / norm
    v = params["prototypes.v"]
    v_norm = np.linalg.norm(v, axis=0, keepdims=True)
    w = v / v_norm
    logits = matmul(z, w)
    return logits, {"mlp": caches, "z": z, "norm": norm, "w": w, "v_norm": v_norm}


def head_backward(
    dlogits: Array, cache: dict, params: Dict[str, Array], cfg: HeadConfig
) -> Tuple[Array, Dict[str, Array]]:
    """Returns (d input, parameter gradients)."""
    grads = {}
    z, w = cache["z"], cache["w"]
    flat_z = z.reshape(-1, z.shape[-1])
    flat_d = dlogits.reshape(-1, dlogits.shape[-1])
    dw = matmul(flat_z.T, flat_d)
    grads["prototypes.v"] = (
        (dw - w * np.sum(dw * w, axis=0, keepdims=True)) / cache["v_norm"]
    ).astype(w.dtype, copy=False)

    dz = matmul(dlogits, w.T)
    dh = (dz - z * np.sum(dz * z, axis=-1, keepdims=True)) / cache["norm"]
    for i in reversed(range(cfg.layers)):
        linear_cache, pre = cache["mlp"][i]
        if i < cfg.layers - 1:
            dh = dh * gelu_grad(pre)
        dh, grads[f"mlp.{i}.w"], grads[f"mlp.{i}.b"] = linear_backward(dh, linear_cache)
    return dh, grads
