"""
Layer primitives with hand-written backward passes.

Each ``*_forward`` returns its output and a cache tuple; the matching
``*_backward`` takes the upstream gradient and the cache and returns gradients
for the inputs and parameters. Leading axes are treated as batch axes.
"""

import math
from typing import Optional, Tuple

import numpy as np
import numpy.typing as npt
from scipy.special import erf, expit

from histo_ssl.tensor_kernel import LAYER_NORM_EPS, matmul, normalize, softmax_rows

Array = npt.NDArray


def _flatten(x: Array) -> Array:
    return x.reshape(-1, x.shape[-1])


def linear_forward(x: Array, w: Array, b: Optional[Array] = None) -> Tuple[Array, tuple]:
    y = matmul(x, w)
    if b is not None:
        y = y + b
    return y, (x, w)


def linear_backward(
    dy: Array, cache: tuple
) -> Tuple[Array, Array, Array]:
    """Returns (dx, dw, db)."""
    x, w = cache
    dx = matmul(dy, w.T)
    dw = matmul(_flatten(x).T, _flatten(dy))
    db = _flatten(dy).sum(axis=0)
    return dx, dw.astype(w.dtype, copy=False), db.astype(w.dtype, copy=False)


def layer_norm_forward(
    x: Array, gain: Array, bias: Array, eps: float = LAYER_NORM_EPS
) -> Tuple[Array, tuple]:
    x_hat, inv_std = normalize(x, eps)
    return x_hat * gain + bias, (x_hat, inv_std, gain)


def layer_norm_backward(dy: Array, cache: tuple) -> Tuple[Array, Array, Array]:
    """Returns (dx, dgain, dbias)."""
    x_hat, inv_std, gain = cache
    dgain = _flatten(dy * x_hat).sum(axis=0)
    dbias = _flatten(dy).sum(axis=0)
    dx_hat = dy * gain
    dx = inv_std * (
        dx_hat
        - dx_hat.mean(axis=-1, keepdims=True)
        - x_hat * (dx_hat * x_hat).mean(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Array) -> Array:
    """Exact (erf) GELU."""
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_grad(x: Array) -> Array:
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def silu(x: Array) -> Array:
    return x * expit(x)


def silu_grad(x: Array) -> Array:
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


def gelu_mlp_forward(x: Array, params: dict, prefix: str) -> Tuple[Array, tuple]:
    z, fc1 = linear_forward(x, params[f"{prefix}fc1.w"], params[f"{prefix}fc1.b"])
    h = gelu(z)
    y, fc2 = linear_forward(h, params[f"{prefix}fc2.w"], params[f"{prefix}fc2.b"])
    return y, (z, fc1, fc2)


def gelu_mlp_backward(dy: Array, cache: tuple, prefix: str, grads: dict) -> Array:
    z, fc1, fc2 = cache
    dh, grads[f"{prefix}fc2.w"], grads[f"{prefix}fc2.b"] = linear_backward(dy, fc2)
    dz = dh * gelu_grad(z)
    dx, grads[f"{prefix}fc1.w"], grads[f"{prefix}fc1.b"] = linear_backward(dz, fc1)
    return dx


def swiglu_forward(x: Array, params: dict, prefix: str) -> Tuple[Array, tuple]:
    """silu(x W_gate) * (x W_value), then the output projection."""
    gate, gate_cache = linear_forward(
        x, params[f"{prefix}gate.w"], params[f"{prefix}gate.b"]
    )
    value, value_cache = linear_forward(
        x, params[f"{prefix}value.w"], params[f"{prefix}value.b"]
    )
    hidden = silu(gate) * value
    y, fc2 = linear_forward(hidden, params[f"{prefix}fc2.w"], params[f"{prefix}fc2.b"])
    return y, (gate, value, gate_cache, value_cache, fc2)


def swiglu_backward(dy: Array, cache: tuple, prefix: str, grads: dict) -> Array:
    gate, value, gate_cache, value_cache, fc2 = cache
    dhidden, grads[f"{prefix}fc2.w"], grads[f"{prefix}fc2.b"] = linear_backward(dy, fc2)
    dvalue = dhidden * silu(gate)
    dgate = dhidden * value * silu_grad(gate)
    dx_gate, grads[f"{prefix}gate.w"], grads[f"{prefix}gate.b"] = linear_backward(
        dgate, gate_cache
    )
    dx_value, grads[f"{prefix}value.w"], grads[f"{prefix}value.b"] = linear_backward(
        dvalue, value_cache
    )
    return dx_gate + dx_value


def attention_forward(
    q: Array, k: Array, v: Array
) -> Tuple[Array, tuple]:
    """Scaled dot-product attention over (..., T, d_head) inputs."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = matmul(q, np.swapaxes(k, -1, -2)) * scale
    probs = softmax_rows(scores)
    out = matmul(probs, v)
    return out, (q, k, v, probs, scale)


def attention_backward(dout: Array, cache: tuple) -> Tuple[Array, Array, Array]:
    q, k, v, probs, scale = cache
    dv = matmul(np.swapaxes(probs, -1, -2), dout)
    dprobs = matmul(dout, np.swapaxes(v, -1, -2))
    dscores = probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True))
    dscores = dscores * scale
    dq = matmul(dscores, k)
    dk = matmul(np.swapaxes(dscores, -1, -2), q)
    return dq, dk, dv
