"""
Vision transformer forward and backward passes.

Parameters are a flat ``{name: ndarray}`` dict. Token order inside the network
is ``[cls | registers | patches]``; the class token and the patches carry
learned positional embeddings, the registers carry none.
"""

import itertools
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import numpy.typing as npt

from histo_ssl.errors import DimensionError, ParameterError
from histo_ssl.model.config import EmbeddingMode, MlpActivation, ModelConfig
from histo_ssl.model.layers import (
    attention_backward,
    attention_forward,
    gelu_mlp_backward,
    gelu_mlp_forward,
    layer_norm_backward,
    layer_norm_forward,
    linear_backward,
    linear_forward,
    swiglu_backward,
    swiglu_forward,
)
from histo_ssl.tensor_kernel import (
    DEFAULT_DTYPE,
    Rng,
    bilinear_matrix,
    check_finite,
    truncated_normal,
)

logger = logging.getLogger(__name__)

Array = npt.NDArray
Params = Dict[str, Array]


@dataclass
class TokenOutput:
    """Final-norm token outputs split by role"""

    cls: Array  # B x D
    registers: Array  # B x R x D
    patches: Array  # B x N x D

    @property
    def n_patches(self) -> int:
        return self.patches.shape[1]


def init_params(cfg: ModelConfig, rng: Rng, dtype=DEFAULT_DTYPE) -> Params:
    """Truncated-normal (std 0.02) weights and tokens, zero biases, unit norms."""
    d, hidden = cfg.embed_dim, cfg.mlp_hidden
    rngs = (rng.fork(i) for i in itertools.count())

    def weight(*shape):
        return truncated_normal(next(rngs), shape, dtype=dtype)

    def zeros(*shape):
        return np.zeros(shape, dtype=dtype)

    def ones(*shape):
        return np.ones(shape, dtype=dtype)

    params: Params = {}
    if cfg.dual_patchnorm:
        params["patch.pre_norm.g"] = ones(cfg.patch_dim)
        params["patch.pre_norm.b"] = zeros(cfg.patch_dim)
    params["patch.w"] = weight(cfg.patch_dim, d)
    params["patch.b"] = zeros(d)
    if cfg.dual_patchnorm:
        params["patch.post_norm.g"] = ones(d)
        params["patch.post_norm.b"] = zeros(d)
    params["pos_embed"] = weight(1 + cfg.n_patches, d)
    params["cls_token"] = weight(d)
    if cfg.registers:
        params["reg_tokens"] = weight(cfg.registers, d)
    params["mask_token"] = zeros(d)

    for i in range(cfg.depth):
        p = f"blocks.{i}."
        params[p + "norm1.g"] = ones(d)
        params[p + "norm1.b"] = zeros(d)
        params[p + "attn.qkv.w"] = weight(d, 3 * d)
        params[p + "attn.qkv.b"] = zeros(3 * d)
        if cfg.qk_norm:
            params[p + "attn.q_norm.g"] = ones(cfg.head_dim)
            params[p + "attn.q_norm.b"] = zeros(cfg.head_dim)
            params[p + "attn.k_norm.g"] = ones(cfg.head_dim)
            params[p + "attn.k_norm.b"] = zeros(cfg.head_dim)
        params[p + "attn.proj.w"] = weight(d, d)
        params[p + "attn.proj.b"] = zeros(d)
        params[p + "norm2.g"] = ones(d)
        params[p + "norm2.b"] = zeros(d)
        if cfg.mlp_activation is MlpActivation.SWIGLU:
            params[p + "mlp.gate.w"] = weight(d, hidden)
            params[p + "mlp.gate.b"] = zeros(hidden)
            params[p + "mlp.value.w"] = weight(d, hidden)
            params[p + "mlp.value.b"] = zeros(hidden)
        else:
            params[p + "mlp.fc1.w"] = weight(d, hidden)
            params[p + "mlp.fc1.b"] = zeros(hidden)
        params[p + "mlp.fc2.w"] = weight(hidden, d)
        params[p + "mlp.fc2.b"] = zeros(d)
    params["norm.g"] = ones(d)
    params["norm.b"] = zeros(d)
    return params


def patchify(images: Array, patch_size: int) -> Array:
    """B x S x S x 3 images -> B x N x (p * p * 3) row-major patches."""
    b, h, w, c = images.shape
    if h % patch_size or w % patch_size:
        raise DimensionError(
            f"image size {h}x{w} is not divisible by patch size {patch_size}"
        )
    gh, gw = h // patch_size, w // patch_size
    x = images.reshape(b, gh, patch_size, gw, patch_size, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, gh * gw, patch_size * patch_size * c)


def _as_batch(images: Array) -> Array:
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[-1] != 3:
        raise DimensionError(f"expected B x S x S x 3 images, got {images.shape}")
    return images


def _patch_pos(params: Params, cfg: ModelConfig, grid: int) -> Tuple[Array, Optional[Array]]:
    """Patch positional embeddings for a ``grid`` x ``grid`` layout.

    A grid smaller or larger than the configured one resamples the learned
    grid with a fixed bilinear matrix R: pos' = R pos R^T per channel.
    """
    pos = params["pos_embed"][1:]
    if grid == cfg.grid:
        return pos, None
    resample = bilinear_matrix(cfg.grid, grid).astype(pos.dtype)
    table = pos.reshape(cfg.grid, cfg.grid, -1)
    out = np.einsum("ag,ghd,bh->abd", resample, table, resample)
    return out.reshape(grid * grid, -1), resample


def _patch_embed_forward(
    images: Array,
    cfg: ModelConfig,
    params: Params,
    mask: Optional[Array] = None,
    resample_pos: bool = False,
) -> Tuple[Array, dict]:
    images = _as_batch(images)
    side = images.shape[1]
    if images.shape[2] != side:
        raise DimensionError(f"images must be square, got {images.shape[1:3]}")
    if side != cfg.image_size and not resample_pos:
        raise DimensionError(
            f"image size {side} does not match the configured {cfg.image_size}"
        )
    patches = patchify(images.astype(params["patch.w"].dtype, copy=False), cfg.patch_size)
    grid = side // cfg.patch_size
    cache: dict = {"grid": grid}

    x = patches
    if cfg.dual_patchnorm:
        x, cache["pre_norm"] = layer_norm_forward(
            x, params["patch.pre_norm.g"], params["patch.pre_norm.b"]
        )
    x, cache["proj"] = linear_forward(x, params["patch.w"], params["patch.b"])
    if cfg.dual_patchnorm:
        x, cache["post_norm"] = layer_norm_forward(
            x, params["patch.post_norm.g"], params["patch.post_norm.b"]
        )
    if mask is not None:
        mask = np.asarray(mask, dtype=bool).reshape(x.shape[0], -1)
        if mask.shape[1] != x.shape[1]:
            raise DimensionError(f"mask has {mask.shape[1]} entries for {x.shape[1]} patches")
        x = np.where(mask[..., None], params["mask_token"], x)
        cache["mask"] = mask
    pos, resample = _patch_pos(params, cfg, grid)
    cache["resample"] = resample
    return x + pos, cache


def patch_embed(images: Array, cfg: ModelConfig, params: Params) -> Array:
    """Patchify, project (between layer norms when DPN is on) and add
    positional embeddings. Returns B x N x D patch tokens."""
    tokens, _ = _patch_embed_forward(images, cfg, params)
    return tokens


def _patch_embed_backward(
    dtokens: Array, cache: dict, cfg: ModelConfig, grads: Params
) -> None:
    grid = cache["grid"]
    dpos = dtokens.sum(axis=0)
    if cache["resample"] is not None:
        resample = cache["resample"]
        dtable = np.einsum(
            "ag,abd,bh->ghd", resample, dpos.reshape(grid, grid, -1), resample
        )
        dpos = dtable.reshape(cfg.n_patches, -1)
    grads["pos_embed"][1:] += dpos

    dx = dtokens
    if "mask" in cache:
        mask = cache["mask"]
        grads["mask_token"] += dx[mask].sum(axis=0)
        dx = np.where(mask[..., None], 0.0, dx).astype(dtokens.dtype, copy=False)
    if cfg.dual_patchnorm:
        dx, grads["patch.post_norm.g"], grads["patch.post_norm.b"] = layer_norm_backward(
            dx, cache["post_norm"]
        )
    dx, grads["patch.w"], grads["patch.b"] = linear_backward(dx, cache["proj"])
    if cfg.dual_patchnorm:
        _, grads["patch.pre_norm.g"], grads["patch.pre_norm.b"] = layer_norm_backward(
            dx, cache["pre_norm"]
        )


def _split_heads(x: Array, heads: int) -> Array:
    b, t, three_d = x.shape
    d = three_d // 3
    return x.reshape(b, t, 3, heads, d // heads).transpose(2, 0, 3, 1, 4)


def _drop_path_scale(rng: Optional[Rng], rate: float, batch: int, dtype) -> Optional[Array]:
    if rng is None or rate <= 0.0:
        return None
    keep = rng.random(batch) >= rate
    return (keep / (1.0 - rate)).astype(dtype)[:, None, None]


def attention_block_forward(
    x: Array,
    cfg: ModelConfig,
    params: Params,
    index: int,
    drop_rng: Optional[Rng] = None,
) -> Tuple[Array, dict]:
    p = f"blocks.{index}."
    b, t, d = x.shape
    cache: dict = {}

    h1, cache["norm1"] = layer_norm_forward(x, params[p + "norm1.g"], params[p + "norm1.b"])
    qkv, cache["qkv"] = linear_forward(h1, params[p + "attn.qkv.w"], params[p + "attn.qkv.b"])
    q, k, v = _split_heads(qkv, cfg.heads)
    if cfg.qk_norm:
        q, cache["q_norm"] = layer_norm_forward(
            q, params[p + "attn.q_norm.g"], params[p + "attn.q_norm.b"]
        )
        k, cache["k_norm"] = layer_norm_forward(
            k, params[p + "attn.k_norm.g"], params[p + "attn.k_norm.b"]
        )
    o, cache["attn"] = attention_forward(q, k, v)
    o = o.transpose(0, 2, 1, 3).reshape(b, t, d)
    a, cache["proj"] = linear_forward(o, params[p + "attn.proj.w"], params[p + "attn.proj.b"])

    rate = cfg.drop_path_rate
    scale1 = _drop_path_scale(drop_rng and drop_rng.fork(0), rate, b, x.dtype)
    scale2 = _drop_path_scale(drop_rng and drop_rng.fork(1), rate, b, x.dtype)
    cache["scale1"], cache["scale2"] = scale1, scale2
    x2 = x + (a if scale1 is None else a * scale1)

    h2, cache["norm2"] = layer_norm_forward(x2, params[p + "norm2.g"], params[p + "norm2.b"])
    if cfg.mlp_activation is MlpActivation.SWIGLU:
        f, cache["mlp"] = swiglu_forward(h2, params, p + "mlp.")
    else:
        f, cache["mlp"] = gelu_mlp_forward(h2, params, p + "mlp.")
    out = x2 + (f if scale2 is None else f * scale2)
    return out, cache


def attention_block(tokens: Array, cfg: ModelConfig, params: Params, index: int = 0) -> Array:
    """One pre-norm transformer block (attention then MLP, both residual)."""
    out, _ = attention_block_forward(tokens, cfg, params, index)
    return out


def attention_block_backward(
    dout: Array, cache: dict, cfg: ModelConfig, index: int, grads: Params
) -> Array:
    p = f"blocks.{index}."
    b, t, d = dout.shape

    dx2 = dout
    df = dout if cache["scale2"] is None else dout * cache["scale2"]
    if cfg.mlp_activation is MlpActivation.SWIGLU:
        dh2 = swiglu_backward(df, cache["mlp"], p + "mlp.", grads)
    else:
        dh2 = gelu_mlp_backward(df, cache["mlp"], p + "mlp.", grads)
    dx, grads[p + "norm2.g"], grads[p + "norm2.b"] = layer_norm_backward(dh2, cache["norm2"])
    dx2 = dx2 + dx

    da = dx2 if cache["scale1"] is None else dx2 * cache["scale1"]
    do, grads[p + "attn.proj.w"], grads[p + "attn.proj.b"] = linear_backward(da, cache["proj"])
    do = do.reshape(b, t, cfg.heads, cfg.head_dim).transpose(0, 2, 1, 3)
    dq, dk, dv = attention_backward(do, cache["attn"])
    if cfg.qk_norm:
        dq, grads[p + "attn.q_norm.g"], grads[p + "attn.q_norm.b"] = layer_norm_backward(
            dq, cache["q_norm"]
        )
        dk, grads[p + "attn.k_norm.g"], grads[p + "attn.k_norm.b"] = layer_norm_backward(
            dk, cache["k_norm"]
        )
    dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(b, t, 3 * d)
    dh1, grads[p + "attn.qkv.w"], grads[p + "attn.qkv.b"] = linear_backward(dqkv, cache["qkv"])
    dx, grads[p + "norm1.g"], grads[p + "norm1.b"] = layer_norm_backward(dh1, cache["norm1"])
    return dx2 + dx


def forward_with_cache(
    images: Array,
    cfg: ModelConfig,
    params: Params,
    mask: Optional[Array] = None,
    drop_rng: Optional[Rng] = None,
    resample_pos: bool = False,
    step: Optional[int] = None,
) -> Tuple[TokenOutput, dict]:
    """Forward pass keeping everything ``backward`` needs.

    ``mask`` (B x N booleans) swaps masked patch embeddings for the mask token;
    ``drop_rng`` turns on stochastic depth; ``resample_pos`` allows images of a
    different size than the configured one (local views).
    """
    patches, embed_cache = _patch_embed_forward(images, cfg, params, mask, resample_pos)
    b, n, d = patches.shape
    cls = np.broadcast_to(params["cls_token"] + params["pos_embed"][0], (b, 1, d))
    parts = [cls]
    if cfg.registers:
        parts.append(np.broadcast_to(params["reg_tokens"], (b, cfg.registers, d)))
    parts.append(patches)
    x = np.concatenate(parts, axis=1)

    block_caches: List[dict] = []
    for i in range(cfg.depth):
        block_rng = drop_rng.fork(i) if drop_rng is not None else None
        x, block_cache = attention_block_forward(x, cfg, params, i, block_rng)
        check_finite(x, "block output", block=i, step=step)
        block_caches.append(block_cache)

    x, norm_cache = layer_norm_forward(x, params["norm.g"], params["norm.b"])
    r = cfg.registers
    out = TokenOutput(cls=x[:, 0], registers=x[:, 1 : 1 + r], patches=x[:, 1 + r :])
    cache = {"embed": embed_cache, "blocks": block_caches, "norm": norm_cache, "n": n}
    return out, cache


def forward(
    images: Array,
    cfg: ModelConfig,
    params: Params,
    mask: Optional[Array] = None,
    resample_pos: bool = False,
) -> TokenOutput:
    """Inference forward pass (no stochastic depth)."""
    out, _ = forward_with_cache(images, cfg, params, mask=mask, resample_pos=resample_pos)
    return out


def backward(
    d_cls: Optional[Array],
    d_patches: Optional[Array],
    cache: dict,
    cfg: ModelConfig,
    params: Params,
) -> Params:
    """Gradients of every parameter given gradients on the output tokens.

    Register outputs never feed a loss, so their gradient is taken as zero.
    """
    grads: Params = {name: np.zeros_like(value) for name, value in params.items()}
    b = cache["blocks"][0]["norm1"][0].shape[0] if cache["blocks"] else 0
    n = cache["n"]
    r = cfg.registers
    d = cfg.embed_dim
    dtype = params["norm.g"].dtype

    dx = np.zeros((b, 1 + r + n, d), dtype=dtype)
    if d_cls is not None:
        dx[:, 0] = d_cls
    if d_patches is not None:
        dx[:, 1 + r :] = d_patches
    dx, grads["norm.g"], grads["norm.b"] = layer_norm_backward(dx, cache["norm"])

    for i in reversed(range(cfg.depth)):
        dx = attention_block_backward(dx, cache["blocks"][i], cfg, i, grads)

    grads["cls_token"] += dx[:, 0].sum(axis=0)
    grads["pos_embed"][0] += dx[:, 0].sum(axis=0)
    if r:
        grads["reg_tokens"] += dx[:, 1 : 1 + r].sum(axis=0)
    _patch_embed_backward(dx[:, 1 + r :], cache["embed"], cfg, grads)
    return {name: g.astype(params[name].dtype, copy=False) for name, g in grads.items()}


def extract_embedding(out: TokenOutput, mode: EmbeddingMode | str) -> Array:
    """Tile embedding from token outputs; registers are never included.

    ``cls_only`` gives the class token, ``cls_mean`` concatenates the class
    token with the mean patch token. ``patch_max`` and ``patch_mean`` pool the
    patch tokens alone.
    """
    mode = EmbeddingMode(mode)
    if mode is EmbeddingMode.CLS_ONLY:
        return out.cls
    if mode is EmbeddingMode.CLS_MEAN:
        return np.concatenate([out.cls, out.patches.mean(axis=-2)], axis=-1)
    if mode is EmbeddingMode.PATCH_MAX:
        return out.patches.max(axis=-2)
    if mode is EmbeddingMode.PATCH_MEAN:
        return out.patches.mean(axis=-2)
    raise ParameterError(f"invalid embedding mode {mode}")
