"""Shared transformer building blocks for the encoder and decoder.

Parameters live in a flat name->Tensor dict so the optimizer, checkpointing,
and layer-wise grouping can treat any model as a named tensor table.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def add_param(params: dict, name: str, array: np.ndarray) -> Tensor:
    t = Tensor(array, requires_grad=True)
    params[name] = t
    return t


def make_linear(params, prefix, fan_in, fan_out, rng, dtype, bias=True):
    add_param(params, prefix + ".w", xavier_uniform(rng, fan_in, fan_out, dtype))
    if bias:
        add_param(params, prefix + ".b", np.zeros(fan_out, dtype=dtype))


def linear(params, prefix, x: Tensor) -> Tensor:
    out = T.matmul(x, params[prefix + ".w"])
    b = params.get(prefix + ".b")
    return T.add(out, b) if b is not None else out


def make_norm(params, prefix, width, dtype):
    add_param(params, prefix + ".g", np.ones(width, dtype=dtype))
    add_param(params, prefix + ".b", np.zeros(width, dtype=dtype))


def norm(params, prefix, x: Tensor) -> Tensor:
    return T.layernorm(x, params[prefix + ".g"], params[prefix + ".b"])


def make_block(params, prefix, width, rng, dtype, mlp_ratio=4):
    make_norm(params, prefix + ".norm1", width, dtype)
    for part in ("q", "k", "v", "o"):
        make_linear(params, f"{prefix}.attn.{part}", width, width, rng, dtype)
    make_norm(params, prefix + ".norm2", width, dtype)
    make_linear(params, prefix + ".mlp.fc1", width, mlp_ratio * width, rng, dtype)
    make_linear(params, prefix + ".mlp.fc2", mlp_ratio * width, width, rng, dtype)


def attention(params, prefix, x: Tensor, heads: int, attn_bias: np.ndarray | None) -> Tensor:
    """Multi-head self-attention over (rows, tokens, width) inputs.

    ``attn_bias`` is an additive constant (rows, heads, N, N) with large
    negative entries at disallowed pairs; masked weights underflow to exact
    zero after the stabilized softmax, so forbidden tokens contribute
    nothing, bit for bit.
    """
    rows, n, width = x.shape
    d = width // heads

    def split(t):
        return T.transpose(T.reshape(t, (rows, n, heads, d)), (0, 2, 1, 3))

    q = split(linear(params, prefix + ".q", x))
    k = split(linear(params, prefix + ".k", x))
    v = split(linear(params, prefix + ".v", x))
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(d))
    if attn_bias is not None:
        scores = T.add(scores, Tensor(attn_bias))
    weights = T.softmax(scores, axis=-1)
    out = T.matmul(weights, v)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (rows, n, width))
    return linear(params, prefix + ".o", out)


def mlp(params, prefix, x: Tensor) -> Tensor:
    return linear(params, prefix + ".fc2", T.gelu(linear(params, prefix + ".fc1", x)))


def block_forward(
    params,
    prefix,
    x: Tensor,
    heads: int,
    attn_bias: np.ndarray | None = None,
    drop_masks: tuple[np.ndarray, np.ndarray] | None = None,
) -> Tensor:
    """Pre-norm transformer block with optional stochastic depth.

    ``drop_masks`` supplies per-row keep/scale factors (rows, 1, 1) for the
    attention and MLP residual branches; None means both branches are kept.
    """
    h = attention(params, prefix + ".attn", norm(params, prefix + ".norm1", x), heads, attn_bias)
    if drop_masks is not None:
        h = T.mul(h, Tensor(np.broadcast_to(drop_masks[0], h.shape).copy()))
    x = T.add(x, h)
    h = mlp(params, prefix + ".mlp", norm(params, prefix + ".norm2", x))
    if drop_masks is not None:
        h = T.mul(h, Tensor(np.broadcast_to(drop_masks[1], h.shape).copy()))
    return T.add(x, h)


def drop_path_masks(rng: np.random.Generator, rows: int, rate: float, dtype) -> np.ndarray:
    """Per-row stochastic-depth mask: 0 when dropped, 1/(1-rate) otherwise."""
    if rate >= 1.0:
        return np.zeros((rows, 1, 1), dtype=dtype)
    keep = (rng.random(rows) >= rate).astype(dtype) / (1.0 - rate)
    return keep.reshape(rows, 1, 1)
