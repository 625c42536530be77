"""Layer primitives built on the tensor ops: linear maps, normalisation and the
pre-norm transformer block."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError, ShapeError
from . import tensor as T
from .tensor import Tensor

LayerParams = dict[str, Tensor]


def softmax_rows(logits: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction. Raises on non-finite input."""
    if logits.shape[-1] < 1:
        raise ShapeError("softmax_rows needs at least one column")
    return T.softmax(logits, axis=-1)


def layer_norm(x: Tensor, scale: Tensor, offset: Tensor, eps: float = 1e-6) -> Tensor:
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    return T.layer_norm(x, scale, offset, eps)


def linear(x: Tensor, params: LayerParams, prefix: str) -> Tensor:
    out = x @ params[prefix + ".weight"]
    bias = params.get(prefix + ".bias")
    return out + bias if bias is not None else out


# -- initialisation --------------------------------------------------------
def init_linear(
    params: LayerParams, prefix: str, fan_in: int, fan_out: int, rng: np.random.Generator, std: float | None = None
) -> None:
    if std is None:
        # xavier-uniform bound expressed as a normal std
        std = np.sqrt(2.0 / (fan_in + fan_out))
    params[prefix + ".weight"] = T.parameter(rng.normal(0.0, std, (fan_in, fan_out)), prefix + ".weight")
    params[prefix + ".bias"] = T.parameter(np.zeros(fan_out), prefix + ".bias")


def init_norm(params: LayerParams, prefix: str, d: int) -> None:
    params[prefix + ".scale"] = T.parameter(np.ones(d), prefix + ".scale")
    params[prefix + ".offset"] = T.parameter(np.zeros(d), prefix + ".offset")


def init_attention_block(params: LayerParams, prefix: str, d: int, rng: np.random.Generator, mlp_ratio: int = 4) -> None:
    init_norm(params, prefix + ".ln1", d)
    init_linear(params, prefix + ".attn.qkv", d, 3 * d, rng)
    init_linear(params, prefix + ".attn.out", d, d, rng)
    init_norm(params, prefix + ".ln2", d)
    init_linear(params, prefix + ".mlp.fc1", d, mlp_ratio * d, rng)
    init_linear(params, prefix + ".mlp.fc2", mlp_ratio * d, d, rng)


# -- transformer block -----------------------------------------------------
def self_attention(x: Tensor, params: LayerParams, prefix: str, heads: int) -> Tensor:
    *lead, n, d = x.shape
    if d % heads:
        raise ConfigError(f"width {d} not divisible by {heads} heads")
    dh = d // heads
    qkv = linear(x, params, prefix + ".qkv")
    qkv = qkv.reshape(*lead, n, 3, heads, dh)
    nl = len(lead)
    # -> (3, *lead, heads, n, dh)
    qkv = qkv.transpose(nl + 1, *range(nl), nl + 2, nl, nl + 3)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ T.swap_last(k)) * (1.0 / np.sqrt(dh))
    attn = T.softmax(scores, axis=-1)
    ctx = attn @ v  # (*lead, heads, n, dh)
    ctx = ctx.transpose(*range(nl), nl + 1, nl, nl + 2).reshape(*lead, n, d)
    return linear(ctx, params, prefix + ".out")


def attention_block(x: Tensor, params: LayerParams, heads: int, prefix: str = "", eps: float = 1e-6) -> Tensor:
    """Pre-norm residual block: ``x + attn(ln1(x))`` then ``h + mlp(ln2(h))``.

    ``x`` is ``(..., n, d)``; ``prefix`` selects the block's entries inside a
    larger parameter map.
    """
    if x.shape[-1] % heads:
        raise ConfigError(f"width {x.shape[-1]} not divisible by {heads} heads")
    p = prefix + "." if prefix else ""
    h = layer_norm(x, params[p + "ln1.scale"], params[p + "ln1.offset"], eps)
    x = x + self_attention(h, params, p + "attn", heads)
    h = layer_norm(x, params[p + "ln2.scale"], params[p + "ln2.offset"], eps)
    h = T.gelu(linear(h, params, p + "mlp.fc1"))
    return x + linear(h, params, p + "mlp.fc2")
