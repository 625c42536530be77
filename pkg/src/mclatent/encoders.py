"""Patch embedding, the transformer encoder shared by student and teacher, and
the EMA rule that moves the teacher towards the student."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, StructureError
from .frontend import PATCH
from .numerics import tensor as T
from .numerics.layers import LayerParams, attention_block, init_attention_block, init_linear, init_norm, layer_norm, linear
from .numerics.tensor import Tensor

PATCH_DIM = PATCH * PATCH


@dataclass
class EncoderParams:
    params: LayerParams
    d: int
    depth: int
    heads: int
    grid: tuple[int, int]  # largest (time blocks, freq blocks) the positional table covers
    eps: float = 1e-6

    def tensors(self) -> LayerParams:
        return self.params


@dataclass
class TeacherState:
    params: EncoderParams
    lam: float = field(default=0.99)


def init_encoder(d: int, depth: int, heads: int, grid: tuple[int, int], rng: np.random.Generator, pos_std: float = 0.02) -> EncoderParams:
    if d % heads:
        raise ConfigError(f"encoder width {d} not divisible by {heads} heads")
    p: LayerParams = {}
    init_linear(p, "embed", PATCH_DIM, d, rng)
    p["pos"] = T.parameter(rng.normal(0.0, pos_std, (grid[0], grid[1], d)), "pos")
    for i in range(depth):
        init_attention_block(p, f"blocks.{i}", d, rng)
    init_norm(p, "norm", d)
    return EncoderParams(p, d, depth, heads, tuple(grid))


def positional(table: Tensor, positions: np.ndarray, grid: tuple[int, int]) -> Tensor:
    """Rows of a (rows, cols, d) table at ``positions`` (..., 2)."""
    positions = np.asarray(positions)
    if positions.size and (positions.min() < 0 or np.any(positions.max(axis=tuple(range(positions.ndim - 1))) >= np.array(grid))):
        raise ConfigError(f"patch position outside the {grid} positional grid")
    flat = table.reshape(grid[0] * grid[1], table.shape[-1])
    idx = positions[..., 0] * grid[1] + positions[..., 1]
    return _rows(flat, idx)


def _rows(flat: Tensor, idx: np.ndarray) -> Tensor:
    # gather rows; repeated indices are allowed, so the backward accumulates
    out = flat.data[idx]

    def bw(g):
        full = np.zeros(flat.shape)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, flat.shape[-1]))
        flat._accum(full)

    return T._result(out, (flat,), bw)


def embed(patches, positions: np.ndarray, enc: EncoderParams) -> Tensor:
    """``linear(patch) + p[position]`` for patches ``(..., n, 256)``."""
    x = linear(T.as_tensor(patches), enc.params, "embed")
    return x + positional(enc.params["pos"], positions, enc.grid)


def encode(x: Tensor, enc: EncoderParams) -> Tensor:
    """Apply every block then the final norm; ``(..., n, d)`` in and out."""
    for i in range(enc.depth):
        x = attention_block(x, enc.params, enc.heads, prefix=f"blocks.{i}", eps=enc.eps)
    return layer_norm(x, enc.params["norm.scale"], enc.params["norm.offset"], enc.eps)


def gather_tokens(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select token rows per batch element: ``x`` (B, n, d), ``idx`` (B, m)."""
    return T.take_along_axis(x, np.asarray(idx)[..., None], axis=-2)


def copy_encoder(enc: EncoderParams, requires_grad: bool = False) -> EncoderParams:
    out = copy.copy(enc)
    out.params = {k: Tensor(v.data.copy(), requires_grad=requires_grad, name=v.name) for k, v in enc.params.items()}
    return out


def ema_params(target: LayerParams, source: LayerParams, decay: float) -> None:
    """In place: ``target <- decay * target + (1 - decay) * source``.

    Evaluated as ``source + decay * (target - source)`` so that a target
    already equal to its source stays bit-identical; decay 1 and 0 are exact
    no-op and copy.
    """
    if not 0.0 <= decay <= 1.0:
        raise ConfigError(f"EMA decay {decay} outside [0, 1]")
    if target.keys() != source.keys():
        raise StructureError(f"EMA over mismatched parameter names: {sorted(set(target) ^ set(source))[:5]}")
    for name, t in target.items():
        s = source[name]
        if t.shape != s.shape:
            raise StructureError(f"EMA shape mismatch for {name!r}: {t.shape} vs {s.shape}")
        if decay == 1.0:
            continue
        if decay == 0.0:
            t.data = s.data.copy()
        else:
            t.data = s.data + decay * (t.data - s.data)


def ema_update(teacher: TeacherState, student: EncoderParams, lam: float) -> TeacherState:
    ema_params(teacher.params.params, student.params, lam)
    teacher.lam = lam
    return teacher
