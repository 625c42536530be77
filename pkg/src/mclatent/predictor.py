"""Multi-hypothesis predictor: mask tokens + positions -> shared transformer
trunk -> r independent affine heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoders import gather_tokens, positional
from .errors import ConfigError, StructureError
from .frontend import MaskSplit
from .numerics import tensor as T
from .numerics.layers import LayerParams, attention_block, init_attention_block, init_linear, init_norm, layer_norm, linear
from .numerics.tensor import Tensor


@dataclass
class PredictorParams:
    params: LayerParams
    d: int
    depth: int
    heads: int
    r: int
    grid: tuple[int, int]
    eps: float = 1e-6


@dataclass
class HypothesisSet:
    predictions: Tensor  # (B, r, N, d)
    positions: np.ndarray  # (B, N, 2) grid coordinates of the masked patches

    @property
    def r(self) -> int:
        return self.predictions.shape[-3]


@dataclass
class BatchSplit:
    """Per-clip visible/masked indices stacked over a batch (equal counts)."""

    visible_idx: np.ndarray  # (B, V)
    masked_idx: np.ndarray  # (B, N)

    @classmethod
    def from_splits(cls, splits: list[MaskSplit]) -> BatchSplit:
        return cls(np.stack([s.visible_idx for s in splits]), np.stack([s.masked_idx for s in splits]))

    @property
    def n_total(self) -> int:
        return self.visible_idx.shape[1] + self.masked_idx.shape[1]


def init_predictor(d: int, depth: int, heads: int, r: int, grid: tuple[int, int], rng: np.random.Generator, std: float = 0.02) -> PredictorParams:
    if r < 1:
        raise ConfigError("need at least one hypothesis head")
    if d % heads:
        raise ConfigError(f"predictor width {d} not divisible by {heads} heads")
    p: LayerParams = {}
    p["mask_token"] = T.parameter(rng.normal(0.0, std, d), "mask_token")
    p["pos"] = T.parameter(rng.normal(0.0, std, (grid[0], grid[1], d)), "pos")
    for i in range(depth):
        init_attention_block(p, f"trunk.blocks.{i}", d, rng)
    init_norm(p, "trunk.norm", d)
    # each head gets its own stream so that heads never start identical
    for j, child in enumerate(np.random.SeedSequence(int(rng.integers(2**63))).spawn(r)):
        init_linear(p, f"head.{j}", d, d, np.random.default_rng(child))
    return PredictorParams(p, d, depth, heads, r, tuple(grid))


def assemble(z_v: Tensor, split: BatchSplit, positions: np.ndarray, pred: PredictorParams) -> Tensor:
    """Full-length token sequence in original patch order: ``z_v + p'`` at
    visible slots and ``m + p'`` at masked slots. ``positions`` is (n_total, 2)."""
    B, V = split.visible_idx.shape
    N = split.masked_idx.shape[1]
    if z_v.shape[-2] != V or (z_v.ndim == 3 and z_v.shape[0] != B):
        raise StructureError(f"z_v has {z_v.shape[-2]} rows but split has {V} visible patches")
    if len(positions) != V + N:
        raise StructureError(f"{len(positions)} positions for {V + N} patches")
    d = pred.d
    masks = Tensor(np.ones((B, N, 1))) * pred.params["mask_token"]
    seq = T.concat([z_v, masks], axis=1) if V else masks
    order = np.concatenate([split.visible_idx, split.masked_idx], axis=1)
    inverse = np.argsort(order, axis=1)
    seq = gather_tokens(seq, inverse)
    return seq + positional(pred.params["pos"], positions, pred.grid).reshape(1, V + N, d)


def trunk(seq: Tensor, pred: PredictorParams) -> Tensor:
    for i in range(pred.depth):
        seq = attention_block(seq, pred.params, pred.heads, prefix=f"trunk.blocks.{i}", eps=pred.eps)
    return layer_norm(seq, pred.params["trunk.norm.scale"], pred.params["trunk.norm.offset"], pred.eps)


def apply_heads(h: Tensor, pred: PredictorParams) -> Tensor:
    """Stack ``o_j(h)`` over j: (B, N, d) -> (B, r, N, d)."""
    return T.stack([linear(h, pred.params, f"head.{j}") for j in range(pred.r)], axis=1)


def predict(z_v: Tensor, split: BatchSplit, positions: np.ndarray, pred: PredictorParams) -> HypothesisSet:
    seq = trunk(assemble(z_v, split, positions, pred), pred)
    h = gather_tokens(seq, split.masked_idx)
    return HypothesisSet(apply_heads(h, pred), np.asarray(positions)[split.masked_idx])
