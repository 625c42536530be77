from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import StructureError, UsageError
from .tensor import Tensor, check_finite


@dataclass
class OptimizerState:
    """AdamW moments and hyperparameters, keyed by parameter name."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    # names excluded from weight decay (norm scales, biases, embeddings...)
    no_decay: frozenset[str] = frozenset()

    @classmethod
    def for_params(cls, params: dict[str, Tensor], **kw) -> OptimizerState:
        st = cls(**kw)
        for name, p in params.items():
            st.m[name] = np.zeros_like(p.data)
            st.v[name] = np.zeros_like(p.data)
        return st


def adamw_step(params: dict[str, Tensor], state: OptimizerState, check: bool = False) -> None:
    """One decoupled-weight-decay Adam update, in place on ``params``.

    Every parameter tracked by ``state`` must have a populated gradient.
    """
    if set(params) != set(state.m):
        missing = sorted(set(state.m) ^ set(params))
        raise StructureError(f"optimizer state and parameters disagree on: {missing[:5]}")
    for name, p in params.items():
        if p.grad is None:
            raise UsageError(f"missing gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = p.grad
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        data = p.data
        if state.weight_decay and name not in state.no_decay:
            data = data * (1.0 - state.lr * state.weight_decay)
        p.data = data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if check:
            check_finite(p.data, f"parameter {name} after optimizer step")
