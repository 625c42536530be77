"""Prediction losses over r hypotheses, best-hypothesis selection, the
pseudo-classification heads and the weighted total.

Distance tensors are laid out ``(..., N, r)``: one row per masked patch, one
column per hypothesis. Hypotheses are ``(..., r, N, d)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .encoders import ema_params
from .errors import ConfigError
from .numerics import tensor as T
from .numerics.layers import LayerParams, init_linear, linear
from .numerics.tensor import Tensor

STRATEGIES = ("annealed", "greedy", "mean")
HEAD_KINDS = ("cosine", "linear")
LOG_CLAMP = 1e-12


@dataclass
class ClsHeads:
    student: LayerParams  # h_psi, d -> K
    teacher: LayerParams  # h_omega, EMA of student, never trained
    center: np.ndarray  # (K,)
    tau_s: float = 0.1
    tau_t: float = 0.05
    zeta: float = 0.99
    rho_center: float = 0.9
    kind: str = "cosine"

    def __post_init__(self):
        if not self.tau_s > self.tau_t > 0:
            raise ConfigError(f"need tau_s > tau_t > 0, got tau_s={self.tau_s}, tau_t={self.tau_t}")
        if self.kind not in HEAD_KINDS:
            raise ConfigError(f"unknown head kind {self.kind!r}; expected one of {HEAD_KINDS}")

    @property
    def K(self) -> int:
        return self.center.shape[0]


@dataclass
class LossBreakdown:
    pred_loss: float
    cls_loss: float
    total: float
    alpha: float
    winner_indices: np.ndarray
    winner_counts: np.ndarray
    total_tensor: Tensor | None = field(default=None, repr=False)
    teacher_entropy: float = float("nan")
    teacher_marginal_entropy: float = float("nan")
    tau: float = float("nan")
    lam: float = float("nan")
    lr: float = float("nan")


def init_cls_heads(d: int, K: int, rng: np.random.Generator, std: float = 0.02, kind: str = "cosine", **kw) -> ClsHeads:
    """A ``cosine`` head has one weight matrix whose columns act as K unit
    prototypes; a ``linear`` head is a plain affine map."""
    student: LayerParams = {}
    init_linear(student, "head", d, K, rng, std=std)
    if kind == "cosine":
        del student["head.bias"]
    teacher = {k: Tensor(v.data.copy(), name=v.name) for k, v in student.items()}
    return ClsHeads(student, teacher, np.zeros(K), kind=kind, **kw)


def head_logits(z: Tensor, params: LayerParams, kind: str = "cosine") -> Tensor:
    """``h(z)``: cosine similarities to the prototype columns, or ``z W + b``."""
    if kind == "linear":
        return linear(z, params, "head")
    w = T.swap_last(T.l2_normalize(T.swap_last(params["head.weight"])))
    return T.l2_normalize(z) @ w


def _mean_over_targets(x: Tensor, reduction: str = "mean") -> Tensor:
    if reduction == "sum":
        return T.tsum(x)
    if reduction != "mean":
        raise ConfigError(f"unknown reduction {reduction!r}")
    return T.tsum(x) * (1.0 / x.size)


# -- distances -------------------------------------------------------------
def l2_normalize_rows(x: Tensor, eps: float = 1e-8) -> Tensor:
    return T.l2_normalize(x, eps)


def distances(hyps: Tensor, targets: Tensor, eps: float = 1e-8) -> Tensor:
    """``d[..., i, j] = || norm(hyp_j(i)) - norm(target(i)) ||^2`` in [0, 4]."""
    h = l2_normalize_rows(hyps, eps)  # (..., r, N, d)
    z = l2_normalize_rows(targets, eps)  # (..., N, d)
    zb = T.reshape(z, z.shape[:-2] + (1,) + z.shape[-2:])
    sq = T.tsum(T.square(h - zb), axis=-1)  # (..., r, N)
    return T.swap_last(sq)


# -- prediction losses -----------------------------------------------------
def soft_assign(d: Tensor, tau: float) -> Tensor:
    if not tau > 0:
        raise ConfigError(f"tau_mcl must be positive, got {tau}")
    return T.softmax(d * (-1.0 / tau), axis=-1)


def mcl_pred_loss(d: Tensor, b: Tensor, reduction: str = "mean") -> Tensor:
    """Assignment-weighted distance, averaged over targets. Gradients reach
    ``d`` both directly and through ``b``."""
    return _mean_over_targets(T.tsum(b * d, axis=-1), reduction)


def annealed_pred_loss(d: Tensor, tau: float, reduction: str = "mean") -> Tensor:
    """Fused ``mcl_pred_loss(d, soft_assign(d, tau))`` on the compiled kernel."""
    if not tau > 0:
        raise ConfigError(f"tau_mcl must be positive, got {tau}")
    r = d.shape[-1]
    rows, _, g = kernels.mcl_annealed(d.data.reshape(-1, r), tau)

    def bw(gout):
        d._accum(np.asarray(gout)[..., None] * g.reshape(d.shape))

    per_target = T._result(rows.reshape(d.shape[:-1]), (d,), bw)
    return _mean_over_targets(per_target, reduction)


def greedy_pred_loss(d: Tensor, reduction: str = "mean") -> tuple[Tensor, np.ndarray]:
    """Winner-takes-all: min over hypotheses, lowest index on ties."""
    vals, idx = T.min_select(d, axis=-1)
    return _mean_over_targets(vals, reduction), idx


def mean_pred_loss(hyps: Tensor, targets: Tensor, eps: float = 1e-8, reduction: str = "mean") -> Tensor:
    r = hyps.shape[-3]
    avg = T.tsum(hyps, axis=-3, keepdims=True) * (1.0 / r)  # (..., 1, N, d)
    return _mean_over_targets(T.reshape(distances(avg, targets, eps), targets.shape[:-1]), reduction)


def plain_pred_loss(pred: Tensor, targets: Tensor, eps: float = 1e-8, reduction: str = "mean") -> Tensor:
    """Single-prediction normalised MSE, ``pred`` shaped like ``targets``."""
    p = T.reshape(pred, pred.shape[:-2] + (1,) + pred.shape[-2:])
    return _mean_over_targets(T.reshape(distances(p, targets, eps), targets.shape[:-1]), reduction)


def select_best(d: Tensor | np.ndarray, hyps: Tensor) -> tuple[Tensor, np.ndarray]:
    """Per target, the hypothesis with the smallest distance (lowest index on
    ties). Returns the ``(..., N, d)`` selection and the winner indices."""
    dd = d.data if isinstance(d, Tensor) else np.asarray(d)
    winners = np.argmin(dd, axis=-1)  # (..., N)
    idx = winners[..., None, :, None]  # (..., 1, N, 1)
    best = T.take_along_axis(hyps, idx, axis=-3)
    return T.reshape(best, best.shape[:-3] + best.shape[-2:]), winners


def pred_loss(strategy: str, hyps: Tensor, targets: Tensor, tau: float, reduction: str = "mean", fused: bool = True) -> tuple[Tensor, Tensor]:
    """Strategy dispatch; returns ``(loss, distance matrix)``."""
    d = distances(hyps, targets)
    if strategy == "annealed":
        loss = annealed_pred_loss(d, tau, reduction) if fused else mcl_pred_loss(d, soft_assign(d, tau), reduction)
    elif strategy == "greedy":
        loss, _ = greedy_pred_loss(d, reduction)
    elif strategy == "mean":
        loss = mean_pred_loss(hyps, targets, reduction=reduction)
    else:
        raise ConfigError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    return loss, d


# -- classification pretext ------------------------------------------------
def cls_distributions(z_best: Tensor, z_m: Tensor, heads: ClsHeads) -> tuple[Tensor, Tensor, np.ndarray]:
    """Student distribution (differentiable), teacher distribution (constant)
    and the raw teacher logits used for the centre update."""
    student = T.softmax(head_logits(z_best, heads.student, heads.kind) * (1.0 / heads.tau_s), axis=-1)
    with T.no_grad():
        tlogits = head_logits(z_m.detach(), heads.teacher, heads.kind).data
        teacher = T.softmax(Tensor((tlogits - heads.center) / heads.tau_t), axis=-1)
    return student, teacher.detach(), tlogits


def update_center(heads: ClsHeads, teacher_logits: np.ndarray) -> np.ndarray:
    batch_mean = teacher_logits.reshape(-1, heads.K).mean(axis=0)
    rho = heads.rho_center
    if rho == 1.0:
        return heads.center
    heads.center = rho * heads.center + (1.0 - rho) * batch_mean
    return heads.center


def cls_loss(p_student: Tensor, p_teacher: Tensor, reduction: str = "mean") -> Tensor:
    """Cross-entropy with the teacher distribution as target."""
    ce = -T.tsum(T.as_tensor(p_teacher) * T.log(p_student, clamp=LOG_CLAMP), axis=-1)
    return _mean_over_targets(ce, reduction)


def ema_update_cls_head(heads: ClsHeads) -> None:
    ema_params(heads.teacher, heads.student, heads.zeta)


def mean_entropy(p: Tensor | np.ndarray) -> float:
    p = p.data if isinstance(p, Tensor) else p
    return float(-(p * np.log(np.maximum(p, LOG_CLAMP))).sum(axis=-1).mean())


def marginal_entropy(p: Tensor | np.ndarray) -> float:
    """Entropy of the average distribution over all rows."""
    p = p.data if isinstance(p, Tensor) else p
    m = p.reshape(-1, p.shape[-1]).mean(axis=0)
    return float(-(m * np.log(np.maximum(m, LOG_CLAMP))).sum())


def combined_loss(pred: Tensor, cls: Tensor, alpha: float) -> Tensor:
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha {alpha} outside [0, 1]")
    return cls * (1.0 - alpha) + pred * alpha


def breakdown(pred: Tensor, cls: Tensor, alpha: float, winners: np.ndarray, r: int) -> LossBreakdown:
    total = combined_loss(pred, cls, alpha)
    counts = np.bincount(winners.reshape(-1), minlength=r)
    return LossBreakdown(pred.item(), cls.item(), total.item(), alpha, winners, counts, total)
