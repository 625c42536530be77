"""Pretraining loop: batches -> student/teacher encoders -> multi-hypothesis
predictor -> losses -> AdamW -> EMA updates and temperature annealing."""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import objectives as obj
from .config import RunConfig
from .data import build_dataset, norm_stats
from .encoders import EncoderParams, TeacherState, copy_encoder, embed, ema_update, encode, init_encoder
from .errors import NonFiniteError
from .frontend import PATCH, AudioClip, LogMelSpec, compute_log_mel, frames_for, patchify, random_mask, standardize
from .numerics import tensor as T
from .numerics.optim import OptimizerState, adamw_step
from .numerics.tensor import Tensor
from .predictor import BatchSplit, PredictorParams, init_predictor, predict

log = logging.getLogger(__name__)


@dataclass
class PretextState:
    cfg: RunConfig
    student: EncoderParams
    teacher: TeacherState
    predictor: PredictorParams
    cls: obj.ClsHeads
    opt: OptimizerState
    step: int = 0
    tau_mcl: float = 1.0
    lam: float = 0.99
    norm: tuple[float, float] = (0.0, 1.0)

    def trainable(self) -> dict[str, Tensor]:
        out = {"student." + k: v for k, v in self.student.params.items()}
        out.update({"predictor." + k: v for k, v in self.predictor.params.items()})
        out.update({"cls.student." + k: v for k, v in self.cls.student.items()})
        return out

    def frozen(self) -> dict[str, Tensor]:
        out = {"teacher." + k: v for k, v in self.teacher.params.params.items()}
        out.update({"cls.teacher." + k: v for k, v in self.cls.teacher.items()})
        return out


@dataclass
class Batch:
    patches: np.ndarray  # (B, n, 256), standardised
    positions: np.ndarray  # (n, 2)
    split: BatchSplit
    clip_ids: np.ndarray
    seeds: list[int] = field(default_factory=list)


def grid_for(cfg: RunConfig) -> tuple[int, int]:
    frames = frames_for(cfg.data.crop_seconds, cfg.data.mel())
    return frames // PATCH, cfg.data.n_mels // PATCH


def init_state(cfg: RunConfig, norm: tuple[float, float] = (0.0, 1.0)) -> PretextState:
    m = cfg.model
    grid = grid_for(cfg)
    root = np.random.SeedSequence(cfg.train.seed)
    s_enc, s_pred, s_cls = (np.random.default_rng(c) for c in root.spawn(3))
    student = init_encoder(m.d, m.encoder_depth, m.heads, grid, s_enc, pos_std=m.pos_std)
    teacher = TeacherState(copy_encoder(student), cfg.schedule.lambda_start)
    predictor = init_predictor(m.d, m.predictor_depth, m.heads, m.r, grid, s_pred, std=m.pos_std)
    lo = cfg.loss
    cls = obj.init_cls_heads(
        m.d, m.K, s_cls, std=m.cls_init_std, kind=m.cls_head, tau_s=lo.tau_s, tau_t=lo.tau_t, zeta=cfg.schedule.zeta, rho_center=lo.rho_center
    )
    st = PretextState(cfg, student, teacher, predictor, cls, None, tau_mcl=cfg.schedule.tau_mcl_init, lam=cfg.schedule.lambda_start, norm=norm)
    params = st.trainable()
    no_decay = frozenset(k for k, v in params.items() if v.ndim < 2 or k.endswith(".pos") or k.endswith("mask_token"))
    o = cfg.optim
    st.opt = OptimizerState.for_params(
        params, lr=o.lr, beta1=o.beta1, beta2=o.beta2, eps=o.eps, weight_decay=o.weight_decay, no_decay=no_decay
    )
    return st


# -- schedules -------------------------------------------------------------
def anneal_tau(tau: float, eta: float, floor: float) -> float:
    return max(eta * tau, floor)


def lambda_at(step: int, cfg: RunConfig) -> float:
    """Cosine ramp of the teacher decay from lambda_start to lambda_end."""
    s = cfg.schedule
    total = max(cfg.train.total_steps, 1)
    frac = min(step / total, 1.0)
    return s.lambda_end - (s.lambda_end - s.lambda_start) * 0.5 * (1.0 + math.cos(math.pi * frac))


def lr_at(step: int, cfg: RunConfig) -> float:
    """Linear warmup, then cosine decay to zero."""
    total = max(cfg.train.total_steps, 1)
    warm = max(1, int(round(cfg.optim.warmup_frac * total)))
    base = cfg.optim.lr
    if step < warm:
        return base * (step + 1) / warm
    frac = (step - warm) / max(total - warm, 1)
    return base * 0.5 * (1.0 + math.cos(math.pi * min(frac, 1.0)))


# -- batches ---------------------------------------------------------------
def prepare_specs(specs: list[np.ndarray], cfg: RunConfig, norm: tuple[float, float], mask_seeds: list, crop_offsets: list[int] | None = None) -> Batch:
    """Crop (frame offsets), standardise, patchify and mask a list of raw
    log-mel spectrograms that share one crop length."""
    frames = frames_for(cfg.data.crop_seconds, cfg.data.mel())
    patches, splits, positions = [], [], None
    for k, v in enumerate(specs):
        off = 0 if crop_offsets is None else crop_offsets[k]
        pb = patchify(LogMelSpec(standardize(v[off : off + frames], *norm)))
        patches.append(pb.patches)
        positions = pb.positions
        splits.append(random_mask(len(pb), cfg.data.mask_ratio, mask_seeds[k]))
    return Batch(np.stack(patches), positions, BatchSplit.from_splits(splits), np.arange(len(specs)))


def prepare_batch(clips: list[AudioClip], cfg: RunConfig, norm: tuple[float, float], seed: int) -> Batch:
    """Crop -> log-mel -> patchify -> mask for raw audio clips."""
    rng = np.random.default_rng(seed)
    n = int(round(cfg.data.crop_seconds * cfg.data.sample_rate))
    specs = []
    for c in clips:
        start = int(rng.integers(0, len(c.samples) - n + 1))
        specs.append(compute_log_mel(AudioClip(c.samples[start : start + n], c.sample_rate), cfg.data.mel()).values)
    seeds = [np.random.SeedSequence([seed, k]) for k in range(len(clips))]
    return prepare_specs(specs, cfg, norm, seeds)


def batch_for_step(ds, step: int, cfg: RunConfig, norm: tuple[float, float]) -> Batch:
    """Deterministic batch for a global step: clips follow a per-epoch
    permutation; crops and masks use per-(epoch, clip) seeds."""
    B, n, seed = cfg.data.batch_size, len(ds), cfg.train.seed
    frames = frames_for(cfg.data.crop_seconds, cfg.data.mel())
    ids, offs, mseeds = [], [], []
    perms: dict[int, np.ndarray] = {}
    for k in range(B):
        g = step * B + k
        epoch, pos = divmod(g, n)
        if epoch not in perms:
            perms[epoch] = np.random.default_rng([seed, epoch, 0]).permutation(n)
        cid = int(perms[epoch][pos])
        ids.append(cid)
        avail = ds.spec(cid).shape[0] - frames
        crng = np.random.default_rng([seed, epoch, cid, 1])
        offs.append(int(crng.integers(0, avail + 1)) if avail > 0 else 0)
        mseeds.append(np.random.SeedSequence([seed, epoch, cid, 2]))
    batch = prepare_specs([ds.spec(i) for i in ids], cfg, norm, mseeds, offs)
    batch.clip_ids = np.array(ids)
    batch.seeds = [int(s.generate_state(1)[0]) for s in mseeds]
    return batch


# -- forward ---------------------------------------------------------------
@dataclass
class ForwardOut:
    breakdown: obj.LossBreakdown
    hyps: Tensor
    d: Tensor
    z_m: Tensor
    p_student: Tensor
    p_teacher: Tensor
    teacher_logits: np.ndarray


def student_encode(state: PretextState, batch: Batch) -> Tensor:
    pos = batch.positions[batch.split.visible_idx]
    vis = np.take_along_axis(batch.patches, batch.split.visible_idx[..., None], axis=1)
    return encode(embed(vis, pos, state.student), state.student)


def teacher_encode(state: PretextState, batch: Batch) -> Tensor:
    with T.no_grad():
        pos = batch.positions[batch.split.masked_idx]
        msk = np.take_along_axis(batch.patches, batch.split.masked_idx[..., None], axis=1)
        return encode(embed(msk, pos, state.teacher.params), state.teacher.params).detach()


def forward(state: PretextState, batch: Batch, tau: float | None = None, fused: bool = True) -> ForwardOut:
    cfg = state.cfg
    tau = state.tau_mcl if tau is None else tau
    z_v = student_encode(state, batch)
    z_m = teacher_encode(state, batch)
    hyps = predict(z_v, batch.split, batch.positions, state.predictor).predictions
    lpred, d = obj.pred_loss(cfg.loss.strategy, hyps, z_m, tau, cfg.loss.reduction, fused=fused)
    z_best, winners = obj.select_best(d, hyps)
    if cfg.loss.strategy == "mean":
        z_best = T.reshape(T.mean(hyps, axis=-3, keepdims=True), z_m.shape)
    p_s, p_t, tlogits = obj.cls_distributions(z_best, z_m, state.cls)
    lcls = obj.cls_loss(p_s, p_t, cfg.loss.reduction)
    bd = obj.breakdown(lpred, lcls, cfg.loss.alpha, winners, state.predictor.r)
    bd.teacher_entropy = obj.mean_entropy(p_t)
    bd.teacher_marginal_entropy = obj.marginal_entropy(p_t)
    return ForwardOut(bd, hyps, d, z_m, p_s, p_t, tlogits)


def train_step(state: PretextState, batch: Batch) -> obj.LossBreakdown:
    cfg = state.cfg
    params = state.trainable()
    T.zero_grad(params.values())
    lam = lambda_at(state.step, cfg)
    lr = lr_at(state.step, cfg)
    tau = state.tau_mcl
    try:
        out = forward(state, batch, tau)
    except NonFiniteError as e:
        raise NonFiniteError(f"step {state.step + 1}: {e}") from e
    bd = out.breakdown
    if not math.isfinite(bd.total):
        raise NonFiniteError(f"non-finite loss at step {state.step + 1} (batch mask seeds {batch.seeds}, clips {batch.clip_ids.tolist()})")
    T.backward(bd.total_tensor, params.values())
    state.opt.lr = lr
    adamw_step(params, state.opt, check=cfg.train.debug)
    ema_update(state.teacher, state.student, lam)
    obj.ema_update_cls_head(state.cls)
    obj.update_center(state.cls, out.teacher_logits)
    state.lam = lam
    state.tau_mcl = anneal_tau(tau, cfg.schedule.eta, cfg.schedule.tau_floor)
    state.step += 1
    bd.total_tensor = None
    bd.tau = tau
    bd.lam = lam
    bd.lr = lr
    return bd


# -- logging ---------------------------------------------------------------
def metrics_header(r: int) -> list[str]:
    return ["step", "pred_loss", "cls_loss", "total", "tau_mcl", "lambda"] + [f"winner_{j}" for j in range(r)]


def metrics_row(step: int, bd: obj.LossBreakdown) -> list[str]:
    vals = [bd.pred_loss, bd.cls_loss, bd.total, bd.tau, bd.lam]
    return [str(step)] + [repr(float(v)) for v in vals] + [str(int(c)) for c in bd.winner_counts]


DIAG_HEADER = ["step", "teacher_entropy", "teacher_marginal_entropy", "lr"]


def _open_log(path: str, header: list[str], keep_upto: int | None):
    """Open a CSV log for appending, keeping only rows with step <= keep_upto."""
    rows = []
    if keep_upto is not None and os.path.exists(path):
        with open(path, newline="") as fh:
            rd = csv.reader(fh)
            next(rd, None)
            rows = [r for r in rd if r and int(r[0]) <= keep_upto]
    fh = open(path, "w", newline="", encoding="utf-8")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return fh, w


@dataclass
class RunResult:
    state: PretextState
    history: list[obj.LossBreakdown]
    seconds: float
    out_dir: str | None


def run(cfg: RunConfig, out_dir: str | None = None, resume: str | None = None, dataset=None, progress: bool = False) -> RunResult:
    """Train for ``cfg.train.total_steps`` steps (continuing from ``resume``).

    Writes ``metrics.csv``, ``diag.csv`` and checkpoints under ``out_dir``
    when one is given.
    """
    from .checkpoint import checkpoint_path, load_checkpoint, save_checkpoint

    cfg.validate()
    T.set_debug(cfg.train.debug)
    ds = dataset if dataset is not None else build_dataset(cfg)
    if resume:
        state = load_checkpoint(resume)
        state.cfg = cfg
    else:
        state = init_state(cfg, norm_stats(ds))
    start = state.step
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        mfh, mw = _open_log(os.path.join(out_dir, "metrics.csv"), metrics_header(cfg.model.r), start if resume else None)
        dfh, dw = _open_log(os.path.join(out_dir, "diag.csv"), DIAG_HEADER, start if resume else None)
    history = []
    t0 = time.perf_counter()
    try:
        for s in range(start, cfg.train.total_steps):
            batch = batch_for_step(ds, s, cfg, state.norm)
            bd = train_step(state, batch)
            history.append(bd)
            if out_dir:
                mw.writerow(metrics_row(state.step, bd))
                dw.writerow([str(state.step), repr(bd.teacher_entropy), repr(bd.teacher_marginal_entropy), repr(bd.lr)])
                if cfg.train.ckpt_every and state.step % cfg.train.ckpt_every == 0:
                    save_checkpoint(state, checkpoint_path(out_dir, state.step))
            if progress and (state.step % 100 == 0 or state.step == cfg.train.total_steps):
                log.info("step %d total %.4f pred %.4f cls %.4f H(P_m) %.3f", state.step, bd.total, bd.pred_loss, bd.cls_loss, bd.teacher_entropy)
    finally:
        if out_dir:
            mfh.close()
            dfh.close()
    if out_dir:
        save_checkpoint(state, os.path.join(out_dir, "ckpt_final.bin"))
    return RunResult(state, history, time.perf_counter() - t0, out_dir)
