"""Linear probes on frozen encoders: pooled clip embeddings, a single linear
layer trained with early stopping, accuracy and mean average precision."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .encoders import embed, encode
from .errors import InputError
from .frontend import PATCH, LogMelSpec, frames_for, patchify, standardize
from .numerics import tensor as T
from .numerics.optim import OptimizerState, adamw_step
from .numerics.tensor import Tensor
from .numerics.tensorfile import load_tensors, save_tensors

log = logging.getLogger(__name__)

MULTICLASS = "multiclass"
MULTILABEL = "multilabel"


@dataclass
class EmbeddingTable:
    rows: np.ndarray  # (clips, d)
    labels: np.ndarray  # (clips,) class ids, or (clips, C) 0/1 for multi-label
    kind: str = MULTICLASS
    clip_ids: np.ndarray | None = None
    skipped: list[tuple[int, str]] = field(default_factory=list)

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.rows.ndim != 2 or len(self.rows) != len(self.labels):
            raise InputError(f"embedding table needs one row per label: rows {self.rows.shape}, labels {self.labels.shape}")
        if not np.all(np.isfinite(self.rows)):
            raise InputError("embedding table has non-finite rows")
        if self.kind not in (MULTICLASS, MULTILABEL):
            raise InputError(f"unknown task kind {self.kind!r}")
        if self.clip_ids is None:
            self.clip_ids = np.arange(len(self.rows))

    def __len__(self) -> int:
        return len(self.rows)

    def subset(self, idx) -> EmbeddingTable:
        return EmbeddingTable(self.rows[idx], self.labels[idx], self.kind, self.clip_ids[idx])

    def save(self, path: str | os.PathLike) -> None:
        """Rows in the tensor container, labels in a ``<path>.labels.csv`` sidecar."""
        save_tensors(path, [("rows", self.rows), ("clip_ids", self.clip_ids.astype(np.int64))])
        with open(os.fspath(path) + ".labels.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["clip", "kind", "labels"])
            for cid, lab in zip(self.clip_ids, self.labels):
                text = str(int(lab)) if self.kind == MULTICLASS else " ".join(str(int(j)) for j in np.flatnonzero(lab))
                w.writerow([int(cid), self.kind, text])

    @classmethod
    def load(cls, path: str | os.PathLike, n_classes: int | None = None) -> EmbeddingTable:
        recs = load_tensors(path)
        with open(os.fspath(path) + ".labels.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        kind = rows[0]["kind"] if rows else MULTICLASS
        if kind == MULTICLASS:
            labels = np.array([int(r["labels"]) for r in rows], dtype=np.int64)
        else:
            sets = [[int(v) for v in r["labels"].split()] for r in rows]
            C = n_classes or (1 + max((max(s) for s in sets if s), default=0))
            labels = np.zeros((len(rows), C), dtype=np.uint8)
            for i, s in enumerate(sets):
                labels[i, s] = 1
        return cls(recs["rows"], labels, kind, recs["clip_ids"])


@dataclass
class ProbeResult:
    metric: str  # "accuracy" | "mAP"
    value: float
    per_class: np.ndarray
    epoch: int  # epoch with the best validation loss (1-based)
    val_losses: list[float] = field(default_factory=list)
    weight: np.ndarray | None = field(default=None, repr=False)
    bias: np.ndarray | None = field(default=None, repr=False)


# -- embeddings ------------------------------------------------------------
def clip_embedding(spec: np.ndarray, state, chunk_frames: int) -> np.ndarray | None:
    """Mean of the per-chunk patch-mean embeddings for one raw log-mel
    spectrogram; ``None`` when the clip is shorter than one patch."""
    if spec.shape[0] < PATCH:
        return None
    enc = state.student
    starts = range(0, max(spec.shape[0] - chunk_frames, 0) + 1, chunk_frames)
    chunks = [spec[s : s + chunk_frames] for s in starts]
    outs = []
    with T.no_grad():
        for c in chunks:
            pb = patchify(LogMelSpec(standardize(c, *state.norm)))
            z = encode(embed(pb.patches, pb.positions, enc), enc).data
            outs.append(z.mean(axis=0))
    return np.mean(outs, axis=0)


def extract_embeddings(state, ds, indices=None, kind: str = MULTICLASS) -> EmbeddingTable:
    """Student embeddings for the clips of ``ds`` (all of them by default).
    No masking and no random numbers are involved."""
    chunk = frames_for(state.cfg.data.crop_seconds, state.cfg.data.mel())
    idx = range(len(ds)) if indices is None else indices
    rows, labels, ids, skipped = [], [], [], []
    for i in idx:
        emb = clip_embedding(ds.spec(i), state, chunk)
        if emb is None:
            skipped.append((int(i), f"shorter than {PATCH} frames"))
            log.warning("clip %d skipped: shorter than one patch", i)
            continue
        rows.append(emb)
        labels.append(ds.label(i))
        ids.append(int(i))
    if not rows:
        raise InputError("no clip long enough to embed")
    table = EmbeddingTable(np.stack(rows), np.asarray(labels), kind, np.asarray(ids))
    table.skipped = skipped
    return table


# -- metrics ---------------------------------------------------------------
def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-based AP: mean over positives of the precision at their rank."""
    return kernels.average_precision(scores, labels)


def mean_average_precision(scores: np.ndarray, labels: np.ndarray, return_per_class: bool = False):
    """Macro AP over classes with at least one positive."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 1:
        scores, labels = scores[:, None], labels[:, None]
    per = np.array([average_precision(scores[:, c], labels[:, c]) for c in range(scores.shape[1])])
    ok = ~np.isnan(per)
    if not ok.any():
        raise InputError("mean average precision is undefined: no class has a positive example")
    value = float(per[ok].mean())
    return (value, per) if return_per_class else value


def accuracy(pred: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Overall accuracy and per-class recall (NaN for absent classes)."""
    pred, labels = np.asarray(pred), np.asarray(labels)
    C = int(max(pred.max(initial=0), labels.max(initial=0))) + 1
    per = np.array([np.mean(pred[labels == c] == c) if np.any(labels == c) else np.nan for c in range(C)])
    return float(np.mean(pred == labels)), per


# -- probe training --------------------------------------------------------
def _targets(table: EmbeddingTable, n_classes: int) -> np.ndarray:
    if table.kind == MULTILABEL:
        return table.labels.astype(np.float64)
    onehot = np.zeros((len(table), n_classes))
    onehot[np.arange(len(table)), table.labels.astype(np.int64)] = 1.0
    return onehot


def _loss(logits: Tensor, y: np.ndarray, kind: str) -> Tensor:
    if kind == MULTICLASS:
        return T.tsum(T.log_softmax(logits, axis=-1) * y) * (-1.0 / len(y))
    # sigmoid BCE in the stable softplus form: softplus(x) - y x
    x = logits.data
    sp = np.logaddexp(0.0, x)
    sig = 1.0 / (1.0 + np.exp(-x))
    n = x.size

    def bw(g):
        logits._accum(g * (sig - y) / n)

    return T._result(np.array((sp - y * x).sum() / n), (logits,), bw)


def train_probe(
    train: EmbeddingTable,
    val: EmbeddingTable,
    test: EmbeddingTable,
    n_classes: int,
    lr: float = 1e-4,
    batch_size: int = 128,
    patience: int = 10,
    max_epochs: int = 200,
    seed: int = 0,
    weight_decay: float = 0.0,
) -> ProbeResult:
    """Fit ``W x + b`` on standardised embeddings; keep the parameters from
    the epoch with the lowest validation loss."""
    for name, t in (("train", train), ("val", val), ("test", test)):
        if len(t) == 0:
            raise InputError(f"empty {name} split")
    kind = train.kind
    mu = train.rows.mean(axis=0)
    sd = np.maximum(train.rows.std(axis=0), 1e-8)
    xs = [(t.rows - mu) / sd for t in (train, val, test)]
    ys = [_targets(t, n_classes) for t in (train, val, test)]
    rng = np.random.default_rng(seed)
    d = xs[0].shape[1]
    params = {
        "weight": T.parameter(np.zeros((d, n_classes)), "weight"),
        "bias": T.parameter(np.zeros(n_classes), "bias"),
    }
    opt = OptimizerState.for_params(params, lr=lr, weight_decay=weight_decay, no_decay=frozenset({"bias"}))
    bs = min(batch_size, len(train))

    def val_loss() -> float:
        with T.no_grad():
            return _loss(T.as_tensor(xs[1]) @ params["weight"] + params["bias"], ys[1], kind).item()

    best = (val_loss(), 0, params["weight"].data.copy(), params["bias"].data.copy())
    history = [best[0]]
    since = 0
    for epoch in range(1, max_epochs + 1):
        order = rng.permutation(len(train))
        for s in range(0, len(order), bs):
            b = order[s : s + bs]
            T.zero_grad(params.values())
            loss = _loss(T.as_tensor(xs[0][b]) @ params["weight"] + params["bias"], ys[0][b], kind)
            T.backward(loss, params.values())
            adamw_step(params, opt)
        v = val_loss()
        history.append(v)
        if v < best[0]:
            best, since = (v, epoch, params["weight"].data.copy(), params["bias"].data.copy()), 0
        else:
            since += 1
            if since >= patience:
                break
    _, epoch, W, b = best
    scores = xs[2] @ W + b
    if kind == MULTICLASS:
        value, per = accuracy(np.argmax(scores, axis=1), test.labels)
        metric = "accuracy"
    else:
        value, per = mean_average_precision(scores, test.labels, return_per_class=True)
        metric = "mAP"
    return ProbeResult(metric, value, per, epoch, history, W, b)


def write_results(path: str | os.PathLike, rows: list[tuple[str, ProbeResult]]) -> None:
    """CSV ``task,metric,value,epoch``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task", "metric", "value", "epoch"])
        for task, res in rows:
            w.writerow([task, res.metric, repr(float(res.value)), res.epoch])


# -- tasks -----------------------------------------------------------------
def task_splits(cfg):
    """``(train, val, test, n_classes)`` datasets for ``cfg.probe.task``."""
    from .data import EVENT_CLASSES, EventTaskDataset, ManifestDataset

    p, mel = cfg.probe, cfg.data.mel()
    if p.task == "events4":
        out = []
        for k, n in enumerate((p.n_train, p.n_val, p.n_test)):
            out.append(EventTaskDataset(n, cfg.data.clip_seconds, mel, p.data_seed * 10 + k))
        return (*out, len(EVENT_CLASSES))
    if p.task == "manifest":
        if not cfg.data.manifest:
            raise InputError("probe.task = 'manifest' needs data.manifest")
        splits = [ManifestDataset(cfg.data.manifest, mel, split=s) for s in ("train", "val", "test")]
        classes = splits[0].classes
        return (*splits, len(classes))
    raise InputError(f"unknown probe task {p.task!r}")


def probe_checkpoint(state, cfg, seeds=None) -> list[ProbeResult]:
    """Embed the task splits once with ``state`` and fit one probe per seed."""
    train_ds, val_ds, test_ds, C = task_splits(cfg)
    tables = [extract_embeddings(state, ds) for ds in (train_ds, val_ds, test_ds)]
    p = cfg.probe
    return [
        train_probe(*tables, C, lr=p.lr, batch_size=p.batch_size, patience=p.patience, max_epochs=p.max_epochs, seed=s)
        for s in (p.seeds if seeds is None else seeds)
    ]
