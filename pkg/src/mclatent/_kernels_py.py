"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``."""

from __future__ import annotations

import numpy as np

_CHUNK = 2048


def mcl_annealed(d: np.ndarray, tau: float):
    z = -(d - d.min(axis=1, keepdims=True)) / tau
    e = np.exp(z)
    b = e / e.sum(axis=1, keepdims=True)
    loss = (b * d).sum(axis=1)
    g = b * (1.0 - (d - loss[:, None]) / tau)
    return loss, b, g


def kmeans_assign(x: np.ndarray, c: np.ndarray):
    m = x.shape[0]
    lab = np.empty(m, dtype=np.int64)
    dist = np.empty(m, dtype=np.float64)
    for lo in range(0, m, _CHUNK):
        blk = x[lo : lo + _CHUNK]
        dd = ((blk[:, None, :] - c[None, :, :]) ** 2).sum(axis=-1)
        a = dd.argmin(axis=1)
        lab[lo : lo + len(blk)] = a
        dist[lo : lo + len(blk)] = dd[np.arange(len(blk)), a]
    return lab, dist


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    order = np.argsort(-scores, kind="stable")
    hits = labels[order].astype(bool)
    if not hits.any():
        return float("nan")
    ranks = np.flatnonzero(hits) + 1
    return float((np.arange(1, len(ranks) + 1) / ranks).mean())
