# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. Semantics mirror ``_kernels_py`` exactly; the test
suite runs both and compares."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


def mcl_annealed(const double[:, ::1] d, double tau):
    """Per row: b = softmax(-d/tau), loss = sum_j b_j d_j and
    dloss/dd_j = b_j (1 - (d_j - loss)/tau)."""
    cdef Py_ssize_t n = d.shape[0], r = d.shape[1], i, j
    loss_np = np.empty(n, dtype=np.float64)
    b_np = np.empty((n, r), dtype=np.float64)
    g_np = np.empty((n, r), dtype=np.float64)
    cdef double[::1] loss = loss_np
    cdef double[:, ::1] b = b_np
    cdef double[:, ::1] g = g_np
    cdef double dmin, s, acc, inv_tau = 1.0 / tau
    for i in range(n):
        dmin = d[i, 0]
        for j in range(1, r):
            if d[i, j] < dmin:
                dmin = d[i, j]
        s = 0.0
        for j in range(r):
            b[i, j] = exp(-(d[i, j] - dmin) * inv_tau)
            s += b[i, j]
        acc = 0.0
        for j in range(r):
            b[i, j] /= s
            acc += b[i, j] * d[i, j]
        loss[i] = acc
        for j in range(r):
            g[i, j] = b[i, j] * (1.0 - (d[i, j] - acc) * inv_tau)
    return loss_np, b_np, g_np


def kmeans_assign(const double[:, ::1] x, const double[:, ::1] c):
    """Nearest centroid by squared Euclidean distance; ties go to the lowest
    centroid index."""
    cdef Py_ssize_t m = x.shape[0], k = c.shape[0], dim = x.shape[1], i, j, t
    lab_np = np.empty(m, dtype=np.int64)
    dist_np = np.empty(m, dtype=np.float64)
    cdef cnp.int64_t[::1] lab = lab_np
    cdef double[::1] dist = dist_np
    cdef double best, acc, diff
    cdef cnp.int64_t arg
    for i in range(m):
        best = -1.0
        arg = 0
        for j in range(k):
            acc = 0.0
            for t in range(dim):
                diff = x[i, t] - c[j, t]
                acc += diff * diff
            if best < 0.0 or acc < best:
                best = acc
                arg = j
        lab[i] = arg
        dist[i] = best
    return lab_np, dist_np


def average_precision(const double[::1] scores, const cnp.uint8_t[::1] labels):
    """Rank-based AP: mean over positives of precision at their rank. Ties in
    score keep input order."""
    order_np = np.argsort(-np.asarray(scores), kind="stable")
    cdef cnp.int64_t[::1] order = order_np.astype(np.int64)
    cdef Py_ssize_t n = scores.shape[0], i
    cdef double hits = 0.0, total = 0.0
    for i in range(n):
        if labels[order[i]]:
            hits += 1.0
            total += hits / (i + 1)
    if hits == 0.0:
        return float("nan")
    return total / hits
