"""Hot-loop dispatch: the compiled extension when it is built, otherwise the
numpy fallback. Set ``MCLATENT_PURE_PYTHON=1`` to force the fallback."""

from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("MCLATENT_PURE_PYTHON", "") in ("", "0"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "compiled"


def mcl_annealed(d: np.ndarray, tau: float, impl=None):
    """Row-wise annealed winner-takes-all: returns ``(loss_rows, b, dloss/dd)``
    for a 2-D distance matrix ``d`` (rows = targets, cols = hypotheses)."""
    d = np.ascontiguousarray(d, dtype=np.float64)
    return (impl or _impl).mcl_annealed(d, float(tau))


def kmeans_assign(x: np.ndarray, c: np.ndarray, impl=None):
    x = np.ascontiguousarray(x, dtype=np.float64)
    c = np.ascontiguousarray(c, dtype=np.float64)
    return (impl or _impl).kmeans_assign(x, c)


def average_precision(scores: np.ndarray, labels: np.ndarray, impl=None) -> float:
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    return float((impl or _impl).average_precision(scores, labels))


def implementations() -> dict:
    """Every importable backend, keyed by name (for tests and benchmarks)."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        out["compiled"] = _compiled
    return out
