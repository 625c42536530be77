"""Array-valued reverse-mode autodiff over a small, fixed op vocabulary.

Every op returns a new :class:`Tensor`. When gradient recording is enabled and
at least one input requires a gradient, the result keeps a reference to its
parents and a closure that maps the output gradient onto them. ``backward``
walks that graph in reverse topological order.

Values are float64 numpy arrays. Tensors are treated as immutable; the only
sanctioned in-place mutation is the optimizer/EMA writing to ``.data`` of leaf
parameters.
"""

from __future__ import annotations

import contextlib
import os
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from ..errors import NonFiniteError, ShapeError, UsageError

_grad_enabled = True
# Per-op finiteness checks; costs one isfinite() per op.
DEBUG = os.environ.get("MCLATENT_DEBUG", "") not in ("", "0")

_SQRT_HALF = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_debug(flag: bool) -> None:
    global DEBUG
    DEBUG = bool(flag)


def check_finite(arr: np.ndarray, what: str = "tensor") -> None:
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NonFiniteError(f"{what}: {bad} non-finite value(s)")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def backward(self, params: Iterable[Tensor] | None = None) -> None:
        backward(self, params)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True, name=name)


def _result(data: np.ndarray, parents: Sequence[Tensor], bw) -> Tensor:
    if DEBUG:
        check_finite(data, "op output")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = bw
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise arithmetic ------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * out / b.data, b.shape))

    return _result(out, (a, b), bw)


def square(x: Tensor) -> Tensor:
    def bw(g):
        x._accum(2.0 * x.data * g)

    return _result(x.data * x.data, (x,), bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bw(g):
        x._accum(g * out)

    return _result(out, (x,), bw)


def log(x: Tensor, clamp: float = 0.0) -> Tensor:
    """Natural log; with ``clamp > 0`` inputs below ``clamp`` are raised to it
    and receive zero gradient."""
    if clamp > 0.0:
        safe = np.maximum(x.data, clamp)
        live = x.data > clamp
    else:
        safe = x.data
        live = None

    def bw(g):
        gx = g / safe
        if live is not None:
            gx = np.where(live, gx, 0.0)
        x._accum(gx)

    return _result(np.log(safe), (x,), bw)


def gelu(x: Tensor) -> Tensor:
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT_HALF))

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        x._accum(g * (cdf + x.data * pdf))

    return _result(x.data * cdf, (x,), bw)


# -- reductions and shape ops ---------------------------------------------
def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accum(np.broadcast_to(g, x.shape))

    return _result(np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    def bw(g):
        x._accum(g.reshape(x.shape))

    return _result(x.data.reshape(shape), (x,), bw)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        x._accum(g.transpose(inv))

    return _result(x.data.transpose(axes), (x,), bw)


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def getitem(x: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing only; advanced indexing goes through
    :func:`take_along_axis`."""

    def bw(g):
        full = np.zeros(x.shape)
        full[key] += g
        x._accum(full)

    return _result(x.data[key], (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return _result(np.concatenate([t.data for t in xs], axis=axis), xs, bw)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]

    def bw(g):
        parts = np.moveaxis(g, axis, 0)
        for t, gp in zip(xs, parts):
            if t.requires_grad:
                t._accum(gp)

    return _result(np.stack([t.data for t in xs], axis=axis), xs, bw)


def take_along_axis(x: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """Gather with ``np.take_along_axis`` semantics.

    Indices must not repeat along ``axis`` within one slice; the backward pass
    scatters with assignment, not accumulation.
    """
    indices = np.asarray(indices)
    out = np.take_along_axis(x.data, indices, axis=axis)

    def bw(g):
        full = np.zeros(x.shape)
        np.put_along_axis(full, np.broadcast_to(indices, g.shape), g, axis=axis)
        x._accum(full)

    return _result(out, (x,), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with ndim >= 2")

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _result(a.data @ b.data, (a, b), bw)


def min_select(x: Tensor, axis: int = -1) -> tuple[Tensor, np.ndarray]:
    """Minimum along ``axis``; the gradient goes to the first argmin only."""
    idx = np.argmin(x.data, axis=axis)
    keep = np.expand_dims(idx, axis)
    vals = np.take_along_axis(x.data, keep, axis=axis).squeeze(axis)

    def bw(g):
        full = np.zeros(x.shape)
        np.put_along_axis(full, keep, np.expand_dims(g, axis), axis=axis)
        x._accum(full)

    return _result(vals, (x,), bw), idx


# -- fused numerics --------------------------------------------------------
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    check_finite(x.data, "softmax input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        x._accum(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _result(out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    check_finite(x.data, "log_softmax input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        p = np.exp(out)
        x._accum(g - p * g.sum(axis=axis, keepdims=True))

    return _result(out, (x,), bw)


def layer_norm(x: Tensor, scale: Tensor, offset: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if d == 0:
        raise ShapeError("layer_norm over a zero-length feature axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * scale.data + offset.data

    def bw(g):
        if scale.requires_grad:
            scale._accum(_unbroadcast(g * xhat, scale.shape))
        if offset.requires_grad:
            offset._accum(_unbroadcast(g, offset.shape))
        if x.requires_grad:
            gh = g * scale.data
            x._accum(
                rstd
                * (
                    gh
                    - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
                )
            )

    return _result(out, (x, scale, offset), bw)


def l2_normalize(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Divide each last-axis row by ``max(norm, eps)``."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    clamped = norm < eps
    den = np.where(clamped, eps, norm)
    out = x.data / den

    def bw(g):
        proj = np.where(clamped, 0.0, (g * out).sum(axis=-1, keepdims=True))
        x._accum((g - out * proj) / den)

    return _result(out, (x,), bw)


# -- graph traversal -------------------------------------------------------
def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every reachable tensor.

    Tensors listed in ``params`` that the loss does not reach get a zero
    gradient buffer so downstream consumers never see ``None``.
    """
    if loss.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss.requires_grad:
        order = _topo(loss)
        loss._accum(np.ones_like(loss.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # intermediates do not keep their buffers
        for node in order:
            if node._backward is not None:
                node.grad = None
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
