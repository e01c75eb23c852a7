"""Reverse-mode automatic differentiation over float32 numpy storage.

A small tape engine: every differentiable op builds a node holding its parent
tensors and a list of vector-Jacobian closures.  ``Tensor.backward`` walks the
graph in reverse topological order and accumulates ``.grad`` arrays on every
tensor that requires gradients.  Data is always float32; gradient math runs in
float32 as well.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True
_FINITE_CHECKS = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction (inference / sampler hot loops)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def finite_checks(enabled: bool):
    """Toggle per-op NaN/Inf screening.

    Screening is on by default; training loops may switch it off for speed and
    re-check at step boundaries instead.
    """
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = enabled
    try:
        yield
    finally:
        _FINITE_CHECKS = prev


def _as_f32(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float32)
    return arr


def _check_finite(arr: np.ndarray, ctx: str) -> None:
    if _FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {ctx}")


class Tensor:
    """Dense float32 array plus optional autodiff bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjps", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_f32(data)
        _check_finite(self.data, "tensor construction")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjps: tuple[Callable[[np.ndarray], np.ndarray], ...] = ()
        self.name = name

    # -- plumbing ---------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, grad={self.requires_grad}{tag})"

    # -- graph ------------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients of self w.r.t. every reachable tensor."""
        if grad is None:
            if self.size != 1:
                raise ValueError("backward() without an explicit seed needs a scalar")
            grad = np.ones_like(self.data)
        else:
            grad = _as_f32(grad)
            if grad.shape != self.data.shape:
                raise ValueError("seed gradient shape mismatch")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = g.copy() if node._parents else g.astype(np.float32)
                else:
                    node.grad = node.grad + g
            for parent, vjp in zip(node._parents, node._vjps):
                if not _needs_graph(parent):
                    continue
                pg = vjp(g).astype(np.float32, copy=False)
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # -- operator sugar -----------------------------------------------------

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes: Sequence[int]):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """Trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


def _needs_graph(t: Tensor) -> bool:
    return t.requires_grad or bool(t._parents)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Iterable[Tensor], vjps, ctx: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == np.float32 else data.astype(np.float32)
    _check_finite(out.data, ctx)
    out.grad = None
    out.name = None
    parents = tuple(parents)
    if _GRAD_ENABLED and any(_needs_graph(p) for p in parents):
        out.requires_grad = False
        out._parents = parents
        out._vjps = tuple(vjps)
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjps = ()
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data
    return _node(
        out,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data - b.data
    return _node(
        out,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data
    return _node(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.data, a.shape),
            lambda g: _unbroadcast(g * a.data, b.shape),
        ),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if _FINITE_CHECKS and np.any(b.data == 0.0):
        raise FloatingPointError("division by zero")
    out = a.data / b.data
    return _node(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g / b.data, a.shape),
            lambda g: _unbroadcast(-g * out / b.data, b.shape),
        ),
        "div",
    )


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data @ b.data

    def vjp_a(g):
        return _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)

    def vjp_b(g):
        return _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)

    return _node(out, (a, b), (vjp_a, vjp_b), "matmul")


# -- elementwise nonlinearities ---------------------------------------------


def relu(x) -> Tensor:
    x = _wrap(x)
    out = np.maximum(x.data, 0.0)
    return _node(out, (x,), (lambda g: g * (x.data > 0),), "relu")


def tanh(x) -> Tensor:
    x = _wrap(x)
    out = np.tanh(x.data)
    return _node(out, (x,), (lambda g: g * (1.0 - out * out),), "tanh")


def exp(x) -> Tensor:
    x = _wrap(x)
    out = np.exp(x.data)
    _check_finite(out, "exp")
    return _node(out, (x,), (lambda g: g * out,), "exp")


def sigmoid(x) -> Tensor:
    x = _wrap(x)
    out = 1.0 / (1.0 + np.exp(-x.data))
    return _node(out, (x,), (lambda g: g * out * (1.0 - out),), "sigmoid")


def log(x) -> Tensor:
    x = _wrap(x)
    if np.any(x.data <= 0):
        raise FloatingPointError("log of non-positive value")
    out = np.log(x.data)
    return _node(out, (x,), (lambda g: g / x.data,), "log")


def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (g - dot) * out

    return _node(out, (x,), (vjp,), "softmax")


# -- shape ops ---------------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = _wrap(x)
    out = x.data.reshape(shape)
    return _node(out, (x,), (lambda g: g.reshape(x.shape),), "reshape")


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = _wrap(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return _node(out, (x,), (lambda g: np.transpose(g, inv),), "transpose")


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=np.float32)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, x.shape).astype(np.float32)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return np.broadcast_to(g, x.shape).astype(np.float32)

    return _node(out, (x,), (vjp,), "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    if axis is None:
        count = x.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in ax]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def gather_rows(table, idx) -> Tensor:
    """Row lookup ``table[idx]`` along axis 0 (embedding tables)."""
    table = _wrap(table)
    idx = np.asarray(idx, dtype=np.int64)
    out = np.take(table.data, idx, axis=0)

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return gt

    return _node(out, (table,), (vjp,), "gather_rows")


def take_axis(x, idx, axis: int) -> Tensor:
    """Gather slices along ``axis`` (joint unpooling)."""
    x = _wrap(x)
    idx = np.asarray(idx, dtype=np.int64)
    out = np.take(x.data, idx, axis=axis)

    def vjp(g):
        gx = np.zeros_like(x.data)
        sl: list = [slice(None)] * x.ndim
        for pos, j in enumerate(idx):
            sl_axis = list(sl)
            sl_axis[axis] = pos
            tgt = list(sl)
            tgt[axis] = int(j)
            gx[tuple(tgt)] += g[tuple(sl_axis)]
        return gx

    return _node(out, (x,), (vjp,), "take_axis")


# -- initializers -------------------------------------------------------------


def randn(rng: np.random.Generator, *shape, scale: float = 1.0) -> np.ndarray:
    return (rng.standard_normal(shape) * scale).astype(np.float32)


def he_init(rng: np.random.Generator, fan_in: int, *shape) -> np.ndarray:
    return randn(rng, *shape, scale=float(np.sqrt(2.0 / max(fan_in, 1))))
