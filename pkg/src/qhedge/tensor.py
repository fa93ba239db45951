"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records every operation whose inputs include a tracked
tensor. :func:`backward` then sweeps the tape once in reverse order.
Tensors that never touch a tape (``Tensor(value)``) are constants and cost
nothing to differentiate, which is how evaluation runs without recording.

Only scalar-times-tensor broadcasting is implicit; row broadcasting of a
bias is the explicit :func:`add_bias` op.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import NotScalar, ShapeMismatch, TapeConsumed

_SOFTPLUS_CUT = 20.0


class Tape:
    def __init__(self):
        self.ops: list[str] = []
        self.inputs: list[tuple] = []
        self.vjps: list[Callable | None] = []
        self.leaves: dict[int, tuple] = {}
        self.consumed = False

    def __len__(self):
        return len(self.ops)

    def leaf(self, value) -> "Tensor":
        """Register a differentiable input (parameter)."""
        t = Tensor(value)
        t.tape = self
        t.node = len(self.ops)
        self.ops.append("leaf")
        self.inputs.append(())
        self.vjps.append(None)
        self.leaves[t.node] = t.value.shape
        return t

    def clear(self) -> None:
        self.__init__()

    def _push(self, op, args, value, vjp) -> "Tensor":
        if self.consumed:
            raise TapeConsumed("tape already used by backward(); record a new one")
        t = Tensor.__new__(Tensor)
        t.value = value
        t.tape = self
        t.node = len(self.ops)
        self.ops.append(op)
        self.inputs.append(tuple(a.node if a.tape is self else None for a in args))
        self.vjps.append(vjp)
        return t


class Tensor:
    __slots__ = ("value", "tape", "node")
    # make ndarray <op> Tensor defer to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = None
        self.node = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def tracked(self) -> bool:
        return self.node is not None

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        tag = f", node={self.node}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        if _is_scalar(other):
            return shift(self, float(other))
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if _is_scalar(other):
            return shift(self, -float(other))
        return sub(self, other)

    def __rsub__(self, other):
        if _is_scalar(other):
            return shift(scale(self, -1.0), float(other))
        return sub(other, self)

    def __mul__(self, other):
        if _is_scalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if not _is_scalar(other):
            raise ShapeMismatch("only division by a scalar is supported")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer)) or (
        isinstance(x, np.ndarray) and x.ndim == 0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op, args, value, vjp) -> Tensor:
    for a in args:
        if a.tape is not None:
            return a.tape._push(op, args, value, vjp)
    return Tensor(value)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.value.shape != b.value.shape:
        raise ShapeMismatch(f"{op}: shapes {a.value.shape} and {b.value.shape} differ")


# ---------------------------------------------------------------------------
# Elementwise ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _record("add", (a, b), a.value + b.value, lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _record("sub", (a, b), a.value - b.value, lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    av, bv = a.value, b.value
    need_a, need_b = a.tracked, b.tracked
    return _record("mul", (a, b), av * bv,
                   lambda g: (g * bv if need_a else None, g * av if need_b else None))


def scale(a: Tensor, c: float) -> Tensor:
    return _record("scale", (a,), a.value * c, lambda g: (g * c,))


def shift(a: Tensor, c: float) -> Tensor:
    return _record("shift", (a,), a.value + c, lambda g: (g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)
    return _record("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    av = a.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(av)
    return _record("log", (a,), out, lambda g: (g / av,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)
    return _record("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # 0.5*(1+tanh(x/2)) is exact in the tails and never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.value)
    return _record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def softplus_value(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    mid = np.clip(x, -_SOFTPLUS_CUT, _SOFTPLUS_CUT)
    # both branches of np.where are evaluated, so feed exp only nonpositive arguments
    return np.where(x > _SOFTPLUS_CUT, x + np.exp(-np.maximum(x, 0.0)),
                    np.where(x < -_SOFTPLUS_CUT, np.exp(np.minimum(x, 0.0)), np.log1p(np.exp(mid))))


def softplus(a: Tensor) -> Tensor:
    av = a.value
    return _record("softplus", (a,), softplus_value(av), lambda g: (g * _sigmoid(av),))


def square(a: Tensor) -> Tensor:
    av = a.value
    return _record("square", (a,), av * av, lambda g: (2.0 * g * av,))


# ---------------------------------------------------------------------------
# Structural ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeMismatch(f"matmul: {a.value.shape} @ {b.value.shape}")
    av, bv = a.value, b.value
    need_a, need_b = a.tracked, b.tracked
    return _record("matmul", (a, b), av @ bv,
                   lambda g: (g @ bv.T if need_a else None, av.T @ g if need_b else None))


def transpose(a: Tensor) -> Tensor:
    if a.value.ndim != 2:
        raise ShapeMismatch("transpose expects a matrix")
    return _record("transpose", (a,), a.value.T, lambda g: (g.T,))


def add_bias(a: Tensor, b: Tensor) -> Tensor:
    """Add a length-n vector to every row of an (m x n) matrix."""
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.shape != (a.value.shape[1],):
        raise ShapeMismatch(f"add_bias: {a.value.shape} + {b.value.shape}")
    return _record("add_bias", (a, b), a.value + b.value, lambda g: (g, g.sum(axis=0)))


def broadcast_rows(a: Tensor, m: int) -> Tensor:
    """Repeat a (1 x n) row m times."""
    if a.value.ndim != 2 or a.value.shape[0] != 1:
        raise ShapeMismatch("broadcast_rows expects a 1 x n tensor")
    out = np.repeat(a.value, m, axis=0)
    return _record("broadcast_rows", (a,), out, lambda g: (g.sum(axis=0, keepdims=True),))


def columns(a: Tensor, start: int, stop: int) -> Tensor:
    """Column slice ``a[:, start:stop]``."""
    shape = a.value.shape

    def vjp(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _record("columns", (a,), a.value[:, start:stop], vjp)


def total(a: Tensor) -> Tensor:
    shape = a.value.shape
    return _record("sum", (a,), np.asarray(a.value.sum()), lambda g: (np.full(shape, g),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.value.shape, a.value.size
    return _record("mean", (a,), np.asarray(a.value.mean()), lambda g: (np.full(shape, g / n),))


# ---------------------------------------------------------------------------
# Reverse sweep


class Gradients(dict):
    """Map node id -> gradient, with lookup by tensor as a convenience."""

    def of(self, t: Tensor) -> np.ndarray:
        if t.node is None:
            raise KeyError("constant tensor has no gradient")
        return self[t.node]


def backward(loss: Tensor) -> Gradients:
    """Gradients of a scalar ``loss`` w.r.t. every leaf of its tape."""
    if loss.value.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.value.shape}")
    tape = loss.tape
    if tape is None:
        return Gradients()
    if tape.consumed:
        raise TapeConsumed("backward already called on this tape")
    tape.consumed = True
    n = loss.node + 1
    grads: list = [None] * n
    grads[loss.node] = np.ones_like(loss.value)
    inputs, vjps = tape.inputs, tape.vjps
    for node in range(n - 1, -1, -1):
        g = grads[node]
        if g is None or vjps[node] is None:
            continue
        ids = inputs[node]
        contribs = vjps[node](g)
        for nid, c in zip(ids, contribs):
            if nid is None or c is None:
                continue
            prev = grads[nid]
            grads[nid] = c if prev is None else prev + c
        if node != loss.node:
            grads[node] = None
    out = Gradients()
    for leaf, shape in tape.leaves.items():
        g = grads[leaf] if leaf < n else None
        out[leaf] = g if g is not None else np.zeros(shape)
    return out


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5, floor: float = 1e-3) -> float:
    """Max relative error between the tape gradient of ``f`` at ``x`` and
    central finite differences with step ``h``.

    The denominator is ``max(|analytic|, |numeric|, floor)``: below ``floor``
    the finite difference is dominated by rounding, so the error is measured
    in absolute terms there.
    """
    x = np.array(x, dtype=np.float64)
    tape = Tape()
    xt = tape.leaf(x)
    grads = backward(f(xt))
    analytic = grads.of(xt)
    numeric = np.empty_like(x)
    flat = x.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(x.copy())).value)
        flat[i] = orig - h
        fm = float(f(Tensor(x.copy())).value)
        flat[i] = orig
        num_flat[i] = (fp - fm) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
