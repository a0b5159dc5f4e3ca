"""Reverse-mode automatic differentiation on a linear recording.

A :class:`Tape` records every operation applied to :class:`TapeValue`
objects. Values are numpy arrays (0-d for scalars) and elementwise ops
broadcast like numpy. :meth:`Tape.backward` walks the recording once in
reverse order and returns the adjoint of every leaf.

Plain floats and arrays mixed into an operation are constants; they are not
recorded and receive no gradient.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class NumericDomainError(ArithmeticError):
    def __init__(self, op: str, value):
        self.op = op
        self.value = value
        super().__init__(f"{op}: operand outside domain ({value!r})")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tape:
    """Append-only recording for one forward/backward step."""

    def __init__(self):
        self._parents: list[tuple] = []
        self._leaf: list[bool] = []

    def __len__(self) -> int:
        return len(self._parents)

    def leaf(self, value) -> "TapeValue":
        return self._push(_as_real(value), (), leaf=True)

    def _push(self, value, parents, leaf=False) -> "TapeValue":
        idx = len(self._parents)
        self._parents.append(parents)
        self._leaf.append(leaf)
        return TapeValue(value, self, idx, leaf)

    def record(self, op: str, *inputs, **kwargs) -> "TapeValue":
        """Apply a named primitive, e.g. ``tape.record("mul", x, y)``."""
        try:
            fn = OPS[op]
        except KeyError:
            raise ValueError(f"unknown op {op!r}") from None
        for x in inputs:
            if isinstance(x, TapeValue) and x.tape is not self:
                raise ValueError("inputs belong to a different recording")
        return fn(*inputs, **kwargs)

    def backward(self, output: "TapeValue") -> "GradientMap":
        if output.tape is not self:
            raise ValueError("output belongs to a different recording")
        if output.value.size != 1:
            raise ValueError("backward needs a scalar output")
        adj: list = [None] * (output.index + 1)
        adj[output.index] = np.ones_like(output.value)
        for i in range(output.index, -1, -1):
            g = adj[i]
            if g is None:
                continue
            for p, vjp in self._parents[i]:
                contrib = vjp(g)
                adj[p] = contrib if adj[p] is None else adj[p] + contrib
        grads = GradientMap()
        for i, is_leaf in enumerate(self._leaf):
            if is_leaf:
                grads[i] = adj[i] if i < len(adj) and adj[i] is not None else None
        return grads


class GradientMap(dict):
    """Leaf index -> accumulated adjoint. Unreached leaves map to zeros."""

    def wrt(self, leaf: "TapeValue") -> np.ndarray:
        g = self.get(leaf.index)
        if g is None:
            return np.zeros_like(leaf.value)
        return np.asarray(g, dtype=float).reshape(leaf.value.shape)


class TapeValue:
    __slots__ = ("value", "tape", "index", "leaf")
    __array_priority__ = 100.0

    def __init__(self, value, tape: Tape, index: int, leaf: bool = False):
        self.value = value
        self.tape = tape
        self.index = index
        self.leaf = leaf

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"TapeValue({self.value!r})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def _as_real(x) -> np.ndarray:
    """Float array; extended-precision input keeps its dtype."""
    x = np.asarray(x)
    return x if x.dtype == np.longdouble else x.astype(float, copy=False)


def value_of(x):
    return x.value if isinstance(x, TapeValue) else _as_real(x)


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, TapeValue):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError("inputs belong to different recordings")
    return tape


def _node(value, pairs):
    """Record ``value`` with (input, vjp) pairs; constants are skipped."""
    live = [(x, fn) for x, fn in pairs if isinstance(x, TapeValue)]
    if not live:
        return value
    tape = live[0][0].tape
    if any(x.tape is not tape for x, _ in live):
        raise ValueError("inputs belong to different recordings")
    return tape._push(value, tuple((x.index, fn) for x, fn in live))


def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    return _node(out, [(a, lambda g: _unbroadcast(g, av.shape)), (b, lambda g: _unbroadcast(g, bv.shape))])


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    return _node(out, [(a, lambda g: _unbroadcast(g, av.shape)), (b, lambda g: _unbroadcast(-g, bv.shape))])


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    return _node(out, [(a, lambda g: _unbroadcast(g * bv, av.shape)), (b, lambda g: _unbroadcast(g * av, bv.shape))])


def div(a, b):
    av, bv = value_of(a), value_of(b)
    if np.any(bv == 0):
        raise NumericDomainError("div", bv)
    out = av / bv
    return _node(
        out,
        [
            (a, lambda g: _unbroadcast(g / bv, av.shape)),
            (b, lambda g: _unbroadcast(-g * out / bv, bv.shape)),
        ],
    )


def neg(a):
    return _node(-value_of(a), [(a, lambda g: -g)])


def sin(a):
    av = value_of(a)
    return _node(np.sin(av), [(a, lambda g: g * np.cos(av))])


def cos(a):
    av = value_of(a)
    return _node(np.cos(av), [(a, lambda g: -g * np.sin(av))])


def exp(a):
    out = np.exp(value_of(a))
    return _node(out, [(a, lambda g: g * out)])


def log(a):
    av = value_of(a)
    if np.any(av <= 0):
        raise NumericDomainError("log", av)
    return _node(np.log(av), [(a, lambda g: g / av)])


def sqrt(a):
    av = value_of(a)
    if np.any(av < 0):
        raise NumericDomainError("sqrt", av)
    out = np.sqrt(av)
    return _node(out, [(a, lambda g: g * 0.5 / out)])


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softplus_value(x):
    x = _as_real(x)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid_value(x):
    x = _as_real(x)
    return _sigmoid(np.atleast_1d(x)).reshape(x.shape)


def softplus(a):
    av = value_of(a)
    s = sigmoid_value(av)
    return _node(softplus_value(av), [(a, lambda g: g * s)])


def sigmoid(a):
    out = sigmoid_value(value_of(a))
    return _node(out, [(a, lambda g: g * out * (1.0 - out))])


def floor_min(a, lower: float):
    """max(a, lower) with the gradient passing only where a > lower."""
    av = value_of(a)
    mask = av > lower
    return _node(np.where(mask, av, lower), [(a, lambda g: g * mask)])


def sum_(a, axis=None, keepdims=False):
    av = value_of(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, av.shape).copy()

    return _node(np.asarray(out), [(a, vjp)])


def mean(a, axis=None, keepdims=False):
    av = value_of(a)
    count = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def dot(a, b):
    av, bv = value_of(a), value_of(b)
    if av.ndim != 1 or bv.ndim != 1:
        raise ValueError("dot expects two vectors")
    return _node(np.asarray(av @ bv), [(a, lambda g: g * bv), (b, lambda g: g * av)])


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    a2 = av[None, :] if av.ndim == 1 else av
    b2 = bv[:, None] if bv.ndim == 1 else bv
    out2 = a2 @ b2
    out = out2
    if av.ndim == 1:
        out = out[..., 0, :]
    if bv.ndim == 1:
        out = out[..., 0]

    def restore(g):
        if av.ndim == 1:
            g = np.expand_dims(g, -2)
        if bv.ndim == 1:
            g = np.expand_dims(g, -1)
        return g

    def vjp_a(g):
        ga = restore(g) @ np.swapaxes(b2, -1, -2)
        ga = _unbroadcast(ga, a2.shape)
        return ga.reshape(av.shape)

    def vjp_b(g):
        gb = np.swapaxes(a2, -1, -2) @ restore(g)
        gb = _unbroadcast(gb, b2.shape)
        return gb.reshape(bv.shape)

    return _node(out, [(a, vjp_a), (b, vjp_b)])


def reshape(a, shape):
    av = value_of(a)
    return _node(av.reshape(shape), [(a, lambda g: g.reshape(av.shape))])


def swapaxes(a, i, j):
    av = value_of(a)
    return _node(np.swapaxes(av, i, j), [(a, lambda g: np.swapaxes(g, i, j))])


def getitem(a, key):
    av = value_of(a)
    parts = key if isinstance(key, tuple) else (key,)
    advanced = any(isinstance(k, (list, np.ndarray)) for k in parts)

    def vjp(g):
        out = np.zeros_like(av)
        if advanced:
            np.add.at(out, key, g)
        else:
            out[key] = g
        return out

    return _node(np.asarray(av[key]), [(a, vjp)])


def concat(items: Sequence, axis: int = 0):
    vals = [value_of(x) for x in items]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])
    pairs = []
    for x, lo, hi in zip(items, bounds[:-1], bounds[1:]):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(lo, hi)
        key = tuple(sl)
        pairs.append((x, lambda g, key=key: g[key]))
    return _node(out, pairs)


def square(a):
    return mul(a, a)


OPS: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "sin": sin,
    "cos": cos,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "softplus": softplus,
    "sigmoid": sigmoid,
    "sum": sum_,
    "mean": mean,
    "dot": dot,
    "matmul": matmul,
    "reshape": reshape,
    "swapaxes": swapaxes,
    "getitem": getitem,
    "concat": concat,
    "floor_min": floor_min,
}


def eval_expr_on_tape(expr, state, coeffs):
    """Evaluate a symbolic expression with coefficient slots bound to tape values.

    ``state`` entries are constants (floats or per-sample arrays); ``coeffs``
    is a sequence of tape values or a single tape vector indexed per slot.
    """
    from .expr import evaluate_many

    if isinstance(coeffs, TapeValue):
        vec = coeffs
        coeffs = _LazyIndex(vec)
    return evaluate_many([expr], state, coeffs, sin_fn=sin, cos_fn=cos)[0]


class _LazyIndex:
    def __init__(self, vec: TapeValue):
        self.vec = vec
        self._cache: dict[int, TapeValue] = {}

    def __len__(self):
        return len(self.vec.value)

    def __getitem__(self, i):
        got = self._cache.get(i)
        if got is None:
            got = self._cache[i] = getitem(self.vec, i)
        return got


@dataclass
class GradcheckReport:
    max_rel_err: float
    analytic: np.ndarray
    numeric: np.ndarray
    coords: np.ndarray
    tol: float
    failures: list[int] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def relative_error(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def gradcheck(
    f: Callable[[TapeValue], TapeValue],
    point,
    h: float = 1e-5,
    tol: float = 1e-5,
    coords=None,
    extended: bool = False,
    richardson: bool = False,
) -> GradcheckReport:
    """Compare the reverse-mode gradient of ``f`` with central differences.

    ``f`` maps a tape vector to a scalar tape value. Only ``coords`` (default:
    all) are checked. With ``extended`` the difference quotients are taken in
    ``np.longdouble``, which keeps rounding noise below the tolerance when the
    loss is large compared with the gradient being checked. ``richardson``
    combines steps ``h`` and ``h/2`` into a fourth-order estimate, which
    allows a larger ``h`` and so less rounding noise.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    point = np.asarray(point, dtype=float).ravel()
    tape = Tape()
    x = tape.leaf(point)
    out = f(x)
    if isinstance(out, TapeValue):
        analytic_full = tape.backward(out).wrt(x)
    else:
        analytic_full = np.zeros_like(point)
    coords = np.arange(point.size) if coords is None else np.asarray(coords, dtype=int)

    fd_point = point.astype(np.longdouble) if extended else point

    def value_at(p):
        t = Tape()
        return value_of(f(t.leaf(p)))[()]

    def central(i, step):
        hi = fd_point.copy()
        lo = fd_point.copy()
        hi[i] += step
        lo[i] -= step
        return (value_at(hi) - value_at(lo)) / (hi[i] - lo[i])

    numeric = np.empty(len(coords))
    for n, i in enumerate(coords):
        if richardson:
            numeric[n] = float((4 * central(i, h / 2) - central(i, h)) / 3)
        else:
            numeric[n] = float(central(i, h))
    analytic = analytic_full[coords]
    rel = relative_error(analytic, numeric)
    failures = [int(c) for c, r in zip(coords, rel) if not r < tol]
    return GradcheckReport(float(rel.max(initial=0.0)), analytic, numeric, coords, tol, failures)
