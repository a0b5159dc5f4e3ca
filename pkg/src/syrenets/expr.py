"""Hash-consed symbolic expressions over a joint-space state layout.

Every node lives in an :class:`ExprStore` and is identified by a dense integer
id. Children always have smaller ids than their parents, so iterating ids in
increasing order is a valid topological order; all traversals below rely on
that instead of recursion.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum
from numbers import Real
from typing import Callable, Iterable, Sequence

import numpy as np


class Kind(IntEnum):
    VAR = 0
    COEFF = 1
    CONST = 2
    ADD = 3
    MUL = 4
    SIN = 5
    COS = 6


class SlotOutOfRangeError(IndexError):
    pass


@dataclass(frozen=True)
class StateLayout:
    """Maps (q, qd, qdd) of an ``n_joints`` system onto Var slots.

    Slots are ``q_i -> i``, ``qd_i -> n + i`` and ``qdd_i -> 2n + i``.
    """

    n_joints: int = 2

    @property
    def n_slots(self) -> int:
        return 3 * self.n_joints

    def q(self, i: int) -> int:
        return i

    def qd(self, i: int) -> int:
        return self.n_joints + i

    def qdd(self, i: int) -> int:
        return 2 * self.n_joints + i

    def is_acceleration(self, slot: int) -> bool:
        return slot >= 2 * self.n_joints

    def name(self, slot: int) -> str:
        n = self.n_joints
        if not 0 <= slot < 3 * n:
            raise SlotOutOfRangeError(f"var slot {slot} outside layout of {n} joints")
        prefix = ("q", "qd", "qdd")[slot // n]
        return f"{prefix}{slot % n + 1}"

    def slot(self, name: str) -> int:
        for k, prefix in enumerate(("qdd", "qd", "q")):
            if name.startswith(prefix) and name[len(prefix):].isdigit():
                i = int(name[len(prefix):]) - 1
                if not 0 <= i < self.n_joints:
                    break
                return (2 - k) * self.n_joints + i
        raise SlotOutOfRangeError(f"unknown variable {name!r}")


class ExprStore:
    """Append-only interning table for expression nodes."""

    def __init__(self, layout: StateLayout | None = None):
        self.layout = layout or StateLayout()
        self.kinds: list[Kind] = []
        self.args: list[tuple] = []
        self._index: dict[tuple, int] = {}

    def __len__(self) -> int:
        return len(self.kinds)

    def clone(self) -> "ExprStore":
        other = ExprStore(self.layout)
        other.kinds = list(self.kinds)
        other.args = list(self.args)
        other._index = dict(self._index)
        return other

    def intern(self, kind: Kind, *operands) -> "Expr":
        kind = Kind(kind)
        if kind in (Kind.VAR, Kind.COEFF):
            (slot,) = operands
            args = (int(slot),)
        elif kind is Kind.CONST:
            (value,) = operands
            value = float(value)
            if value != value:
                raise ValueError("NaN constants are not representable")
            args = (value + 0.0,)  # folds -0.0 into 0.0
        elif kind in (Kind.ADD, Kind.MUL):
            a, b = (self._child(x) for x in operands)
            args = (a, b) if a <= b else (b, a)
        else:
            (a,) = operands
            args = (self._child(a),)
        key = (kind, args)
        idx = self._index.get(key)
        if idx is None:
            idx = len(self.kinds)
            self.kinds.append(kind)
            self.args.append(args)
            self._index[key] = idx
        return Expr(self, idx)

    def _child(self, e) -> int:
        if isinstance(e, Expr):
            if e.store is not self:
                raise ValueError("operand belongs to a different store")
            return e.id
        if isinstance(e, Real):
            return self.const(e).id
        raise TypeError(f"cannot use {type(e).__name__} as an expression")

    def var(self, slot: int) -> "Expr":
        if not 0 <= slot < self.layout.n_slots:
            raise SlotOutOfRangeError(f"var slot {slot} outside layout")
        return self.intern(Kind.VAR, slot)

    def coeff(self, slot: int) -> "Expr":
        return self.intern(Kind.COEFF, slot)

    def const(self, value: float) -> "Expr":
        return self.intern(Kind.CONST, value)

    def add(self, a, b) -> "Expr":
        return self.intern(Kind.ADD, a, b)

    def mul(self, a, b) -> "Expr":
        return self.intern(Kind.MUL, a, b)

    def sin(self, a) -> "Expr":
        return self.intern(Kind.SIN, a)

    def cos(self, a) -> "Expr":
        return self.intern(Kind.COS, a)

    def neg(self, a) -> "Expr":
        return self.mul(self.const(-1.0), a)

    def sum(self, terms: Iterable) -> "Expr":
        total = None
        for t in terms:
            total = t if total is None else self.add(total, t)
        return self.const(0.0) if total is None else self._lift(total)

    def _lift(self, e) -> "Expr":
        return e if isinstance(e, Expr) else self.const(e)

    def q(self, i: int) -> "Expr":
        return self.var(self.layout.q(i))

    def qd(self, i: int) -> "Expr":
        return self.var(self.layout.qd(i))

    def qdd(self, i: int) -> "Expr":
        return self.var(self.layout.qdd(i))


class Expr:
    """Handle to one interned node. Equality is node identity."""

    __slots__ = ("store", "id")

    def __init__(self, store: ExprStore, id: int):
        self.store = store
        self.id = id

    @property
    def kind(self) -> Kind:
        return self.store.kinds[self.id]

    @property
    def children(self) -> tuple["Expr", ...]:
        if self.kind in (Kind.VAR, Kind.COEFF, Kind.CONST):
            return ()
        return tuple(Expr(self.store, c) for c in self.store.args[self.id])

    @property
    def slot(self) -> int:
        if self.kind not in (Kind.VAR, Kind.COEFF):
            raise AttributeError("only Var and Coeff nodes carry a slot")
        return self.store.args[self.id][0]

    @property
    def value(self) -> float:
        if self.kind is not Kind.CONST:
            raise AttributeError("only Const nodes carry a value")
        return self.store.args[self.id][0]

    def is_const(self, value: float | None = None) -> bool:
        return self.kind is Kind.CONST and (value is None or self.value == value)

    def __eq__(self, other) -> bool:
        return isinstance(other, Expr) and other.store is self.store and other.id == self.id

    def __hash__(self) -> int:
        return hash((id(self.store), self.id))

    def __add__(self, other):
        return self.store.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return self.store.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return self.store.neg(self)

    def __sub__(self, other):
        return self.store.add(self, self.store.neg(self.store._lift(other)))

    def __rsub__(self, other):
        return self.store.add(self.store._lift(other), self.store.neg(self))

    def __repr__(self) -> str:
        return f"Expr({pretty_print(self)})"


def sin(e: Expr) -> Expr:
    return e.store.sin(e)


def cos(e: Expr) -> Expr:
    return e.store.cos(e)


def _reachable(store: ExprStore, roots: Iterable[int]) -> list[int]:
    seen = set()
    stack = list(roots)
    while stack:
        n = stack.pop()
        if n in seen:
            continue
        seen.add(n)
        if store.kinds[n] >= Kind.ADD:
            stack.extend(store.args[n])
    return sorted(seen)


def evaluate_many(
    exprs: Sequence[Expr],
    state,
    coeffs=(),
    sin_fn: Callable = np.sin,
    cos_fn: Callable = np.cos,
) -> list:
    """Evaluate several expressions of one store, sharing all subterms.

    ``state`` and ``coeffs`` are indexed by slot; their entries may be floats,
    numpy arrays (batched evaluation) or tape values.
    """
    if not exprs:
        return []
    store = exprs[0].store
    kinds, args = store.kinds, store.args
    n_state, n_coeff = len(state), len(coeffs)
    val: dict[int, object] = {}
    for n in _reachable(store, (e.id for e in exprs)):
        k = kinds[n]
        a = args[n]
        if k is Kind.VAR:
            if a[0] >= n_state:
                raise SlotOutOfRangeError(f"state has {n_state} slots, expression needs slot {a[0]}")
            val[n] = state[a[0]]
        elif k is Kind.COEFF:
            if a[0] >= n_coeff:
                raise SlotOutOfRangeError(f"{n_coeff} coefficients supplied, expression needs slot {a[0]}")
            val[n] = coeffs[a[0]]
        elif k is Kind.CONST:
            val[n] = a[0]
        elif k is Kind.ADD:
            val[n] = val[a[0]] + val[a[1]]
        elif k is Kind.MUL:
            val[n] = val[a[0]] * val[a[1]]
        elif k is Kind.SIN:
            val[n] = sin_fn(val[a[0]])
        else:
            val[n] = cos_fn(val[a[0]])
    return [val[e.id] for e in exprs]


def evaluate(expr: Expr, state, coeffs=()):
    """Numeric value of ``expr``; batched when state entries are arrays."""
    return evaluate_many([expr], state, coeffs)[0]


def partial(expr: Expr, var_slot: int) -> Expr:
    """Exact symbolic derivative with respect to one Var slot."""
    store = expr.store
    if not 0 <= var_slot < store.layout.n_slots:
        raise SlotOutOfRangeError(f"var slot {var_slot} outside layout")
    kinds, args = store.kinds, store.args
    d: dict[int, Expr | None] = {}
    one = store.const(1.0)
    minus_one = store.const(-1.0)

    def node(i):
        return Expr(store, i)

    for n in _reachable(store, [expr.id]):
        k = kinds[n]
        a = args[n]
        if k is Kind.VAR:
            d[n] = one if a[0] == var_slot else None
        elif k in (Kind.COEFF, Kind.CONST):
            d[n] = None
        elif k is Kind.ADD:
            da, db = d[a[0]], d[a[1]]
            d[n] = da if db is None else db if da is None else store.add(da, db)
        elif k is Kind.MUL:
            da, db = d[a[0]], d[a[1]]
            left = None if da is None else store.mul(da, node(a[1]))
            right = None if db is None else store.mul(node(a[0]), db)
            d[n] = left if right is None else right if left is None else store.add(left, right)
        elif k is Kind.SIN:
            da = d[a[0]]
            d[n] = None if da is None else store.mul(store.cos(node(a[0])), da)
        else:
            da = d[a[0]]
            d[n] = None if da is None else store.mul(store.mul(minus_one, store.sin(node(a[0]))), da)
    result = d[expr.id]
    if result is None:
        return store.const(0.0)
    return simplify(result, 0.0)


def euler_lagrange(L: Expr, layout: StateLayout | None = None) -> list[Expr]:
    """Generalised forces d/dt dL/dqd_i - dL/dq_i, one expression per joint.

    The time derivative is expanded through the chain rule, so joint
    accelerations appear only here and only linearly.
    """
    store = L.store
    layout = layout or store.layout
    n = layout.n_joints
    for s in free_vars(L):
        if layout.is_acceleration(s):
            raise ValueError(f"Lagrangian depends on acceleration slot {layout.name(s)}")
    torques = []
    for i in range(n):
        dL_dqd = partial(L, layout.qd(i))
        terms = []
        for j in range(n):
            terms.append(store.mul(partial(dL_dqd, layout.q(j)), store.var(layout.qd(j))))
            terms.append(store.mul(partial(dL_dqd, layout.qd(j)), store.var(layout.qdd(j))))
        terms.append(store.neg(partial(L, layout.q(i))))
        torques.append(simplify(store.sum(terms), 0.0))
    return torques


def free_vars(expr: Expr) -> set[int]:
    store = expr.store
    return {
        store.args[n][0]
        for n in _reachable(store, [expr.id])
        if store.kinds[n] is Kind.VAR
    }


def coeff_slots(expr: Expr) -> set[int]:
    store = expr.store
    return {
        store.args[n][0]
        for n in _reachable(store, [expr.id])
        if store.kinds[n] is Kind.COEFF
    }


def _chain_leaves(store: ExprStore, n: int, kind: Kind) -> list[int]:
    out = []
    stack = [n]
    while stack:
        m = stack.pop()
        if store.kinds[m] is kind:
            a, b = store.args[m]
            stack.append(b)
            stack.append(a)
        else:
            out.append(m)
    return out


def simplify(expr: Expr, eps: float = 0.0, coeffs: Sequence[float] | None = None) -> Expr:
    """Canonicalise sums and products and fold constants.

    Sums and products are flattened, constants folded (0*x -> 0, 1*x -> x,
    0 + x -> x), operands sorted by id and rebuilt as left-nested chains with
    the constant first. With ``eps > 0`` a sum term whose numeric coefficient
    (product of its Const factors and, when ``coeffs`` is given, its Coeff
    factors) is below ``eps`` in magnitude is dropped. The result is a fixed
    point: ``simplify(simplify(e)) == simplify(e)``.
    """
    if eps < 0:
        raise ValueError("eps must be non-negative")
    store = expr.store
    kinds, args = store.kinds, store.args
    memo: dict[int, int] = {}
    deps_cache: dict[int, list[int]] = {}

    def deps(n: int) -> list[int]:
        got = deps_cache.get(n)
        if got is None:
            k = kinds[n]
            if k in (Kind.ADD, Kind.MUL):
                got = _chain_leaves(store, n, k)
            elif k in (Kind.SIN, Kind.COS):
                got = [args[n][0]]
            else:
                got = []
            deps_cache[n] = got
        return got

    def coefficient(term: int) -> float | None:
        factors = _chain_leaves(store, term, Kind.MUL)
        c = 1.0
        backed = False
        for f in factors:
            if kinds[f] is Kind.CONST:
                c *= args[f][0]
                backed = True
            elif kinds[f] is Kind.COEFF and coeffs is not None:
                c *= coeffs[args[f][0]]
                backed = True
        return c if backed else None

    def build_mul(leaves: list[int]) -> int:
        c = 1.0
        rest = []
        for m in leaves:
            for f in _chain_leaves(store, m, Kind.MUL):
                if kinds[f] is Kind.CONST:
                    c *= args[f][0]
                else:
                    rest.append(f)
        if c == 0.0 or not rest:
            return store.const(c).id
        rest.sort()
        acc = rest[0] if c == 1.0 else store.mul(store.const(c), Expr(store, rest[0])).id
        for f in rest[1:]:
            acc = store.mul(Expr(store, acc), Expr(store, f)).id
        return acc

    def build_add(leaves: list[int]) -> int:
        c = 0.0
        rest = []
        for m in leaves:
            for t in _chain_leaves(store, m, Kind.ADD):
                if kinds[t] is Kind.CONST:
                    c += args[t][0]
                else:
                    rest.append(t)
        if eps > 0.0:
            kept = []
            for t in rest:
                w = coefficient(t)
                if w is None or abs(w) >= eps:
                    kept.append(t)
            rest = kept
            if abs(c) < eps:
                c = 0.0
        if not rest:
            return store.const(c).id
        rest.sort()
        acc = rest[0] if c == 0.0 else store.add(store.const(c), Expr(store, rest[0])).id
        for t in rest[1:]:
            acc = store.add(Expr(store, acc), Expr(store, t)).id
        return acc

    stack = [expr.id]
    while stack:
        n = stack[-1]
        if n in memo:
            stack.pop()
            continue
        ds = deps(n)
        pending = [m for m in ds if m not in memo]
        if pending:
            stack.extend(pending)
            continue
        stack.pop()
        k = kinds[n]
        if k in (Kind.VAR, Kind.COEFF, Kind.CONST):
            memo[n] = n
        elif k is Kind.SIN or k is Kind.COS:
            a = memo[ds[0]]
            if kinds[a] is Kind.CONST:
                fn = math.sin if k is Kind.SIN else math.cos
                memo[n] = store.const(fn(args[a][0])).id
            else:
                memo[n] = store.intern(k, Expr(store, a)).id
        elif k is Kind.MUL:
            memo[n] = build_mul([memo[m] for m in ds])
        else:
            memo[n] = build_add([memo[m] for m in ds])
    return Expr(store, memo[expr.id])


def substitute_coeffs(expr: Expr, coeffs: Sequence[float]) -> Expr:
    """Replace every Coeff slot by a Const holding its value."""
    store = expr.store
    kinds, args = store.kinds, store.args
    out: dict[int, Expr] = {}
    for n in _reachable(store, [expr.id]):
        k = kinds[n]
        if k is Kind.COEFF:
            out[n] = store.const(coeffs[args[n][0]])
        elif k in (Kind.VAR, Kind.CONST):
            out[n] = Expr(store, n)
        elif k in (Kind.ADD, Kind.MUL):
            out[n] = store.intern(k, out[args[n][0]], out[args[n][1]])
        else:
            out[n] = store.intern(k, out[args[n][0]])
    return out[expr.id]


def format_number(value: float) -> str:
    return f"{value:.6g}"


_PREC = {Kind.ADD: 1, Kind.MUL: 2}


def pretty_print(expr: Expr, coeffs: Sequence[float] | None = None) -> str:
    """Infix rendering with minimal parentheses.

    A chain operand of the same operator is printed first, constants lead
    their product/sum, and a same-operator right operand is parenthesised so
    that a left-associative parse rebuilds the identical DAG.
    """
    store = expr.store
    kinds, args = store.kinds, store.args
    layout = store.layout

    def leaf(n: int) -> str:
        k = kinds[n]
        if k is Kind.VAR:
            return layout.name(args[n][0])
        if k is Kind.COEFF:
            if coeffs is not None:
                return format_number(coeffs[args[n][0]])
            return f"c{args[n][0]}"
        return format_number(args[n][0])

    def order(n: int) -> tuple[int, int]:
        k = kinds[n]
        a, b = args[n]
        a_chain, b_chain = kinds[a] is k, kinds[b] is k
        if b_chain and not a_chain:
            return b, a
        if a_chain:
            return a, b
        if kinds[b] is Kind.CONST and kinds[a] is not Kind.CONST:
            return b, a
        return a, b

    def render(n: int) -> str:
        k = kinds[n]
        if k <= Kind.CONST:
            return leaf(n)
        if k in (Kind.SIN, Kind.COS):
            name = "sin" if k is Kind.SIN else "cos"
            return f"{name}({render(args[n][0])})"
        items = []
        cur = n
        while kinds[cur] is k:
            left, right = order(cur)
            items.append(operand(right, k, right_side=True))
            cur = left
        items.append(operand(cur, k, right_side=False))
        items.reverse()
        sep = " + " if k is Kind.ADD else "*"
        return sep.join(items)

    def operand(m: int, parent: Kind, right_side: bool) -> str:
        km = kinds[m]
        text = render(m)
        if km in _PREC and (_PREC[km] < _PREC[parent] or (right_side and km is parent)):
            return f"({text})"
        return text

    return render(expr.id)
