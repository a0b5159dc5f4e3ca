"""Double-pendulum ground truth, a finite-difference inverse-dynamics oracle,
and dataset sampling / CSV persistence."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .expr import Expr, ExprStore, StateLayout, euler_lagrange, evaluate, evaluate_many, free_vars

DEFAULT_RANGE = (-math.pi / 2, math.pi / 2)


@dataclass(frozen=True)
class PendulumParams:
    m1: float = 3.0
    l1: float = 2.67
    m2: float = 1.0
    l2: float = 1.67
    g: float = 9.81

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not v > 0:
                raise ValueError(f"{name} must be strictly positive, got {v}")

    @property
    def identifiable(self) -> tuple[float, float, float, float]:
        return (self.m1, self.l1, self.m2, self.l2)


def double_pendulum_lagrangian(store: ExprStore, m1, l1, m2, l2, g) -> Expr:
    """Two-link Lagrangian with the physical parameters given as expressions
    (or numbers). Coeff-slot parameters give the structural model used by
    system identification."""
    q1, q2 = store.q(0), store.q(1)
    qd1, qd2 = store.qd(0), store.qd(1)
    half = store.const(0.5)
    third = store.const(1.0 / 3.0)
    m1, l1, m2, l2, g = (x if isinstance(x, Expr) else store.const(x) for x in (m1, l1, m2, l2, g))
    kin1 = half * (third * m1 + m2) * l1 * l1 * qd1 * qd1
    kin2 = half * (third * m2) * l2 * l2 * qd2 * qd2
    coupling = half * m2 * l1 * l2 * qd1 * qd2 * store.cos(q1 - q2)
    pot1 = (half * m1 + m2) * g * l1 * store.cos(q1)
    pot2 = (half * m2) * g * l2 * store.cos(q2)
    return kin1 + kin2 + coupling + pot1 + pot2


def dp_lagrangian_expr(params: PendulumParams | None = None, store: ExprStore | None = None) -> Expr:
    """Ground-truth Lagrangian with all physical constants folded to numbers."""
    p = params or PendulumParams()
    store = ExprStore(StateLayout(2)) if store is None else store
    q1, q2 = store.q(0), store.q(1)
    qd1, qd2 = store.qd(0), store.qd(1)
    terms = [
        0.5 * (p.m1 / 3 + p.m2) * p.l1**2 * (qd1 * qd1),
        0.5 * (p.m2 / 3) * p.l2**2 * (qd2 * qd2),
        0.5 * p.m2 * p.l1 * p.l2 * (qd1 * qd2 * store.cos(q1 - q2)),
        (p.m1 / 2 + p.m2) * p.g * p.l1 * store.cos(q1),
        (p.m2 / 2) * p.g * p.l2 * store.cos(q2),
    ]
    return store.sum(terms)


def inverse_dynamics_fd(L: Callable, state, h: float = 1e-4) -> np.ndarray:
    """Torques from central differences of a Lagrangian callable ``L(q, qd)``.

    ``state`` is ``(q, qd, qdd)``; each may be shape ``(n,)`` or ``(n, N)``.
    Uses tau_i = sum_j d2L/dqd_i dq_j qd_j + sum_j d2L/dqd_i dqd_j qdd_j - dL/dq_i
    with every second partial from a nested central stencil.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    q, qd, qdd = (np.asarray(s) for s in state)
    n = q.shape[0]
    x = np.concatenate([q, qd], axis=0)

    def f(z):
        return L(z[:n], z[n:])

    def e(k):
        v = np.zeros_like(x)
        v[k] = h
        return v

    def second(a, b):
        ea, eb = e(a), e(b)
        return (f(x + ea + eb) - f(x + ea - eb) - f(x - ea + eb) + f(x - ea - eb)) / (4 * h * h)

    tau = []
    for i in range(n):
        dq = (f(x + e(i)) - f(x - e(i))) / (2 * h)
        dt = 0.0
        for j in range(n):
            dt = dt + second(n + i, j) * qd[j] + second(n + i, n + j) * qdd[j]
        tau.append(dt - dq)
    return np.stack([np.broadcast_to(t, np.shape(tau[0])) for t in tau])


@dataclass(frozen=True)
class StateSample:
    q: np.ndarray
    qdot: np.ndarray
    qddot: np.ndarray
    tau: np.ndarray
    lagrangian: float


@dataclass
class Dataset:
    """Column arrays of shape ``(N, n_joints)`` (``lagrangian`` is ``(N,)``)."""

    q: np.ndarray
    qd: np.ndarray
    qdd: np.ndarray
    tau: np.ndarray
    lagrangian: np.ndarray
    seed: int | None = None
    sample_range: tuple[float, float] = DEFAULT_RANGE
    params: PendulumParams | None = field(default_factory=PendulumParams)

    def __len__(self) -> int:
        return len(self.lagrangian)

    @property
    def n_joints(self) -> int:
        return self.q.shape[1]

    def __getitem__(self, i: int) -> StateSample:
        return StateSample(self.q[i], self.qd[i], self.qdd[i], self.tau[i], float(self.lagrangian[i]))

    def subset(self, idx) -> "Dataset":
        return Dataset(
            self.q[idx], self.qd[idx], self.qdd[idx], self.tau[idx], self.lagrangian[idx],
            self.seed, self.sample_range, self.params,
        )

    def state_rows(self) -> np.ndarray:
        """Var-slot-major matrix ``(3n, N)`` suitable for batched expression evaluation."""
        return np.concatenate([self.q, self.qd, self.qdd], axis=1).T

    def columns(self) -> np.ndarray:
        return np.column_stack([self.q, self.qd, self.qdd, self.tau, self.lagrangian])


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


def sample_states(count: int, seed: int, sample_range=DEFAULT_RANGE, n_joints: int = 2, stream: int = 0):
    lo, hi = sample_range
    draws = _rng(seed, stream).uniform(lo, hi, size=(count, 3 * n_joints))
    n = n_joints
    return draws[:, :n], draws[:, n:2 * n], draws[:, 2 * n:]


def sample_dataset_for(
    L: Expr,
    count: int,
    seed: int,
    sample_range=DEFAULT_RANGE,
    params: PendulumParams | None = None,
    stream: int = 0,
) -> Dataset:
    """Uniform states labelled with the exact Euler-Lagrange torques of ``L``."""
    layout = L.store.layout
    n = layout.n_joints
    q, qd, qdd = sample_states(count, seed, sample_range, n, stream)
    rows = np.concatenate([q, qd, qdd], axis=1).T
    torques = euler_lagrange(L, layout)
    values = evaluate_many([L, *torques], rows) if count else [np.zeros(0)] * (n + 1)
    lag = np.broadcast_to(values[0], (count,)).astype(float)
    tau = np.column_stack([np.broadcast_to(t, (count,)) for t in values[1:]]) if count else np.zeros((0, n))
    return Dataset(q, qd, qdd, tau.astype(float), lag, seed, tuple(sample_range), params)


def sample_dataset(
    count: int,
    seed: int,
    sample_range=DEFAULT_RANGE,
    params: PendulumParams | None = None,
    stream: int = 0,
) -> Dataset:
    if count < 0:
        raise ValueError("count must be non-negative")
    params = params or PendulumParams()
    return sample_dataset_for(dp_lagrangian_expr(params), count, seed, sample_range, params, stream)


class DatasetFormatError(ValueError):
    pass


def csv_header(n_joints: int = 2) -> list[str]:
    idx = range(1, n_joints + 1)
    return (
        [f"q{i}" for i in idx] + [f"qd{i}" for i in idx] + [f"qdd{i}" for i in idx]
        + [f"tau{i}" for i in idx] + ["lagrangian"]
    )


def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def save_dataset(dataset: Dataset, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(",".join(csv_header(dataset.n_joints)) + "\n")
        for row in dataset.columns():
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
    meta = {
        "seed": dataset.seed,
        "sample_range": list(dataset.sample_range),
        "params": asdict(dataset.params) if dataset.params else None,
        "count": len(dataset),
    }
    _meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_dataset(path) -> Dataset:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetFormatError(f"{path}: line 1: empty file") from None
        n = (len(header) - 1) // 4
        if n < 1 or header != csv_header(n):
            raise DatasetFormatError(f"{path}: line 1: unexpected header {','.join(header)!r}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DatasetFormatError(
                    f"{path}: line {lineno}: row has {len(row)} fields, expected {len(header)}"
                )
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise DatasetFormatError(f"{path}: line {lineno}: non-numeric field") from None
    data = np.array(rows, dtype=float).reshape(-1, len(header))
    kwargs = {}
    meta_file = _meta_path(path)
    if meta_file.exists():
        meta = json.loads(meta_file.read_text())
        kwargs["seed"] = meta.get("seed")
        kwargs["sample_range"] = tuple(meta.get("sample_range", DEFAULT_RANGE))
        kwargs["params"] = PendulumParams(**meta["params"]) if meta.get("params") else None
    return Dataset(
        data[:, :n], data[:, n:2 * n], data[:, 2 * n:3 * n], data[:, 3 * n:4 * n], data[:, 4 * n], **kwargs
    )


def lagrangian_callable(L: Expr) -> Callable:
    """Wrap an expression as ``L(q, qd)`` for :func:`inverse_dynamics_fd`."""
    n = L.store.layout.n_joints
    if any(L.store.layout.is_acceleration(s) for s in free_vars(L)):
        raise ValueError("Lagrangian must not depend on accelerations")

    def fn(q, qd):
        zeros = [np.zeros_like(np.asarray(q[0]))] * n
        return evaluate(L, [*q, *qd, *zeros])

    return fn
