"""Comparison models: a softplus MLP Lagrangian and parametric system
identification of the double pendulum."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .expr import Expr, ExprStore, StateLayout, euler_lagrange, evaluate_many
from .mechanics import PendulumParams, double_pendulum_lagrangian
from .params import ParamSet


@dataclass(frozen=True)
class MlpConfig:
    hidden: tuple[int, ...] = (300, 300, 300, 300, 300)
    n_joints: int = 2
    fd_step: float = 1e-3

    @property
    def sizes(self) -> list[int]:
        return [2 * self.n_joints, *self.hidden, 1]

    @property
    def n_params(self) -> int:
        s = self.sizes
        return sum(a * b + b for a, b in zip(s[:-1], s[1:]))


def mlp_init(config: MlpConfig, seed: int) -> ParamSet:
    rng = np.random.default_rng([seed, 0x11])
    p = ParamSet()
    s = config.sizes
    for i, (fan_in, fan_out) in enumerate(zip(s[:-1], s[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        p.add(f"mlp{i}.W", rng.uniform(-bound, bound, (fan_out, fan_in)))
        p.add(f"mlp{i}.b", rng.uniform(-bound, bound, (fan_out,)))
    return p


def mlp_apply(params, X, config: MlpConfig):
    h = X
    n = len(config.sizes) - 1
    for i in range(n):
        h = ad.matmul(h, params[f"mlp{i}.W"].T) + params[f"mlp{i}.b"]
        if i < n - 1:
            h = ad.softplus(h)
    return ad.reshape(h, (ad.value_of(h).shape[0],))


def mlp_forward(params, q, qd, config: MlpConfig):
    X = np.concatenate([np.asarray(q, float), np.asarray(qd, float)], axis=1)
    if X.shape[1] != 2 * config.n_joints:
        raise ValueError(f"expected {2 * config.n_joints} state inputs, got {X.shape[1]}")
    return mlp_apply(params, X, config)


def stencil_points(q, qd, qdd, h: float):
    """Evaluation points of the Euler-Lagrange stencil and how to combine them.

    Per joint ``i``: ``dL/dq_i`` from ``x +- h e_{q_i}``, and
    ``d/dt dL/dqd_i`` as the derivative of the central difference in
    ``qd_i`` along the direction ``w = (qd, qdd)``, i.e. points
    ``x +- h e_{qd_i} +- h w``. Returns ``(points (P*N, 2n), weights (n, P))``.
    """
    q, qd, qdd = (np.asarray(a, float) for a in (q, qd, qdd))
    n = q.shape[1]
    x = np.concatenate([q, qd], axis=1)
    w = np.concatenate([qd, qdd], axis=1)
    pts = []
    weights = np.zeros((n, 6 * n))
    for i in range(n):
        eq = np.zeros(2 * n)
        eq[i] = h
        ev = np.zeros(2 * n)
        ev[n + i] = h
        base = 6 * i
        pts += [x + eq, x - eq, x + ev + h * w, x - ev + h * w, x + ev - h * w, x - ev - h * w]
        inv2 = 1.0 / (2 * h)
        inv4 = 1.0 / (4 * h * h)
        weights[i, base:base + 6] = [-inv2, inv2, inv4, -inv4, -inv4, inv4]
    return np.concatenate(pts, axis=0), weights


def stencil_torque(values, n_samples: int, weights: np.ndarray):
    """Combine stacked stencil evaluations ``(P*N,)`` into torques ``(N, n)``."""
    P = weights.shape[1]
    grid = ad.reshape(values, (P, n_samples))
    return ad.matmul(grid.T, weights.T)


def mlp_indirect_torque(params, q, qd, qdd, config: MlpConfig, h: float | None = None):
    if h is None:
        h = config.fd_step
    if h <= 0:
        raise ValueError("h must be positive")
    pts, weights = stencil_points(q, qd, qdd, h)
    values = mlp_apply(params, pts, config)
    return stencil_torque(values, np.asarray(q).shape[0], weights)


# ------------------------------------------------------------------ SysId

SYSID_NAMES = ("m1", "l1", "m2", "l2")


@dataclass(frozen=True)
class SysIdConfig:
    hidden: int = 64
    const_inputs: int = 4
    g: float = 9.81


@lru_cache(maxsize=8)
def sysid_structure(g: float = 9.81) -> tuple[Expr, tuple[Expr, ...]]:
    """Structural Lagrangian with Coeff slots 0..3 = (m1, l1, m2, l2) and its torques."""
    store = ExprStore(StateLayout(2))
    m1, l1, m2, l2 = (store.coeff(i) for i in range(4))
    L = double_pendulum_lagrangian(store, m1, l1, m2, l2, g)
    return L, tuple(euler_lagrange(L))


def sysid_init(config: SysIdConfig, seed: int) -> ParamSet:
    rng = np.random.default_rng([seed, 0x51D])
    p = ParamSet()
    b1 = 1.0 / np.sqrt(config.const_inputs)
    b2 = 1.0 / np.sqrt(config.hidden)
    p.add("sysid.W1", rng.uniform(-b1, b1, (config.hidden, config.const_inputs)))
    p.add("sysid.W2", rng.uniform(-b2, b2, (4, config.hidden)))
    return p


def sysid_estimates(params, config: SysIdConfig):
    ones = np.ones(config.const_inputs)
    hidden = ad.softplus(ad.matmul(params["sysid.W1"], ones))
    return ad.matmul(params["sysid.W2"], hidden)


def sysid_params_for(target: PendulumParams, config: SysIdConfig = SysIdConfig()) -> ParamSet:
    """Network weights whose estimates are exactly ``target``'s (m1, l1, m2, l2)."""
    p = ParamSet()
    W1 = np.zeros((config.hidden, config.const_inputs))
    p.add("sysid.W1", W1)
    # softplus(0) = ln 2 on every hidden unit; put the target on the first one
    W2 = np.zeros((4, config.hidden))
    W2[:, 0] = np.array(target.identifiable) / np.log(2.0)
    p.add("sysid.W2", W2)
    return p


def _coeff_list(theta):
    return [ad.getitem(theta, i) if isinstance(theta, ad.TapeValue) else theta[i] for i in range(4)]


def sysid_forward(params, q, qd, qdd, config: SysIdConfig = SysIdConfig()):
    """Torques ``(N, 2)`` of the structural model under the current estimates."""
    _, torques = sysid_structure(config.g)
    rows = np.concatenate([np.asarray(q), np.asarray(qd), np.asarray(qdd)], axis=1).T
    theta = sysid_estimates(params, config)
    vals = evaluate_many(list(torques), rows, _coeff_list(theta), sin_fn=ad.sin, cos_fn=ad.cos)
    cols = [ad.reshape(v, (rows.shape[1], 1)) for v in vals]
    return ad.concat(cols, axis=1)


def sysid_lagrangian(params, q, qd, config: SysIdConfig = SysIdConfig()):
    L, _ = sysid_structure(config.g)
    q = np.asarray(q)
    rows = np.concatenate([q, np.asarray(qd), np.zeros_like(q)], axis=1).T
    theta = sysid_estimates(params, config)
    (val,) = evaluate_many([L], rows, _coeff_list(theta), sin_fn=ad.sin, cos_fn=ad.cos)
    return val
