"""Training losses: prediction MSE, autoencoder reconstruction + contraction,
and the entropy / cross-entropy terms over gated head distributions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .model import ArchConfig, ForwardResult, LayerTrace, NonFiniteError, forward

ENTROPY_EPS = 1e-12


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 1.0    # contraction weight
    lambda2: float = 0.001  # entropy weight
    lambda3: float = 1.0    # cross-entropy weight
    mode: str = "indirect"
    entropy_eps: float = ENTROPY_EPS

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.mode not in ("direct", "indirect"):
            raise ValueError(f"mode must be 'direct' or 'indirect', got {self.mode!r}")


@dataclass(frozen=True)
class LossBreakdown:
    """Unweighted components plus the weighted total.

    ``total = basic + reconstruction + lambda1*contraction
    + lambda2*entropy - lambda3*cross_entropy``.
    """

    total: float
    basic: float
    reconstruction: float = 0.0
    contraction: float = 0.0
    entropy: float = 0.0
    cross_entropy: float = 0.0

    def weighted(self, cfg: LossConfig) -> dict[str, float]:
        return {
            "basic": self.basic,
            "ae": self.reconstruction + cfg.lambda1 * self.contraction,
            "entropy": cfg.lambda2 * self.entropy,
            "xent": -cfg.lambda3 * self.cross_entropy,
        }


def basic_loss(prediction, target):
    """Mean squared error over every element (samples x joints)."""
    if not np.all(np.isfinite(ad.value_of(prediction))):
        raise NonFiniteError("non-finite prediction")
    err = prediction - np.asarray(target, dtype=float)
    return ad.mean(err * err)


def ae_loss(v_norm, v_hat, penalty, lambda1: float):
    err = v_norm - v_hat
    return ad.mean(err * err) + lambda1 * penalty


def entropy(p, eps: float = ENTROPY_EPS, axis: int = -1):
    return -ad.sum_(p * ad.log(p + eps), axis=axis)


def cross_entropy_matrix(p, eps: float = ENTROPY_EPS):
    """``C[a, b] = H(p_a, p_b) = -sum_c p_a[c] log(p_b[c] + eps)`` for rows of ``p``."""
    return -ad.matmul(p, ad.log(p + eps).T)


def gated(trace: LayerTrace):
    phi = trace.heads.phi
    return ad.reshape(phi, (ad.value_of(phi).shape[0], 1)) * trace.heads.P


def complementary_terms(traces: list[LayerTrace], eps: float = ENTROPY_EPS):
    """(sum of head entropies, sum over ordered head pairs j' != j of H(p_j', p_j))."""
    ent = 0.0
    xent = 0.0
    for t in traces:
        p = gated(t)
        C = cross_entropy_matrix(p, eps)
        diag = ad.sum_(C * np.eye(ad.value_of(C).shape[0]))
        ent = ent + diag
        xent = xent + (ad.sum_(C) - diag)
    return ent, xent


def complementary_loss(traces: list[LayerTrace], cfg: LossConfig):
    ent, xent = complementary_terms(traces, cfg.entropy_eps)
    return cfg.lambda2 * ent - cfg.lambda3 * xent


def prediction_target(batch, mode: str):
    return batch.lagrangian if mode == "direct" else batch.tau


def total_loss(result: ForwardResult, batch, cfg: LossConfig):
    """Total loss on the recording of ``result`` and its float breakdown."""
    pred = result.values if cfg.mode == "direct" else result.torque
    basic = basic_loss(pred, prediction_target(batch, cfg.mode))
    recon = 0.0
    contraction = 0.0
    for t in result.traces:
        recon = recon + t.reconstruction
        contraction = contraction + t.penalty
    ent, xent = complementary_terms(result.traces, cfg.entropy_eps)
    total = basic + recon + cfg.lambda1 * contraction + cfg.lambda2 * ent - cfg.lambda3 * xent
    breakdown = LossBreakdown(
        total=float(ad.value_of(total)),
        basic=float(ad.value_of(basic)),
        reconstruction=float(ad.value_of(recon)),
        contraction=float(ad.value_of(contraction)),
        entropy=float(ad.value_of(ent)),
        cross_entropy=float(ad.value_of(xent)),
    )
    return total, breakdown


def syrenets_loss(params, batch, config: ArchConfig, cfg: LossConfig):
    qdd = batch.qdd if cfg.mode == "indirect" else None
    result = forward(params, batch.q, batch.qd, config, qdd=qdd)
    return total_loss(result, batch, cfg)
