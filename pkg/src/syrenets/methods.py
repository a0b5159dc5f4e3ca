"""Uniform adapters over the three learners so training, evaluation and the
CLI can treat them alike."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .baselines import (
    MlpConfig,
    SysIdConfig,
    mlp_forward,
    mlp_indirect_torque,
    mlp_init,
    sysid_forward,
    sysid_init,
    sysid_lagrangian,
)
from .model import ArchConfig, forward, init_params
from .objective import LossBreakdown, LossConfig, basic_loss, prediction_target, total_loss
from .params import ParamSet

METHODS = ("syrenets", "nn", "sysid")


@dataclass
class SyReNetsMethod:
    config: ArchConfig = field(default_factory=ArchConfig)
    kind: str = "syrenets"
    batch_coupled: bool = True

    def init_params(self, seed: int) -> ParamSet:
        return init_params(self.config, seed)

    def loss(self, params, batch, cfg: LossConfig):
        qdd = batch.qdd if cfg.mode == "indirect" else None
        result = forward(params, batch.q, batch.qd, self.config, qdd=qdd)
        return total_loss(result, batch, cfg)

    def predict(self, params, batch, mode: str) -> np.ndarray:
        qdd = batch.qdd if mode == "indirect" else None
        r = forward(params, batch.q, batch.qd, self.config, qdd=qdd)
        return np.asarray(ad.value_of(r.values if mode == "direct" else r.torque))

    def header(self) -> dict[str, str]:
        return {f"arch.{k}": v for k, v in self.config.as_dict().items()}


@dataclass
class MlpMethod:
    config: MlpConfig = field(default_factory=MlpConfig)
    kind: str = "nn"
    batch_coupled: bool = False

    def init_params(self, seed: int) -> ParamSet:
        return mlp_init(self.config, seed)

    def _pred(self, params, batch, mode):
        if mode == "direct":
            return mlp_forward(params, batch.q, batch.qd, self.config)
        return mlp_indirect_torque(params, batch.q, batch.qd, batch.qdd, self.config)

    def loss(self, params, batch, cfg: LossConfig):
        basic = basic_loss(self._pred(params, batch, cfg.mode), prediction_target(batch, cfg.mode))
        v = float(ad.value_of(basic))
        return basic, LossBreakdown(total=v, basic=v)

    def predict(self, params, batch, mode: str) -> np.ndarray:
        return np.asarray(ad.value_of(self._pred(params, batch, mode)))

    def header(self) -> dict[str, str]:
        return {"mlp.hidden": ",".join(str(h) for h in self.config.hidden), "mlp.fd_step": repr(self.config.fd_step)}


@dataclass
class SysIdMethod:
    config: SysIdConfig = field(default_factory=SysIdConfig)
    kind: str = "sysid"
    batch_coupled: bool = False

    def init_params(self, seed: int) -> ParamSet:
        return sysid_init(self.config, seed)

    def _pred(self, params, batch, mode):
        if mode == "direct":
            return sysid_lagrangian(params, batch.q, batch.qd, self.config)
        return sysid_forward(params, batch.q, batch.qd, batch.qdd, self.config)

    def loss(self, params, batch, cfg: LossConfig):
        basic = basic_loss(self._pred(params, batch, cfg.mode), prediction_target(batch, cfg.mode))
        v = float(ad.value_of(basic))
        return basic, LossBreakdown(total=v, basic=v)

    def predict(self, params, batch, mode: str) -> np.ndarray:
        return np.asarray(ad.value_of(self._pred(params, batch, mode)))

    def header(self) -> dict[str, str]:
        return {
            "sysid.hidden": str(self.config.hidden),
            "sysid.const_inputs": str(self.config.const_inputs),
            "sysid.g": repr(self.config.g),
        }


def make_method(kind: str, arch: ArchConfig | None = None):
    if kind == "syrenets":
        return SyReNetsMethod(arch or ArchConfig())
    if kind == "nn":
        return MlpMethod()
    if kind == "sysid":
        return SysIdMethod()
    raise ValueError(f"unknown method {kind!r}; expected one of {', '.join(METHODS)}")


def method_from_header(header: dict[str, str]):
    kind = header.get("kind")
    if kind == "syrenets":
        arch = ArchConfig.from_dict({k[5:]: v for k, v in header.items() if k.startswith("arch.")})
        return SyReNetsMethod(arch)
    if kind == "nn":
        hidden = tuple(int(h) for h in header["mlp.hidden"].split(","))
        return MlpMethod(MlpConfig(hidden=hidden, fd_step=float(header.get("mlp.fd_step", 1e-3))))
    if kind == "sysid":
        return SysIdMethod(
            SysIdConfig(
                hidden=int(header["sysid.hidden"]),
                const_inputs=int(header.get("sysid.const_inputs", 4)),
                g=float(header.get("sysid.g", 9.81)),
            )
        )
    raise ValueError(f"unknown model kind {kind!r}")


def loss_gradcheck(method, params: ParamSet, batch, cfg: LossConfig, n_coords: int = 50, seed: int = 0,
                   h: float = 1e-3, tol: float = 1e-4, extended: bool = True,
                   richardson: bool = True) -> ad.GradcheckReport:
    """Reverse-mode vs central-difference gradient of ``method``'s total loss
    at ``n_coords`` flat parameter slots drawn uniformly without replacement."""
    rng = np.random.default_rng([seed, 0x6C])
    coords = np.sort(rng.choice(params.size, size=min(n_coords, params.size), replace=False))

    def f(flat):
        return method.loss(params.from_flat_leaf(flat), batch, cfg)[0]

    return ad.gradcheck(f, params.flatten(), h=h, tol=tol, coords=coords, extended=extended,
                       richardson=richardson)
