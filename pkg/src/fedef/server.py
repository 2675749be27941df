"""Global optimizers and the server-side residual for two-way compression."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .compressors import CompressedUpdate, CompressorSpec, compress
from .local_trainer import Hyperparams
from .param_space import ParamVector


@dataclass
class ServerOptimizerState:
    """Global model and, for AMSGrad, its moment estimates.

    ``m``/``v``/``v_hat`` stay ``None`` for plain SGD.
    """

    theta: ParamVector
    optimizer: str = "sgd"
    m: ParamVector | None = None
    v: ParamVector | None = None
    v_hat: ParamVector | None = None

    def __post_init__(self):
        if self.optimizer not in ("sgd", "ams"):
            raise ValueError(f"optimizer must be 'sgd' or 'ams', got {self.optimizer!r}")
        if self.optimizer == "ams":
            zero = ParamVector.zeros(self.theta.layout)
            self.m = self.m if self.m is not None else zero
            self.v = self.v if self.v is not None else zero
            self.v_hat = self.v_hat if self.v_hat is not None else zero

    @classmethod
    def sgd(cls, theta: ParamVector) -> "ServerOptimizerState":
        return cls(theta, "sgd")

    @classmethod
    def ams(cls, theta: ParamVector) -> "ServerOptimizerState":
        return cls(theta, "ams")


def sgd_global_step(state: ServerOptimizerState, avg_update: ParamVector, eta: float) -> ServerOptimizerState:
    state.theta = apply_direction(state.theta, avg_update, eta)
    return state


def ams_moments(state: ServerOptimizerState, avg_update: ParamVector, hp: Hyperparams) -> ParamVector:
    """Advance ``m``, ``v``, ``v_hat`` and return the step direction ``m / sqrt(v_hat + eps)``."""
    if state.optimizer != "ams":
        raise ValueError("AMSGrad step on a non-AMS server state")
    g = avg_update.values
    m = hp.beta1 * state.m.values + (1.0 - hp.beta1) * g
    v = hp.beta2 * state.v.values + (1.0 - hp.beta2) * (g * g)
    v_hat = np.maximum(v, state.v_hat.values)
    layout = state.theta.layout
    state.m, state.v, state.v_hat = ParamVector(layout, m), ParamVector(layout, v), ParamVector(layout, v_hat)
    return ParamVector(layout, m / np.sqrt(v_hat + hp.epsilon))


def ams_global_step(state: ServerOptimizerState, avg_update: ParamVector, hp: Hyperparams) -> ServerOptimizerState:
    direction = ams_moments(state, avg_update, hp)
    state.theta = apply_direction(state.theta, direction, hp.eta)
    return state


def server_direction(state: ServerOptimizerState, avg_update: ParamVector, hp: Hyperparams) -> ParamVector:
    """The uncompressed step direction: the average itself (SGD) or the AMSGrad ratio."""
    if state.optimizer == "sgd":
        return avg_update
    return ams_moments(state, avg_update, hp)


def apply_direction(theta: ParamVector, direction: ParamVector, eta: float) -> ParamVector:
    """``theta - eta * direction``; the single update rule shared by server and clients."""
    return ParamVector(theta.layout, theta.values - eta * direction.values)


@dataclass
class TwoWayServerState:
    phi: ParamVector
    download_spec: CompressorSpec

    @classmethod
    def fresh(cls, layout, download_spec: CompressorSpec) -> "TwoWayServerState":
        return cls(ParamVector.zeros(layout), download_spec)


def two_way_emit(state: TwoWayServerState, direction: ParamVector,
                 rng: np.random.Generator | None = None) -> tuple[CompressedUpdate, ParamVector]:
    """Compress ``direction + phi`` for broadcast and keep the residual in ``phi``."""
    adjusted = direction + state.phi
    sent = compress(state.download_spec, adjusted, rng)
    state.phi = adjusted - sent.materialize()
    return sent, state.phi
