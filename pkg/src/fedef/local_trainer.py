"""Client side: K local SGD steps and the error-feedback upload."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .compressors import CompressedUpdate, CompressorSpec, compress
from .errors import ConfigurationError, DivergenceError, InvariantViolation, NumericInputError
from .param_space import ParamVector
from .problems import Problem


@dataclass(frozen=True)
class Hyperparams:
    eta: float = 1.0
    eta_l: float = 0.1
    K: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int | None = None  # None: full local batch

    def __post_init__(self):
        if not self.eta > 0:
            raise ConfigurationError(f"eta must be positive, got {self.eta}")
        if not self.eta_l > 0:
            raise ConfigurationError(f"eta_l must be positive, got {self.eta_l}")
        if int(self.K) != self.K or self.K < 1:
            raise ConfigurationError(f"K must be an integer >= 1, got {self.K}")
        if not (0 <= self.beta1 < 1) or not (0 <= self.beta2 < 1):
            raise ConfigurationError("beta1 and beta2 must lie in [0, 1)")
        if not self.epsilon > 0:
            raise ConfigurationError(f"epsilon must be positive, got {self.epsilon}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1 or None")


@dataclass
class ClientState:
    id: int
    error_acc: ParamVector
    last_error_update_round: int = 0
    participations: int = 0
    restarts: int = 0

    @classmethod
    def fresh(cls, client_id: int, template: ParamVector) -> "ClientState":
        return cls(client_id, ParamVector.zeros(template.layout))

    def staleness(self, t: int) -> int:
        return t - self.last_error_update_round


def run_local_round(problem: Problem, client: int, theta: ParamVector, hp: Hyperparams,
                    rng: np.random.Generator, round: int | None = None) -> ParamVector:
    """Run ``hp.K`` SGD steps from ``theta`` and return ``theta_K - theta``."""
    start = theta.values
    local = ParamVector(theta.layout, start)
    for _ in range(hp.K):
        try:
            g = problem.stochastic_gradient(client, local, hp.batch_size, rng).values
        except NumericInputError:
            raise DivergenceError("non-finite local gradient", round=round, client=client) from None
        with np.errstate(over="ignore", invalid="ignore"):
            step = local.values - hp.eta_l * g
        if not np.all(np.isfinite(step)):
            raise DivergenceError("non-finite local iterate", round=round, client=client)
        local = ParamVector(theta.layout, step)
    return ParamVector(theta.layout, local.values - start)


def ef_upload(client: ClientState, delta: ParamVector, spec: CompressorSpec, ef_enabled: bool,
              rng: np.random.Generator | None, round: int = 0) -> CompressedUpdate:
    """Compress the client's update and advance its error accumulator.

    With error feedback the message is ``C(delta + e)`` and the residual
    ``(delta + e) - C(delta + e)`` becomes the new accumulator. Without it
    ``delta`` is compressed directly and the accumulator is left alone.
    """
    if not ef_enabled:
        return compress(spec, delta, rng)
    adjusted = delta + client.error_acc
    sent = compress(spec, adjusted, rng)
    decoded = sent.materialize()
    client.error_acc = adjusted - decoded
    client.last_error_update_round = round
    return sent


def check_feedback_identity(sent: np.ndarray, residual: np.ndarray, target: np.ndarray, what: str) -> None:
    """Assert ``sent + residual == target`` up to the rounding of one add and one subtract.

    ``residual`` was computed as ``target - sent``; adding ``sent`` back can
    differ from ``target`` by at most a couple of ulps of the magnitudes
    involved, and is exact whenever one side is zero.
    """
    lhs = sent + residual
    scale = np.maximum(np.maximum(np.abs(sent), np.abs(residual)), np.abs(target))
    bad = np.abs(lhs - target) > 2.0 * np.spacing(scale)
    if np.any(bad):
        j = int(np.flatnonzero(bad)[0])
        raise InvariantViolation(
            f"{what}: coordinate {j}: {lhs[j]!r} != {target[j]!r}"
        )
