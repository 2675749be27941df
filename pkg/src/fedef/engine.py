"""Round orchestration for Fed-EF and its baselines.

One :class:`FederationEngine` owns a single run: the global model, the
server optimizer, every client's error accumulator and the optional
two-way residual. Setting ``ef=False`` gives plain compressed Fed-SGD /
FedAMS (the ``stoc`` compressor then yields the unbiased Stoc baseline),
and ``upload=identity`` with ``ef=False`` is uncompressed federated SGD.

Randomness is keyed by ``(seed, purpose, client, round)`` so a client's
local draws in a given round never depend on who else participates.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .compressors import CompressorSpec, FLOAT_BITS
from .errors import ConfigurationError, DivergenceError, InvariantViolation, NumericInputError
from .local_trainer import ClientState, Hyperparams, check_feedback_identity, ef_upload, run_local_round
from .metrics import RoundRecord, grad_metrics, q_a_from_messages
from .param_space import ParamVector
from .problems import Problem, ProblemSpec
from .server import (ServerOptimizerState, TwoWayServerState, ams_global_step, apply_direction,
                     server_direction, sgd_global_step, two_way_emit)

log = logging.getLogger(__name__)

# stream tags for SeedSequence keys
_PROBLEM, _INIT, _SAMPLE, _LOCAL, _UPLOAD, _DOWNLOAD = range(6)

VIRTUAL_ITERATE_RTOL = 1e-10


def stream(seed: int, purpose: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), purpose, *[int(k) for k in key]]))


@dataclass(frozen=True)
class RunConfig:
    problem: ProblemSpec = field(default_factory=ProblemSpec)
    m: int | None = None  # None: full participation
    T: int = 100
    hp: Hyperparams = field(default_factory=Hyperparams)
    optimizer: str = "sgd"
    upload: CompressorSpec = field(default_factory=CompressorSpec.identity)
    download: CompressorSpec | None = None
    ef: bool = True
    restart_S: int | None = None
    restart_start: int = 1
    seed: int = 0
    qa_every: int = 1  # 0 disables the per-round q_A diagnostic
    check_invariants: bool = True

    def __post_init__(self):
        n = self.problem.n
        m = n if self.m is None else self.m
        if int(m) != m or not (1 <= m <= n):
            raise ConfigurationError(f"fl.m must satisfy 1 <= m <= n={n}, got {self.m}")
        object.__setattr__(self, "m", int(m))
        if int(self.T) != self.T or self.T < 1:
            raise ConfigurationError(f"fl.T must be an integer >= 1, got {self.T}")
        if self.optimizer not in ("sgd", "ams"):
            raise ConfigurationError(f"fl.optimizer must be 'sgd' or 'ams', got {self.optimizer!r}")
        if self.restart_S is not None and (int(self.restart_S) != self.restart_S or self.restart_S < 1):
            raise ConfigurationError(f"compression.restart_S must be an integer >= 1, got {self.restart_S}")
        if self.restart_start < 1:
            raise ConfigurationError("compression.restart_start must be >= 1")
        if self.qa_every < 0:
            raise ConfigurationError("qa_every must be >= 0")

    @property
    def n(self) -> int:
        return self.problem.n

    @property
    def full_participation(self) -> bool:
        return self.m == self.problem.n

    def with_(self, **changes) -> "RunConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["upload"] = str(self.upload)
        out["download"] = None if self.download is None else str(self.download)
        return out


def sample_participants(n: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """``m`` distinct clients drawn uniformly without replacement, ascending."""
    if m > n:
        raise ConfigurationError(f"cannot sample m={m} participants from n={n} clients")
    if m < 1:
        raise ConfigurationError("need at least one participant")
    if m == n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=m, replace=False))


def maybe_restart_errors(clients: list[ClientState], t: int, S: int) -> int:
    """Zero every accumulator last updated more than ``S`` rounds before ``t``.

    A restarted client is stamped with ``t`` so it is not zeroed again on
    the next round.
    """
    count = 0
    for c in clients:
        if t - c.last_error_update_round > S:
            c.error_acc = ParamVector.zeros(c.error_acc.layout)
            c.last_error_update_round = t
            c.restarts += 1
            count += 1
    return count


@dataclass
class VirtualIterateMonitor:
    """Tracks ``x_t = theta_t + eta * (mean_i e_{t,i} - phi_t)``.

    Under full participation with SGD and error feedback this sequence moves
    exactly like uncompressed local SGD: ``x_{t+1} = x_t + eta * mean_i Delta_{t,i}``
    (``Delta`` is the descent-direction local update, hence the plus sign).
    """

    x: ParamVector | None = None
    enabled: bool = False
    max_rel_error: float = 0.0


class FederationEngine:
    def __init__(self, config: RunConfig, problem: Problem | None = None):
        self.config = config
        seed = config.seed
        problem_seed = config.problem.seed if config.problem.seed is not None else seed
        self.problem = problem if problem is not None else config.problem.build(stream(problem_seed, _PROBLEM))
        if self.problem.n_clients != config.n:
            raise ConfigurationError(
                f"problem has {self.problem.n_clients} clients, config says n={config.n}"
            )
        theta = self.problem.init_params(stream(seed, _INIT))
        self.layout = theta.layout
        self.server = ServerOptimizerState(theta, config.optimizer)
        self.clients = [ClientState.fresh(i, theta) for i in range(config.n)]
        self.two_way = (TwoWayServerState.fresh(self.layout, config.download)
                        if config.download is not None else None)
        # every client applies the same broadcast, so one replica stands for all copies
        self.client_model = theta
        self.t = 0
        self.bits_up = 0
        self.bits_down = 0
        self.total_restarts = 0
        self.staleness_hist: Counter[int] = Counter()
        self.monitor = VirtualIterateMonitor(
            enabled=config.check_invariants and config.ef and config.full_participation
            and config.optimizer == "sgd"
        )
        if self.monitor.enabled:
            self.monitor.x = self._virtual_iterate()

    @property
    def theta(self) -> ParamVector:
        return self.server.theta

    def _mean_error(self) -> np.ndarray:
        acc = np.zeros(self.layout.d)
        for c in self.clients:
            acc = acc + c.error_acc.values
        return acc / len(self.clients)

    def _virtual_iterate(self) -> ParamVector:
        # client residuals live in update space, phi in pseudo-gradient space
        resid = self._mean_error()
        if self.two_way is not None:
            resid = resid - self.two_way.phi.values
        return ParamVector(self.layout, self.theta.values + self.config.hp.eta * resid)

    def run_round(self) -> RoundRecord:
        cfg, hp = self.config, self.config.hp
        t = self.t + 1
        n, m = cfg.n, cfg.m

        restarts = 0
        if cfg.restart_S is not None and t >= cfg.restart_start:
            restarts = maybe_restart_errors(self.clients, t, cfg.restart_S)
            self.total_restarts += restarts

        active = sample_participants(n, m, stream(cfg.seed, _SAMPLE, t))
        theta_t = self.theta
        if self.two_way is None:
            # dense broadcast of the current model to each participant
            self.bits_down += FLOAT_BITS * self.layout.d * m

        deltas, decoded, adjusted = [], [], []
        for i in active:
            i = int(i)
            client = self.clients[i]
            delta = run_local_round(self.problem, i, theta_t, hp, stream(cfg.seed, _LOCAL, i, t), round=t)
            before = client.error_acc
            if cfg.ef:
                self.staleness_hist[t - client.last_error_update_round] += 1
            sent = ef_upload(client, delta, cfg.upload, cfg.ef, stream(cfg.seed, _UPLOAD, i, t), round=t)
            client.participations += 1
            got = sent.materialize().values
            target = delta.values + before.values if cfg.ef else delta.values
            if cfg.ef and cfg.check_invariants:
                check_feedback_identity(got, client.error_acc.values, target, f"client {i} round {t}")
            self.bits_up += sent.bit_cost
            deltas.append(delta.values)
            decoded.append(got)
            adjusted.append(target)

        acc = np.zeros(self.layout.d)
        for v in decoded:
            acc = acc + v
        # Delta = theta_K - theta_t points downhill; the server optimizers take
        # the pseudo-gradient -mean(Delta~) and step theta - eta * direction
        pseudo_grad = ParamVector(self.layout, -(acc / m))

        try:
            self._global_step(pseudo_grad, t)
        except NumericInputError:
            raise DivergenceError("non-finite global model", round=t) from None

        if self.monitor.enabled:
            self._check_virtual_iterate(deltas, t)

        q_a = None
        if cfg.qa_every and t % cfg.qa_every == 0:
            q_a = q_a_from_messages(decoded, adjusted)
        gn, loss = grad_metrics(self.problem, self.theta)
        if not (np.isfinite(gn) and np.isfinite(loss)):
            raise DivergenceError("non-finite metrics", round=t)
        self.t = t
        return RoundRecord(t, gn, loss, self.bits_up, self.bits_down, q_a, m, restarts)

    def _global_step(self, pseudo_grad: ParamVector, t: int) -> None:
        cfg, hp = self.config, self.config.hp
        if self.two_way is None:
            if cfg.optimizer == "sgd":
                sgd_global_step(self.server, pseudo_grad, hp.eta)
            else:
                ams_global_step(self.server, pseudo_grad, hp)
            self.client_model = self.server.theta
            return
        direction = server_direction(self.server, pseudo_grad, hp)
        phi_before = self.two_way.phi
        sent, phi_after = two_way_emit(self.two_way, direction, stream(cfg.seed, _DOWNLOAD, t))
        h = sent.materialize()
        if cfg.check_invariants:
            check_feedback_identity(h.values, phi_after.values, direction.values + phi_before.values,
                                    f"server round {t}")
        self.server.theta = apply_direction(self.server.theta, h, hp.eta)
        self.client_model = apply_direction(self.client_model, h, hp.eta)
        # the broadcast reaches every client so inactive copies stay in sync
        self.bits_down += sent.bit_cost * cfg.n
        if cfg.check_invariants and not self.client_model.identical(self.server.theta):
            raise InvariantViolation(f"client model copy diverged from server model in round {t}")

    def _check_virtual_iterate(self, deltas: list[np.ndarray], t: int) -> None:
        eta = self.config.hp.eta
        mean_delta = np.zeros(self.layout.d)
        for dv in deltas:
            mean_delta = mean_delta + dv
        mean_delta = mean_delta / len(deltas)
        predicted = self.monitor.x.values + eta * mean_delta
        actual = self._virtual_iterate()
        scale = max(float(np.linalg.norm(predicted)), float(np.linalg.norm(actual.values)))
        err = float(np.linalg.norm(actual.values - predicted))
        rel = err / scale if scale > 0 else err
        self.monitor.max_rel_error = max(self.monitor.max_rel_error, rel)
        if rel > VIRTUAL_ITERATE_RTOL:
            raise InvariantViolation(f"virtual iterate drifted in round {t}: relative error {rel:.3e}")
        self.monitor.x = actual

    def run(self, T: int | None = None) -> list[RoundRecord]:
        T = self.config.T if T is None else T
        records = []
        for _ in range(T):
            rec = self.run_round()
            records.append(rec)
            log.debug("round %d grad_norm_sq=%.6g loss=%.6g", rec.round, rec.grad_norm_sq, rec.train_loss)
        return records

    def summary(self, records: list[RoundRecord]) -> dict:
        last = records[-1] if records else None
        out = {
            "config": self.config.to_dict(),
            "problem": self.problem.describe(),
            "rounds": self.t,
            "final_grad_norm_sq": None if last is None else last.grad_norm_sq,
            "final_train_loss": None if last is None else last.train_loss,
            "mean_grad_norm_sq": None if not records else float(np.mean([r.grad_norm_sq for r in records])),
            "bits_up_total": self.bits_up,
            "bits_down_total": self.bits_down,
            "restarts_total": self.total_restarts,
            "staleness_histogram": {str(k): v for k, v in sorted(self.staleness_hist.items())},
        }
        if self.monitor.enabled:
            out["virtual_iterate_max_rel_error"] = self.monitor.max_rel_error
        return out


def run_experiment(config: RunConfig, problem: Problem | None = None) -> tuple[list[RoundRecord], dict]:
    """Run ``config.T`` rounds from scratch; returns the records and a summary dict."""
    engine = FederationEngine(config, problem)
    records = engine.run()
    return records, engine.summary(records)
