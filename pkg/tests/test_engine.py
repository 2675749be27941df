import numpy as np
import pytest

from fedef.compressors import CompressorSpec
from fedef.engine import (FederationEngine, RunConfig, maybe_restart_errors, run_experiment,
                          sample_participants, stream)
from fedef.errors import ConfigurationError, DivergenceError
from fedef.local_trainer import ClientState, Hyperparams
from fedef.problems import ProblemSpec, QuadraticProblem

from conftest import pv

SIGN = CompressorSpec.sign()


def quad_cfg(**kw):
    base = dict(problem=ProblemSpec(n=6, d=10, spread=1.5, noise_sigma=0.2), T=30,
                hp=Hyperparams(eta=1.0, eta_l=0.1, K=3), upload=CompressorSpec.topk(0.2))
    base.update(kw)
    return RunConfig(**base)


class TestSampling:
    def test_full_set(self, rng):
        assert sample_participants(5, 5, rng).tolist() == [0, 1, 2, 3, 4]

    def test_uniform_single_of_two(self):
        rng = np.random.default_rng(0)
        hits = sum(int(sample_participants(2, 1, rng)[0] == 0) for _ in range(100_000))
        assert abs(hits / 100_000 - 0.5) <= 0.01

    def test_distinct_sorted(self, rng):
        for _ in range(200):
            s = sample_participants(32, 4, rng)
            assert len(set(s.tolist())) == 4 and np.all(np.diff(s) > 0)

    def test_too_many(self, rng):
        with pytest.raises(ConfigurationError):
            sample_participants(3, 4, rng)


class TestRestart:
    def _clients(self, last):
        c = ClientState.fresh(0, pv([0.0, 0.0]))
        c.error_acc = pv([1.0, -1.0])
        c.last_error_update_round = last
        return [c]

    def test_stale_client_restarted(self):
        cs = self._clients(5)
        assert maybe_restart_errors(cs, 16, 10) == 1
        assert cs[0].error_acc.values.tolist() == [0.0, 0.0]
        assert cs[0].last_error_update_round == 16

    def test_boundary_not_restarted(self):
        cs = self._clients(6)
        assert maybe_restart_errors(cs, 16, 10) == 0
        assert cs[0].error_acc.values.tolist() == [1.0, -1.0]

    def test_full_participation_never_restarts(self):
        eng = FederationEngine(quad_cfg(restart_S=1, upload=SIGN))
        recs = eng.run()
        assert eng.total_restarts == 0 and all(r.restarts == 0 for r in recs)
        assert eng.summary(recs)["staleness_histogram"] == {"1": 6 * 30}


class TestHandTrajectory:
    def _cfg(self, upload):
        return RunConfig(problem=ProblemSpec(n=2, d=2), T=2, hp=Hyperparams(eta=0.5, eta_l=0.5, K=1),
                         upload=upload)

    def test_identity_one_round(self):
        # clients at c=[0,0] and c=[2,0]; deltas [0,0] and [1,0]; theta_1 = 0.5 * mean = [0.25, 0]
        prob = QuadraticProblem([[0.0, 0.0], [2.0, 0.0]])
        eng = FederationEngine(self._cfg(CompressorSpec.identity()), prob)
        rec = eng.run_round()
        assert eng.theta.values.tolist() == [0.25, 0.0]
        assert rec.grad_norm_sq == 0.5625
        assert rec.train_loss == 0.78125
        assert (rec.bits_up_cum, rec.bits_down_cum) == (128, 128)
        assert rec.q_a_sq is None or rec.q_a_sq == 0.0

    def test_sign_two_rounds(self):
        # round 1: C([0,0]) = 0, C([1,0]) = [0.5,0], e_2 = [0.5,0]; theta_1 = 0.5 * [0.25,0]
        # round 2: deltas [-0.0625,0] and [0.9375,0]; adjusted [-0.0625,0] and [1.4375,0]
        #          messages [-0.03125,0] and [0.71875,0]; theta_2 = 0.125 + 0.5 * 0.34375
        prob = QuadraticProblem([[0.0, 0.0], [2.0, 0.0]])
        eng = FederationEngine(self._cfg(SIGN), prob)
        r1 = eng.run_round()
        assert eng.theta.values.tolist() == [0.125, 0.0]
        assert eng.clients[1].error_acc.values.tolist() == [0.5, 0.0]
        assert r1.bits_up_cum == 32 + 33
        r2 = eng.run_round()
        assert eng.theta.values.tolist() == [0.296875, 0.0]
        assert eng.clients[0].error_acc.values.tolist() == [-0.03125, 0.0]
        assert eng.clients[1].error_acc.values.tolist() == [0.71875, 0.0]
        assert r2.bits_up_cum == 65 + 66
        # mean message [0.34375, 0] against mean adjusted [0.6875, 0]
        assert r2.q_a_sq == 0.25


class TestBookkeeping:
    def test_identity_keeps_errors_zero(self):
        eng = FederationEngine(quad_cfg(upload=CompressorSpec.identity()))
        for _ in range(10):
            eng.run_round()
            assert all(not c.error_acc.values.any() for c in eng.clients)

    def test_inactive_errors_frozen(self):
        eng = FederationEngine(quad_cfg(problem=ProblemSpec(n=10, d=8, noise_sigma=0.1), m=3, upload=SIGN))
        for _ in range(25):
            before = [(c.error_acc, c.participations) for c in eng.clients]
            eng.run_round()
            for (e, p), c in zip(before, eng.clients):
                if c.participations == p:
                    assert c.error_acc is e or c.error_acc.identical(e)

    def test_bits(self):
        eng = FederationEngine(quad_cfg(problem=ProblemSpec(n=6, d=10), m=4, upload=CompressorSpec.identity()))
        recs = eng.run()
        assert recs[-1].bits_up_cum == 30 * 4 * 32 * 10
        assert recs[-1].bits_down_cum == 30 * 4 * 32 * 10
        ups = [r.bits_up_cum for r in recs]
        assert ups == sorted(ups)

    def test_two_way_bits_and_sync(self):
        eng = FederationEngine(quad_cfg(download=CompressorSpec.topk(0.5), optimizer="ams"))
        rec = eng.run_round()
        # TopK 0.5 of d=10 sends 5 values with 4-bit indices to all 6 clients
        assert rec.bits_down_cum == (32 + 4) * 5 * 6
        assert eng.client_model.identical(eng.theta)

    def test_virtual_iterate_tracked(self):
        eng = FederationEngine(quad_cfg(upload=SIGN, download=CompressorSpec.topk(0.3)))
        recs = eng.run()
        assert eng.summary(recs)["virtual_iterate_max_rel_error"] <= 1e-10


class _NoiseLog(QuadraticProblem):
    def __init__(self, *a, **kw):
        super().__init__(*a, **kw)
        self.log = []

    def stochastic_gradient(self, client, theta, batch_size, rng):
        g = super().stochastic_gradient(client, theta, batch_size, rng)
        self.log.append((client, g.values - (theta.values - self.centers[client])))
        return g


def test_seed_isolation():
    centers = np.random.default_rng(1).standard_normal((8, 5))
    draws = {}
    for m in (8, 3):
        prob = _NoiseLog(centers, noise_sigma=1.0)
        eng = FederationEngine(quad_cfg(problem=ProblemSpec(n=8, d=5), m=m, T=12), prob)
        for t in range(1, 13):
            start = len(prob.log)
            eng.run_round()
            for k, (i, noise) in enumerate(prob.log[start:]):
                draws.setdefault((m, t, i), []).append(noise)
    checked = 0
    for (m, t, i), noise in draws.items():
        if m == 3:
            full = draws[(8, t, i)]
            for a, b in zip(noise, full):
                np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)
                checked += 1
    assert checked == 12 * 3 * 3


class TestDeterminism:
    def test_rerun_identical(self):
        a, _ = run_experiment(quad_cfg(upload=CompressorSpec.stoc(2), m=4))
        b, _ = run_experiment(quad_cfg(upload=CompressorSpec.stoc(2), m=4))
        assert [r.row() for r in a] == [r.row() for r in b]

    def test_seed_changes_run(self):
        a, _ = run_experiment(quad_cfg(seed=0, m=3))
        b, _ = run_experiment(quad_cfg(seed=1, m=3))
        assert [r.row() for r in a] != [r.row() for r in b]

    def test_streams_are_keyed(self):
        x = stream(0, 3, 1, 2).random()
        assert x == stream(0, 3, 1, 2).random()
        assert x != stream(0, 3, 2, 1).random()


class TestConfig:
    @pytest.mark.parametrize("kw", [{"m": 9}, {"m": 0}, {"T": 0}, {"optimizer": "adam"}, {"restart_S": 0},
                                    {"restart_start": 0}, {"qa_every": -1}])
    def test_rejects(self, kw):
        with pytest.raises(ConfigurationError):
            quad_cfg(**kw)

    def test_negative_local_rate_rejected(self):
        with pytest.raises(ConfigurationError):
            quad_cfg(hp=Hyperparams(eta_l=-0.1))

    def test_problem_size_mismatch(self):
        with pytest.raises(ConfigurationError):
            FederationEngine(quad_cfg(), QuadraticProblem(np.zeros((3, 10))))

    def test_single_round_summary(self):
        recs, summary = run_experiment(RunConfig(problem=ProblemSpec(n=1, d=1), T=1))
        assert summary["rounds"] == 1 and summary["bits_up_total"] > 0 and len(recs) == 1


@pytest.mark.parametrize("problem_seed", [0, 1, 2])
def test_error_feedback_lowers_sign_floor(problem_seed):
    base = RunConfig(problem=ProblemSpec(n=8, d=16, spread=2.0, seed=problem_seed), T=500,
                     hp=Hyperparams(eta=1.0, eta_l=0.05, K=5), upload=SIGN, qa_every=0)
    plain, _ = run_experiment(base.with_(ef=False))
    ef, _ = run_experiment(base)
    assert ef[-1].grad_norm_sq < 0.5 * plain[-1].grad_norm_sq


def test_divergence_raised_with_round():
    cfg = RunConfig(problem=ProblemSpec(n=2, d=3, spread=1.0), T=500,
                    hp=Hyperparams(eta=1.0, eta_l=2.5, K=20), upload=SIGN, ef=False)
    with pytest.raises(DivergenceError) as info:
        run_experiment(cfg)
    assert info.value.round is not None


def test_ams_run_is_finite():
    recs, _ = run_experiment(quad_cfg(optimizer="ams", hp=Hyperparams(eta=0.05, eta_l=0.1, K=3)))
    assert all(np.isfinite(r.grad_norm_sq) for r in recs)

