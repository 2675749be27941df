import numpy as np
import pytest

from fedef.errors import ConfigurationError
from fedef.param_space import ParamVector
from fedef.problems import (ClientPartition, GradientDistribution, LogisticProblem, MLPProblem, ProblemSpec,
                            QuadraticProblem, load_csv_dataset, make_blobs, make_logistic, make_mlp,
                            make_quadratic, shard_partition, strong_signal_block, synth_client_gradients)

from conftest import central_difference, pv, rel_error


class TestQuadratic:
    def test_two_client_symmetry(self):
        q = QuadraticProblem([[0.0], [2.0]])
        star = q.minimizer
        assert star.values.tolist() == [1.0]
        # 0.5 * (0.5 * 1 + 0.5 * 1)
        assert q.global_loss(star) == 0.5
        assert q.global_gradient(star).values.tolist() == [0.0]

    def test_global_gradient_at_origin(self):
        q = QuadraticProblem([[0.0], [2.0]])
        assert q.global_gradient(pv([0.0])).values.tolist() == [-1.0]

    def test_heterogeneity(self):
        q = QuadraticProblem([[0.0], [3.0], [6.0]])
        assert q.minimizer.values.tolist() == [3.0]
        assert q.heterogeneity() == 6.0

    def test_zero_spread_is_homogeneous(self, rng):
        q = make_quadratic(5, 4, 0.0, rng)
        assert np.all(q.centers == 0.0)
        assert q.heterogeneity() == 0.0

    def test_centres_at_spread(self, rng):
        q = make_quadratic(6, 7, 2.5, rng)
        np.testing.assert_allclose(np.linalg.norm(q.centers, axis=1), 2.5, rtol=1e-12)

    def test_client_gradient(self):
        q = QuadraticProblem([[2.0], [5.0]])
        assert q.gradient(0, pv([0.0])).values.tolist() == [-2.0]
        assert q.gradient(1, pv([5.0])).values.tolist() == [0.0]

    def test_global_gradient_exact(self, rng):
        q = make_quadratic(7, 9, 1.3, rng)
        theta = pv(rng.standard_normal(9))
        assert np.array_equal(q.global_gradient(theta).values, theta.values - q.centers.mean(axis=0))

    def test_noisy_gradient_unbiased(self, rng):
        q = make_quadratic(3, 4, 1.0, rng, noise_sigma=0.7)
        theta = pv(rng.standard_normal(4))
        draws = np.array([q.stochastic_gradient(1, theta, None, rng).values for _ in range(10_000)])
        se = 0.7 / np.sqrt(len(draws))
        assert np.all(np.abs(draws.mean(axis=0) - q.gradient(1, theta).values) < 4 * se)

    def test_groups_must_cover(self):
        with pytest.raises(ConfigurationError):
            QuadraticProblem(np.zeros((2, 4)), groups=[1, 2])


def _small_data(rng, n_clients=3, n=60, p=4, C=3):
    X, y = make_blobs(n, p, C, rng)
    return X, y, shard_partition(y, n_clients, rng)


class TestDataGradients:
    @pytest.mark.parametrize("kind", ["logistic", "mlp"])
    def test_full_gradient_matches_differences(self, kind, rng):
        X, y, part = _small_data(rng)
        prob = (LogisticProblem(X, y, part, l2_reg=1e-3) if kind == "logistic"
                else MLPProblem(X, y, part, hidden=(5, 4), l2_reg=1e-3))
        for probe in range(5):
            client = probe % prob.n_clients
            theta = pv(0.5 * rng.standard_normal(prob.layout.d), prob.layout.group_sizes)
            g = prob.gradient(client, theta).values
            fd = central_difference(lambda v: prob.loss(client, ParamVector(prob.layout, v)), theta.values)
            assert rel_error(g, fd) <= 1e-5

    def test_batch_gradient_is_mean_over_batch(self, rng):
        X, y, part = _small_data(rng)
        prob = LogisticProblem(X, y, part)
        theta = pv(rng.standard_normal(prob.layout.d), prob.layout.group_sizes)
        batch = np.array([0, 5, 5, 17])
        manual = np.mean([prob.gradient(0, theta, np.array([b])).values for b in batch], axis=0)
        np.testing.assert_allclose(prob.gradient(0, theta, batch).values, manual, rtol=1e-12, atol=1e-15)

    @pytest.mark.parametrize("kind", ["logistic", "mlp"])
    def test_stochastic_gradient_unbiased(self, kind, rng):
        X, y, part = _small_data(rng, n_clients=2, n=40)
        prob = (LogisticProblem(X, y, part) if kind == "logistic" else MLPProblem(X, y, part, hidden=(4,)))
        theta = prob.init_params(rng) + pv(0.1 * rng.standard_normal(prob.layout.d), prob.layout.group_sizes)
        draws = np.array([prob.stochastic_gradient(1, theta, 4, rng).values for _ in range(10_000)])
        se = draws.std(axis=0, ddof=1) / np.sqrt(len(draws))
        gap = np.abs(draws.mean(axis=0) - prob.gradient(1, theta).values)
        assert np.all(gap <= 4 * se + 1e-12)

    def test_mlp_layout(self, rng):
        X, y, part = _small_data(rng, p=4, C=3)
        prob = MLPProblem(X, y, part, hidden=(5,))
        assert prob.layout.group_sizes == (20, 5, 15, 3)

    def test_logistic_layout(self, rng):
        X, y, part = _small_data(rng, p=4, C=3)
        assert LogisticProblem(X, y, part).layout.group_sizes == (12, 3)

    def test_empty_batch_rejected(self, rng):
        X, y, part = _small_data(rng)
        prob = LogisticProblem(X, y, part)
        with pytest.raises(ConfigurationError):
            prob.gradient(0, ParamVector.zeros(prob.layout), np.array([], dtype=int))


class TestShardPartition:
    def test_single_client_gets_everything(self, rng):
        part = shard_partition([3, 1, 2, 0, 1], 1, rng)
        assert part.indices[0].tolist() == [0, 1, 2, 3, 4]

    def test_four_samples_two_clients(self, rng):
        labels = np.array([0, 0, 1, 1])
        part = shard_partition(labels, 2, rng)
        assert part.sizes() == [2, 2]
        for ix in part.indices:
            assert len(set(labels[ix])) <= 2
        assert sorted(np.concatenate(part.indices).tolist()) == [0, 1, 2, 3]

    @pytest.mark.parametrize("n", [5, 10, 20])
    def test_disjoint_cover_at_most_two_classes(self, n, rng):
        labels = rng.integers(0, 10, size=500)
        part = shard_partition(labels, n, rng)
        allix = np.concatenate(part.indices)
        assert np.array_equal(np.sort(allix), np.arange(500))
        for ix in part.indices:
            assert len(np.unique(labels[ix])) <= 2

    def test_more_classes_than_shards_still_covers(self, rng):
        labels = rng.integers(0, 10, size=500)
        part = shard_partition(labels, 2, rng)
        assert np.array_equal(np.sort(np.concatenate(part.indices)), np.arange(500))
        assert sorted(part.sizes()) == [250, 250]

    def test_too_few_samples(self, rng):
        with pytest.raises(ConfigurationError):
            shard_partition([0, 1, 2], 2, rng)

    def test_deterministic(self):
        labels = np.arange(100) % 7
        a = shard_partition(labels, 4, np.random.default_rng(3))
        b = shard_partition(labels, 4, np.random.default_rng(3))
        assert all(np.array_equal(x, y) for x, y in zip(a.indices, b.indices))


class TestSynthGradients:
    def test_homogeneous_when_s_is_one(self):
        a = synth_client_gradients(GradientDistribution("gaussian", 0.01), 3, 30, 1.0, np.random.default_rng(0))
        b = np.random.default_rng(0).normal(0.0, 0.01, size=(3, 30))
        assert np.array_equal(np.stack([g.values for g in a]), b)

    def test_blocks_partition_coordinates(self):
        cover = np.concatenate([np.arange(1100)[strong_signal_block(i, 5, 1100)] for i in range(5)])
        assert np.array_equal(cover, np.arange(1100))

    @pytest.mark.parametrize("kind", ["gaussian", "laplace"])
    def test_block_variance(self, kind):
        dist = GradientDistribution(kind, 0.01)
        rng = np.random.default_rng(11)
        n, d, s = 5, 20, 10.0
        g = np.stack([np.stack([v.values for v in synth_client_gradients(dist, n, d, s, rng)])
                      for _ in range(20_000)])  # (draws, n, d)
        for i in range(n):
            blk = strong_signal_block(i, n, d)
            inside = g[:, i, blk].var()
            rest = np.delete(g[:, i, :], np.arange(d)[blk], axis=1).var()
            assert inside == pytest.approx(s * s * dist.variance, rel=0.05)
            assert rest == pytest.approx(dist.variance, rel=0.05)

    def test_rejects_s_below_one(self, rng):
        with pytest.raises(ConfigurationError):
            synth_client_gradients(GradientDistribution("gaussian"), 2, 4, 0.5, rng)


class TestProblemSpec:
    def test_build_kinds(self, rng):
        assert isinstance(ProblemSpec(kind="quadratic", n=3, d=4).build(rng), QuadraticProblem)
        assert isinstance(ProblemSpec(kind="logistic", n=3, n_samples=60, n_features=3, n_classes=3).build(rng),
                          LogisticProblem)
        assert isinstance(ProblemSpec(kind="mlp", n=3, n_samples=60, n_features=3, n_classes=3).build(rng),
                          MLPProblem)

    @pytest.mark.parametrize("kw", [{"kind": "cnn"}, {"n": 0}, {"d": 0}, {"spread": -1.0},
                                    {"noise_sigma": -0.1}, {"groups": (3, 3), "d": 7}])
    def test_rejects(self, kw):
        with pytest.raises(ConfigurationError):
            ProblemSpec(**kw)

    def test_make_helpers_match_spec(self):
        a = make_logistic(4, np.random.default_rng(1), n_samples=80, n_features=3, n_classes=4)
        assert a.n_clients == 4 and a.layout.d == 4 * 3 + 4
        b = make_mlp(4, np.random.default_rng(1), n_samples=80, n_features=3, n_classes=4, hidden=(6,))
        assert b.layout.group_sizes == (18, 6, 24, 4)


class TestCsvDataset:
    def test_roundtrip(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("label,f0,f1\n1,0.5,2\n0,-1,3\n", encoding="utf-8")
        X, y = load_csv_dataset(path)
        assert y.tolist() == [1, 0]
        assert X.tolist() == [[0.5, 2.0], [-1.0, 3.0]]

    @pytest.mark.parametrize("text", ["f0,label\n1,2\n", "label,f0\n", "label,f0\n1.5,2\n"])
    def test_rejects(self, tmp_path, text):
        path = tmp_path / "d.csv"
        path.write_text(text, encoding="utf-8")
        with pytest.raises(ConfigurationError):
            load_csv_dataset(path)


def test_partition_rejects_empty_client(rng):
    X, y = make_blobs(10, 2, 2, rng)
    with pytest.raises(ConfigurationError):
        LogisticProblem(X, y, ClientPartition([np.arange(10), np.array([], dtype=int)]))

