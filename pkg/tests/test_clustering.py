import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from depict import clustering as cl
from depict.nn import gradient_check


def random_p(rng, n, k, concentration=1.0):
    return rng.dirichlet(np.full(k, concentration), size=n)


def kl(a, b):
    a = np.asarray(a, float)
    mask = a > 0
    return float(np.sum(a[mask] * np.log(a[mask] / np.asarray(b)[mask])))


row_stochastic = st.integers(0, 2**32 - 1).map(
    lambda s: random_p(np.random.default_rng(s), int(s % 20) + 2, int(s % 4) + 2)
)


class TestSoftAssignments:
    def test_zero_theta_uniform(self):
        p = cl.predict_soft_assignments(np.ones((3, 4)), np.zeros((4, 4)))
        np.testing.assert_allclose(p, 0.25)

    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        z, theta = rng.standard_normal((5, 3)), rng.standard_normal((3, 3))
        shifted = theta + rng.standard_normal((3, 1))
        np.testing.assert_allclose(cl.predict_soft_assignments(z, theta),
                                   cl.predict_soft_assignments(z, shifted), atol=1e-12)

    def test_two_by_two_value(self):
        p = cl.predict_soft_assignments(np.eye(2), np.eye(2))
        assert p[0, 0] == pytest.approx(np.e / (np.e + 1))
        assert p[0, 0] == pytest.approx(0.7311, abs=1e-4)

    def test_extreme_logits_stay_finite(self):
        p = cl.predict_soft_assignments(np.array([[1e4, -1e4]]), np.eye(2))
        assert np.all(np.isfinite(p))
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_non_finite_rejected(self):
        with pytest.raises(FloatingPointError):
            cl.predict_soft_assignments(np.array([[np.nan, 0.0]]), np.eye(2))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            cl.predict_soft_assignments(np.ones((2, 3)), np.eye(2))

    @given(arrays(np.float64, (6, 3), elements=st.floats(-50, 50)), st.floats(-100, 100))
    def test_rows_sum_to_one_and_shift(self, logits, c):
        p = cl.softmax(logits)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(cl.softmax(logits + c), p, atol=1e-12)


class TestFrequency:
    def test_counts(self):
        q = np.array([[1, 0], [1, 0], [1, 0], [0, 1]], float)
        np.testing.assert_allclose(cl.empirical_frequency(q), [0.75, 0.25])

    def test_uniform(self):
        np.testing.assert_allclose(cl.empirical_frequency(np.full((5, 4), 0.25)), 0.25)

    @given(row_stochastic)
    def test_sums_to_one(self, q):
        assert cl.empirical_frequency(q).sum() == pytest.approx(1.0, abs=1e-12)


class TestClusteringLoss:
    def test_identical_uniform_is_zero(self):
        q = np.full((4, 2), 0.5)
        assert cl.clustering_loss(q, q).total == pytest.approx(0.0, abs=1e-15)

    def test_single_sample_values(self):
        loss = cl.clustering_loss(np.array([[1.0, 0.0]]), np.array([[0.5, 0.5]]))
        assert loss.clustering_kl == pytest.approx(np.log(2))
        assert loss.balance_kl == pytest.approx(np.log(2))

    def test_gibbs(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            q, p = random_p(rng, 10, 3), random_p(rng, 10, 3)
            assert cl.clustering_loss(q, p).clustering_kl > 0
            assert cl.clustering_loss(p, p).clustering_kl == pytest.approx(0.0, abs=1e-14)

    def test_term_by_term(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            n, k = 15, 4
            q, p = random_p(rng, n, k), random_p(rng, n, k)
            prior = rng.dirichlet(np.ones(k))
            f = q.mean(axis=0)
            expected_qp = sum(kl(q[i], p[i]) for i in range(n)) / n
            expected_fu = kl(f, prior)
            loss = cl.clustering_loss(q, p, prior)
            assert loss.clustering_kl == pytest.approx(expected_qp, abs=1e-10)
            assert loss.balance_kl == pytest.approx(expected_fu, abs=1e-10)
            assert loss.total == pytest.approx(expected_qp + expected_fu, abs=1e-10)

    def test_zero_entries_in_q(self):
        q = np.array([[1.0, 0.0], [0.0, 1.0]])
        p = np.array([[0.9, 0.1], [0.2, 0.8]])
        loss = cl.clustering_loss(q, p)
        assert loss.clustering_kl == pytest.approx(-(np.log(0.9) + np.log(0.8)) / 2)
        assert loss.balance_kl == pytest.approx(0.0, abs=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            cl.clustering_loss(np.ones((2, 2)) / 2, np.ones((3, 2)) / 2)


class TestEstimateTargets:
    def test_uniform(self):
        np.testing.assert_allclose(cl.estimate_targets(np.full((6, 3), 1 / 3)), 1 / 3)

    def test_two_by_two_value(self):
        q = cl.estimate_targets(np.array([[0.8, 0.2], [0.4, 0.6]]))
        a, b = 0.8 / np.sqrt(1.2), 0.2 / np.sqrt(0.8)
        np.testing.assert_allclose(q[0], [a / (a + b), b / (a + b)])
        np.testing.assert_allclose(q[0], [0.7656, 0.2344], atol=1e-4)

    @given(row_stochastic, st.integers(0, 1000))
    def test_row_permutation_equivariance(self, p, seed):
        perm = np.random.default_rng(seed).permutation(len(p))
        np.testing.assert_allclose(cl.estimate_targets(p[perm]), cl.estimate_targets(p)[perm],
                                   atol=1e-14)

    @given(row_stochastic)
    def test_row_stochastic(self, p):
        p = np.maximum(p, 1e-300)
        q = cl.estimate_targets(p / p.sum(axis=1, keepdims=True))
        assert np.all(q >= 0)
        np.testing.assert_allclose(q.sum(axis=1), 1.0, atol=1e-9)

    def test_zero_column_rejected(self):
        with pytest.raises(ValueError):
            cl.estimate_targets(np.array([[1.0, 0.0], [1.0, 0.0]]))

    def test_minimises_row_kl_to_reweighted(self):
        # the closed form is the row-normalised r, the unique minimiser of sum q log(q/r)
        rng = np.random.default_rng(3)
        p = random_p(rng, 8, 3)
        r = p / np.sqrt(p.sum(axis=0))
        q = cl.estimate_targets(p)
        np.testing.assert_allclose(q, r / r.sum(axis=1, keepdims=True), atol=1e-15)

        def objective(v):
            return float(np.sum(v * np.log(v / r)))

        best = objective(q)
        for _ in range(200):
            other = random_p(rng, 8, 3)
            assert objective(other) > best

    def test_prior_reduces_to_uniform(self):
        p = random_p(np.random.default_rng(4), 10, 4)
        np.testing.assert_allclose(cl.estimate_targets(p, cl.uniform_prior(4)),
                                   cl.estimate_targets(p), atol=1e-15)

    def test_balancing(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            logits = rng.standard_normal((40, 3))
            logits[:, 0] += 3.0
            p = cl.softmax(logits)
            u = cl.uniform_prior(3)
            assert kl(cl.estimate_targets(p).mean(axis=0), u) < kl(p.mean(axis=0), u)


class TestOracle:
    def test_uniform_fixed_point(self):
        q = cl.targets_oracle(np.full((10, 3), 1 / 3))
        np.testing.assert_allclose(q, 1 / 3, atol=1e-8)

    def test_closed_form_small_n(self):
        rng = np.random.default_rng(6)
        p = random_p(rng, 50, 3)
        gap = np.max(np.abs(cl.targets_oracle(p) - cl.estimate_targets(p)))
        assert gap <= 1e-2

    def test_oracle_beats_closed_form_on_objective(self):
        rng = np.random.default_rng(7)
        p = random_p(rng, 20, 3)
        assert cl.target_objective(cl.targets_oracle(p), p) <= cl.target_objective(
            cl.estimate_targets(p), p) + 1e-12

    def test_oracle_is_stationary(self):
        # no feasible descent direction: the projected step does not move
        rng = np.random.default_rng(8)
        p = random_p(rng, 12, 3)
        q = cl.targets_oracle(p)
        g = cl._target_objective_grad(q, p, np.log(cl.uniform_prior(3)))
        moved = cl.project_rows_to_simplex(q - 1e-3 * g)
        assert np.max(np.abs(moved - q)) < 1e-8

    def test_non_convergence_reports_gradient(self):
        p = random_p(np.random.default_rng(9), 30, 3)
        with pytest.raises(cl.OracleNotConverged) as err:
            cl.targets_oracle(p, step_count=3)
        assert err.value.iterations == 3
        assert np.isfinite(err.value.grad_norm)

    def test_rejects_zero_entries(self):
        with pytest.raises(ValueError):
            cl.targets_oracle(np.array([[1.0, 0.0]]))

    @given(arrays(np.float64, (5, 4), elements=st.floats(-3, 3)))
    def test_simplex_projection(self, v):
        proj = cl.project_rows_to_simplex(v)
        np.testing.assert_allclose(proj.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(proj >= 0)
        # projection is idempotent
        np.testing.assert_allclose(cl.project_rows_to_simplex(proj), proj, atol=1e-12)


class TestMStep:
    def test_zero_gradient_when_matching(self):
        rng = np.random.default_rng(10)
        z, theta = rng.standard_normal((6, 3)), rng.standard_normal((3, 3))
        p = cl.predict_soft_assignments(z, theta)
        _, g_theta, g_z = cl.m_step_loss_and_grads(p, z, theta)
        np.testing.assert_allclose(g_theta, 0, atol=1e-15)
        np.testing.assert_allclose(g_z, 0, atol=1e-15)

    def test_near_zero_loss(self):
        z = np.eye(3) * 50
        q = np.eye(3)
        loss, _, _ = cl.m_step_loss_and_grads(q, z, np.eye(3))
        assert loss < 1e-20

    def test_finite_differences(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            z, theta = rng.standard_normal((5, 3)), rng.standard_normal((3, 3))
            q = random_p(rng, 5, 3)
            _, g_theta, g_z = cl.m_step_loss_and_grads(q, z, theta)
            assert gradient_check(lambda t: cl.m_step_loss_and_grads(q, z, t)[0],
                                  lambda t: g_theta, theta) <= 1e-6
            assert gradient_check(lambda v: cl.m_step_loss_and_grads(q, v, theta)[0],
                                  lambda v: g_z, z) <= 1e-6

    def test_fit_head_reproduces_assignments(self):
        rng = np.random.default_rng(12)
        centres = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]])
        labels = rng.integers(0, 3, 60)
        z = centres[labels] + 0.1 * rng.standard_normal((60, 3))
        q = np.eye(3)[labels]
        theta = cl.fit_softmax_head(z, q, np.zeros((3, 3)), max_iter=50)
        assert np.all(cl.predict_soft_assignments(z, theta).argmax(axis=1) == labels)


def brute_force_partition(x, k):
    best = np.inf
    for labels in itertools.product(range(k), repeat=len(x)):
        labels = np.array(labels)
        if len(np.unique(labels)) < k:
            continue
        cost = sum(((x[labels == j] - x[labels == j].mean(0)) ** 2).sum() for j in range(k))
        best = min(best, cost)
    return best


class TestKMeans:
    def test_single_cluster_is_mean(self):
        x = np.random.default_rng(13).standard_normal((20, 3))
        c, labels = cl.kmeans(x, 1, np.random.default_rng(0))
        np.testing.assert_allclose(c[0], x.mean(axis=0))
        assert np.all(labels == 0)

    def test_two_pairs(self):
        x = np.array([[0.0, 0], [0.1, 0], [10, 10], [10.1, 10]])
        c, labels = cl.kmeans(x, 2, np.random.default_rng(0))
        assert labels[0] == labels[1] != labels[2] == labels[3]
        assert cl.kmeans_inertia(x, c, labels) == pytest.approx(brute_force_partition(x, 2))

    def test_matches_exhaustive_partition(self):
        rng = np.random.default_rng(14)
        for _ in range(5):
            x = rng.standard_normal((7, 2))
            c, labels = cl.kmeans(x, 2, rng)
            assert cl.kmeans_inertia(x, c, labels) == pytest.approx(brute_force_partition(x, 2), rel=1e-9)

    def test_monotone_objective(self):
        x = np.random.default_rng(15).standard_normal((200, 4))
        history = []
        cl.kmeans(x, 5, np.random.default_rng(1), history=history)
        assert len(history) == 10
        for run in history:
            assert all(b <= a + 1e-9 for a, b in zip(run, run[1:]))

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            cl.kmeans(np.zeros((2, 2)), 3, np.random.default_rng(0))

    def test_duplicate_points_keep_all_clusters(self):
        x = np.zeros((6, 2))
        x[5] = 1.0
        _, labels = cl.kmeans(x, 3, np.random.default_rng(0))
        assert len(labels) == 6

    def test_init_assignments(self):
        rng = np.random.default_rng(16)
        z = np.concatenate([rng.normal(m, 0.1, (25, 2)) for m in (0, 5, 10)])
        q = cl.init_assignments(z, 3, rng)
        assert set(np.unique(q)) == {0.0, 1.0}
        np.testing.assert_array_equal(q.sum(axis=1), 1.0)
        np.testing.assert_array_equal(np.sort(q.sum(axis=0)), [25, 25, 25])
