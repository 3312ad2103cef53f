import math
from itertools import permutations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from tgmvae.mixmath import (
    VARIANCE_FLOOR,
    DirichletPrior,
    MixtureError,
    dirichlet_log_density,
    gmm_em_fit,
    gmm_predict,
    kl_categorical,
    kl_identity_gaussians,
    kmeans,
)

from oracles import mc_kl_categorical, mc_kl_gaussians

# frozen with mpmath at 30 digits
KL_CAT_09_0925 = 0.004109130475875094
DIR_LOGPDF_2_11 = 1.3861113547433447


def best_agreement(pred, true, k):
    """Brute-force label permutation agreement."""
    return max(np.mean(np.array(perm)[pred] == true) for perm in permutations(range(k)))


class TestKl:
    def test_identical_gaussians(self):
        assert kl_identity_gaussians([1.0, -2.0], [1.0, -2.0]) == 0.0

    def test_unit_offset(self):
        assert kl_identity_gaussians([1.0, 0.0], [0.0, 0.0]) == 0.5

    def test_gaussian_dimension_mismatch(self):
        with pytest.raises(MixtureError):
            kl_identity_gaussians([0.0, 0.0], [0.0, 0.0, 0.0])

    @pytest.mark.parametrize("seed", range(5))
    def test_gaussian_matches_monte_carlo(self, seed):
        rng = np.random.default_rng(seed)
        mu_a, mu_b = rng.normal(size=3), rng.normal(size=3)
        est, se = mc_kl_gaussians(mu_a, mu_b, 100_000, rng)
        assert abs(kl_identity_gaussians(mu_a, mu_b) - est) < 3 * se

    def test_categorical_equal(self):
        assert kl_categorical([0.2, 0.3, 0.5], [0.2, 0.3, 0.5]) == 0.0

    def test_categorical_point_mass(self):
        assert kl_categorical([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-15)

    def test_categorical_frozen_value(self):
        assert kl_categorical([0.9, 0.1], [0.925, 0.075]) == pytest.approx(KL_CAT_09_0925, rel=1e-12)

    def test_categorical_infinite(self):
        with pytest.raises(MixtureError, match="infinite"):
            kl_categorical([0.5, 0.5], [1.0, 0.0])

    def test_categorical_zero_q_with_zero_p_is_fine(self):
        assert kl_categorical([1.0, 0.0], [1.0, 0.0]) == 0.0

    @pytest.mark.parametrize("seed", range(5))
    def test_categorical_matches_monte_carlo(self, seed):
        rng = np.random.default_rng(100 + seed)
        q, p = rng.dirichlet(np.ones(4)), rng.dirichlet(np.ones(4))
        est, se = mc_kl_categorical(q, p, 100_000, rng)
        assert abs(kl_categorical(q, p) - est) < 3 * se

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 6), st.integers(0, 2**32 - 1))
    def test_categorical_nonnegative_and_zero_iff_equal(self, k, seed):
        rng = np.random.default_rng(seed)
        q, p = rng.dirichlet(np.ones(k)), rng.dirichlet(np.ones(k))
        assert kl_categorical(q, p) >= -1e-12
        assert abs(kl_categorical(q, q)) < 1e-12
        if np.abs(q - p).max() > 1e-6:
            assert kl_categorical(q, p) > 0

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=5))
    def test_gaussian_nonnegative(self, mu):
        mu = np.array(mu)
        assert kl_identity_gaussians(mu, 0.5 * mu) >= 0.0


class TestDirichlet:
    def test_flat_is_log_gamma_k(self):
        prior = DirichletPrior(1.0, 1.0)
        for k, pi in ((3, [0.2, 0.3, 0.5]), (5, [0.1, 0.1, 0.2, 0.3, 0.3])):
            assert dirichlet_log_density(pi, prior) == pytest.approx(math.lgamma(k), abs=1e-12)

    def test_flat_three_is_log_two(self):
        assert dirichlet_log_density([0.6, 0.3, 0.1], DirichletPrior(1.0, 1.0)) == pytest.approx(math.log(2))

    def test_frozen_value(self):
        value = dirichlet_log_density([0.4, 0.4, 0.2], DirichletPrior(2.0, 1.1))
        assert value == pytest.approx(DIR_LOGPDF_2_11, rel=1e-12)

    def test_agrees_with_scipy(self):
        from scipy.stats import dirichlet

        pi = np.array([0.1, 0.25, 0.4, 0.25])
        prior = DirichletPrior(0.7, 1.1)
        assert dirichlet_log_density(pi, prior) == pytest.approx(dirichlet.logpdf(pi, prior.concentrations(4)))

    @pytest.mark.parametrize("pi", [[0.5, 0.6], [0.0, 1.0], [0.5, 0.5 + 1e-6]])
    def test_off_simplex(self, pi):
        with pytest.raises(MixtureError):
            dirichlet_log_density(pi, DirichletPrior())

    def test_bad_concentration(self):
        with pytest.raises(MixtureError):
            DirichletPrior(0.0, 1.0)


class TestKmeans:
    def test_two_pairs(self):
        pts = np.array([[0.0, 0.0], [0.0, 1.0], [10.0, 10.0], [10.0, 11.0]])
        centers, labels = kmeans(pts, 2, seed=0)
        assert labels[0] == labels[1] != labels[2] == labels[3]
        np.testing.assert_allclose(sorted(map(tuple, centers)), [(0.0, 0.5), (10.0, 10.5)])

    def test_single_cluster_is_mean(self):
        pts = np.random.default_rng(0).normal(size=(50, 3))
        centers, labels = kmeans(pts, 1, seed=0)
        np.testing.assert_allclose(centers[0], pts.mean(axis=0), rtol=1e-12)
        assert np.all(labels == 0)

    def test_three_gaussians(self):
        rng = np.random.default_rng(1)
        true = np.repeat([0, 1, 2], [70, 60, 70])
        pts = np.array([[0, 0], [6, 0], [0, 6]])[true] + rng.normal(size=(200, 2))
        _, labels = kmeans(pts, 3, seed=3)
        assert best_agreement(labels, true, 3) >= 0.95

    def test_deterministic(self):
        pts = np.random.default_rng(2).normal(size=(80, 4))
        a = kmeans(pts, 4, seed=5)
        b = kmeans(pts, 4, seed=5)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_fixed_point(self):
        # labels are nearest centers and centers are group means
        pts = np.random.default_rng(3).normal(size=(120, 2))
        centers, labels = kmeans(pts, 4, seed=0, n_init=3)
        d = ((pts[:, None] - centers[None]) ** 2).sum(-1)
        np.testing.assert_array_equal(labels, d.argmin(axis=1))
        for j in range(4):
            np.testing.assert_allclose(centers[j], pts[labels == j].mean(axis=0), rtol=1e-12)

    def test_restarts_never_worse(self):
        pts = np.random.default_rng(4).normal(size=(150, 3))

        def inertia(c, l):
            return ((pts - c[l]) ** 2).sum()

        assert inertia(*kmeans(pts, 5, seed=1, n_init=8)) <= inertia(*kmeans(pts, 5, seed=1)) + 1e-9

    def test_empty_input(self):
        with pytest.raises(MixtureError):
            kmeans(np.empty((0, 2)), 1)

    def test_too_many_clusters(self):
        with pytest.raises(MixtureError):
            kmeans(np.ones((5, 2)), 2)


class TestGmm:
    def test_single_gaussian_moments(self):
        x = np.random.default_rng(0).normal([1.0, -2.0, 3.0], [0.5, 2.0, 1.0], size=(500, 3))
        gmm = gmm_em_fit(x, 1, seed=0)
        np.testing.assert_allclose(gmm.weights, [1.0])
        np.testing.assert_allclose(gmm.means[0], x.mean(axis=0), rtol=0, atol=1e-9)
        np.testing.assert_allclose(gmm.variances[0], x.var(axis=0), rtol=0, atol=1e-9)

    def test_symmetric_midpoint(self):
        rng = np.random.default_rng(1)
        half = rng.normal(size=(200, 2))
        x = np.vstack([half + [-4.0, 0.0], -half + [4.0, 0.0]])  # exact point reflection
        gmm = gmm_em_fit(x, 2, seed=0)
        np.testing.assert_allclose(gmm_predict(gmm, [[0.0, 0.0]]), [[0.5, 0.5]], atol=1e-6)

    @pytest.mark.parametrize("covariance", ["diag", "spherical"])
    def test_log_likelihood_monotone(self, covariance):
        rng = np.random.default_rng(2)
        x = np.vstack([rng.normal(size=(100, 3)), rng.normal(3, 0.5, size=(80, 3)), rng.uniform(-5, 5, (20, 3))])
        gmm = gmm_em_fit(x, 3, seed=1, covariance=covariance, tol=0.0, max_iter=60)
        assert np.all(np.diff(gmm.log_likelihood) >= -1e-10)

    def test_invariants(self):
        rng = np.random.default_rng(3)
        x = np.vstack([rng.normal(size=(60, 4)), rng.normal(5, 1e-9, size=(10, 4))])
        gmm = gmm_em_fit(x, 2, seed=0)
        assert abs(gmm.weights.sum() - 1.0) < 1e-9
        assert np.all(gmm.variances >= VARIANCE_FLOOR)

    def test_spherical_ties_dimensions(self):
        x = np.random.default_rng(4).normal(0, [1.0, 3.0], size=(300, 2))
        gmm = gmm_em_fit(x, 1, seed=0, covariance="spherical")
        assert gmm.variances[0, 0] == gmm.variances[0, 1]
        assert gmm.variances[0, 0] == pytest.approx(x.var(axis=0).mean(), rel=1e-9)

    def test_predict_matches_scipy(self):
        rng = np.random.default_rng(5)
        x = np.vstack([rng.normal(size=(50, 2)), rng.normal(4, 1, size=(50, 2))])
        gmm = gmm_em_fit(x, 2, seed=0)
        dens = np.array([w * multivariate_normal(m, np.diag(v)).pdf(x)
                         for w, m, v in zip(gmm.weights, gmm.means, gmm.variances)]).T
        np.testing.assert_allclose(gmm_predict(gmm, x), dens / dens.sum(axis=1, keepdims=True), rtol=1e-9)

    def test_separated_clusters_recovered(self):
        rng = np.random.default_rng(6)
        true = np.repeat([0, 1, 2], 50)
        x = np.array([[0, 0], [8, 0], [0, 8]])[true] + rng.normal(size=(150, 2))
        pred = gmm_predict(gmm_em_fit(x, 3, seed=2), x).argmax(axis=1)
        assert best_agreement(pred, true, 3) == 1.0

    def test_bad_arguments(self):
        x = np.zeros((10, 2)) + np.arange(10)[:, None]
        with pytest.raises(MixtureError):
            gmm_em_fit(x, 0)
        with pytest.raises(MixtureError):
            gmm_em_fit(x, 2, covariance="full")
        gmm = gmm_em_fit(x, 2, seed=0)
        with pytest.raises(MixtureError):
            gmm_predict(gmm, np.zeros((1, 3)))

    def test_deterministic(self):
        x = np.random.default_rng(7).normal(size=(100, 3))
        a, b = gmm_em_fit(x, 3, seed=4), gmm_em_fit(x, 3, seed=4)
        assert a.means.tobytes() == b.means.tobytes()
