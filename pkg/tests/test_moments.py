"""Tests for rectified-Gaussian moments and the expectation sums."""

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import stats

from conftest import random_model
from moments import (
    bivariate_normal_cdf,
    compute_moments,
    linear_rectified_moment,
    rectified_cross_moment,
    rectified_mean,
    rectified_moments,
    rectified_second_moment,
)


def test_standard_normal_half_moments():
    assert rectified_mean(0.0, 1.0) == pytest.approx(1.0 / np.sqrt(2.0 * np.pi))
    assert rectified_second_moment(0.0, 1.0) == pytest.approx(0.5)


def test_deterministic_limit():
    assert rectified_mean(2.0, 0.0) == pytest.approx(2.0)
    assert rectified_second_moment(2.0, 0.0) == pytest.approx(4.0)
    assert rectified_mean(-2.0, 0.0) == 0.0
    assert rectified_mean(2.0, 1e-20) == pytest.approx(2.0)


def test_bivariate_cdf_matches_scipy():
    rng = np.random.default_rng(0)
    for _ in range(20):
        h, k = rng.normal(size=2)
        rho = rng.uniform(-0.95, 0.95)
        expected = stats.multivariate_normal(mean=[0, 0], cov=[[1, rho], [rho, 1]]).cdf([h, k])
        assert bivariate_normal_cdf(h, k, rho) == pytest.approx(expected, abs=1e-6)


def test_cross_moment_independent_factorizes():
    value = rectified_cross_moment(0.3, 1.5, -0.2, 0.7, 0.0)
    assert value == pytest.approx(rectified_mean(0.3, 1.5) * rectified_mean(-0.2, 0.7))


def test_cross_moment_perfect_correlation_is_second_moment():
    value = rectified_cross_moment(0.4, 2.0, 0.4, 2.0, 2.0)
    assert value == pytest.approx(rectified_second_moment(0.4, 2.0), rel=1e-5)


def test_moments_match_monte_carlo():
    """Closed forms agree with a large Monte Carlo sample for random (mu, sigma, rho)."""
    rng = np.random.default_rng(1)
    n = 1_000_000
    for _ in range(5):
        mu = rng.normal(size=2)
        sd = rng.uniform(0.3, 2.0, size=2)
        rho = rng.uniform(-0.9, 0.9)
        cov = np.array([[sd[0] ** 2, rho * sd[0] * sd[1]], [rho * sd[0] * sd[1], sd[1] ** 2]])
        z = rng.multivariate_normal(mu, cov, size=n)
        phi = np.maximum(z, 0.0)
        se = 4.0 * (np.std(phi[:, 0] * phi[:, 1]) / np.sqrt(n)) + 1e-3
        assert rectified_cross_moment(mu[0], cov[0, 0], mu[1], cov[1, 1], cov[0, 1]) == (
            pytest.approx(np.mean(phi[:, 0] * phi[:, 1]), abs=se)
        )
        assert linear_rectified_moment(mu[0], mu[1], cov[1, 1], cov[0, 1]) == pytest.approx(
            np.mean(z[:, 0] * phi[:, 1]), abs=4.0 * np.std(z[:, 0] * phi[:, 1]) / np.sqrt(n) + 1e-3
        )


def test_rectified_moments_identity_is_gaussian():
    mean = np.array([0.5, -1.0])
    cov = np.array([[1.0, 0.2], [0.2, 2.0]])
    rm = rectified_moments(mean, cov, "identity")
    assert_allclose(rm.e_phi, mean)
    assert_allclose(rm.e_phi_phi, cov + np.outer(mean, mean))


def test_rectified_moments_diagonal_uses_second_moment():
    mean = np.array([0.5, -1.0])
    cov = np.array([[1.0, 0.2], [0.2, 2.0]])
    rm = rectified_moments(mean, cov)
    assert rm.e_phi_phi[0, 0] == pytest.approx(rectified_second_moment(0.5, 1.0))
    assert rm.e_phi_phi[0, 1] == pytest.approx(rm.e_phi_phi[1, 0])


def test_point_mass_sums_are_plain_products():
    """Without covariance the sums reduce to products of the path."""
    model = random_model(M=2, N=3, K=1, seed=2)
    rng = np.random.default_rng(3)
    T = 6
    Z = rng.normal(size=(T, 2))
    X = rng.normal(size=(T, 3))
    S = rng.normal(size=(T, 1))
    m = compute_moments(model, Z, None, X, S)
    phi = np.maximum(Z, 0.0)
    assert m.T == T
    assert_allclose(m.E1, phi[:-1].T @ phi[:-1])
    assert_allclose(m.E2, Z[1:].T @ Z[:-1])
    assert_allclose(m.E5, Z[1:].T @ phi[:-1])
    assert_allclose(m.H1, X.T @ phi)
    assert_allclose(m.H3, phi.T @ phi)
    assert_allclose(m.F4, S[1:].T @ phi[:-1])
    assert_allclose(m.Ez1z1, np.outer(Z[0], Z[0]))
