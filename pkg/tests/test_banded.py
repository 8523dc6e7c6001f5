"""Tests for banded Cholesky factorization and the selected inverse."""

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import sparse

from banded import (
    BandedCovariance,
    banded_cholesky,
    logdet_from_factor,
    selected_inverse,
    solve_cholesky_banded,
    to_lower_banded,
)
from errors import SingularSystemError


def block_tridiagonal(M, T, seed=0):
    rng = np.random.default_rng(seed)
    n = M * T
    dense = np.zeros((n, n))
    for t in range(T):
        g = rng.normal(size=(M, M))
        dense[t * M:(t + 1) * M, t * M:(t + 1) * M] = g @ g.T + 3.0 * np.eye(M)
        if t:
            off = 0.5 * rng.normal(size=(M, M))
            dense[t * M:(t + 1) * M, (t - 1) * M:t * M] = off
            dense[(t - 1) * M:t * M, t * M:(t + 1) * M] = off.T
    return dense


def test_solve_matches_dense():
    dense = block_tridiagonal(3, 8)
    factor, jitter = banded_cholesky(to_lower_banded(sparse.csr_matrix(dense), 5))
    rhs = np.random.default_rng(1).normal(size=24)
    assert jitter == 0.0
    assert_allclose(solve_cholesky_banded(factor, rhs), np.linalg.solve(dense, rhs), atol=1e-10)


def test_logdet_matches_dense():
    dense = block_tridiagonal(2, 10, seed=2)
    factor, _ = banded_cholesky(to_lower_banded(dense, 3))
    assert logdet_from_factor(factor) == pytest.approx(np.linalg.slogdet(dense)[1])


def test_selected_inverse_matches_dense_inverse():
    M, T = 2, 20
    dense = block_tridiagonal(M, T, seed=3)
    factor, _ = banded_cholesky(to_lower_banded(dense, 2 * M - 1))
    cov = BandedCovariance(bands=selected_inverse(factor), M=M, T=T)
    inverse = np.linalg.inv(dense)
    band = np.abs(np.subtract.outer(np.arange(M * T), np.arange(M * T))) <= 2 * M - 1
    assert_allclose(cov.to_dense()[band], inverse[band], atol=1e-8)
    dense_cov = cov.to_dense()
    assert np.max(np.abs(dense_cov - dense_cov.T)) < 1e-10


def test_selected_inverse_identity():
    factor, _ = banded_cholesky(to_lower_banded(sparse.identity(6), 1))
    cov = BandedCovariance(bands=selected_inverse(factor), M=1, T=6)
    assert_allclose(cov.to_dense(), np.eye(6))


def test_lag_blocks_and_block_access():
    M, T = 2, 5
    dense = block_tridiagonal(M, T, seed=4)
    factor, _ = banded_cholesky(to_lower_banded(dense, 2 * M - 1))
    cov = BandedCovariance(bands=selected_inverse(factor), M=M, T=T)
    inverse = np.linalg.inv(dense)
    assert_allclose(cov.block(3, 2), inverse[6:8, 4:6], atol=1e-10)
    assert_allclose(cov.lag_blocks(1)[2], inverse[6:8, 4:6], atol=1e-10)
    assert_allclose(cov.variances()[4], np.diag(inverse)[8:10], atol=1e-10)
    with pytest.raises(ValueError):
        cov.lag_blocks(T)


def test_jitter_rescues_semidefinite_matrix():
    dense = np.array([[1.0, 1.0], [1.0, 1.0]])
    factor, jitter = banded_cholesky(to_lower_banded(dense, 1))
    assert 0.0 < jitter <= 1e-2
    assert np.all(np.isfinite(factor))


def test_indefinite_matrix_raises():
    dense = np.array([[1.0, 0.0], [0.0, -5.0]])
    with pytest.raises(SingularSystemError):
        banded_cholesky(to_lower_banded(dense, 1), what="test system")
