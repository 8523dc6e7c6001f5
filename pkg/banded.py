"""Banded symmetric positive definite linear algebra.

The E-step Hessian is block-banded: block-tridiagonal for the linear head
and wider for the BOLD head. Everything here works on LAPACK lower band
storage, `ab[k, j] = L[j + k, j]`, so memory and time scale with the
bandwidth rather than with (MT)^2.
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy import linalg, sparse

from errors import SingularSystemError

logger = logging.getLogger(__name__)

JITTER_START = 1e-8
JITTER_MAX = 1e-2


def to_lower_banded(mat: sparse.spmatrix, bandwidth: int) -> np.ndarray:
    """Copy the lower band of a symmetric sparse matrix into band storage."""
    mat = sparse.csr_matrix(mat)
    n = mat.shape[0]
    ab = np.zeros((bandwidth + 1, n))
    for k in range(min(bandwidth, n - 1) + 1):
        ab[k, : n - k] = mat.diagonal(-k)
    return ab


def banded_cholesky(
    ab: np.ndarray,
    what: str = "banded system",
    jitter_start: float = JITTER_START,
    jitter_max: float = JITTER_MAX,
) -> Tuple[np.ndarray, float]:
    """Lower banded Cholesky factor with escalating diagonal jitter.

    Tries the plain factorization first, then adds jitter starting at
    `jitter_start` and growing tenfold up to `jitter_max`.

    Returns:
        (factor in lower band storage, jitter that was added)

    Raises:
        SingularSystemError: If the matrix is not positive definite even
            with the largest jitter
    """
    try:
        return linalg.cholesky_banded(ab, lower=True), 0.0
    except linalg.LinAlgError:
        pass

    jitter = jitter_start
    while jitter <= jitter_max * (1 + 1e-12):
        shifted = ab.copy()
        shifted[0] += jitter
        try:
            factor = linalg.cholesky_banded(shifted, lower=True)
            logger.warning(f"{what}: added diagonal jitter {jitter:.1e} to factorize")
            return factor, jitter
        except linalg.LinAlgError:
            jitter *= 10.0
    raise SingularSystemError(what)


def solve_cholesky_banded(factor: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    return linalg.cho_solve_banded((factor, True), rhs)


def logdet_from_factor(factor: np.ndarray) -> float:
    """log|L L^T| from a lower banded Cholesky factor."""
    return 2.0 * float(np.sum(np.log(factor[0])))


def selected_inverse(factor: np.ndarray) -> np.ndarray:
    """Entries of (L L^T)^{-1} inside the band of L.

    Backward recursion over columns; each column needs only the already
    computed band entries to its lower right, so the cost is
    O(n * bandwidth^2) instead of a dense inverse.

    Returns:
        The band of the inverse in lower band storage (same shape as factor)
    """
    p = factor.shape[0] - 1
    n = factor.shape[1]
    zb = np.zeros_like(factor)
    a_idx, b_idx = np.meshgrid(np.arange(p), np.arange(p), indexing="ij")
    dist = np.abs(a_idx - b_idx)
    low = np.minimum(a_idx, b_idx)

    for j in range(n - 1, -1, -1):
        q = min(p, n - 1 - j)
        ljj = factor[0, j]
        if q == 0:
            zb[0, j] = 1.0 / ljj**2
            continue
        col = factor[1 : q + 1, j]
        window = zb[dist[:q, :q], j + 1 + low[:q, :q]]
        off = -(window @ col) / ljj
        zb[1 : q + 1, j] = off
        zb[0, j] = 1.0 / ljj**2 - (col @ off) / ljj
    return zb


@dataclass(frozen=True)
class BandedCovariance:
    """Posterior covariance of time-major stacked states, kept as a band.

    Entries further than `bandwidth` from the diagonal are treated as zero.
    """

    bands: np.ndarray
    M: int
    T: int

    @property
    def bandwidth(self) -> int:
        return self.bands.shape[0] - 1

    @classmethod
    def zeros(cls, M: int, T: int, bandwidth: int = 0) -> "BandedCovariance":
        """Point-mass posterior."""
        bandwidth = max(bandwidth, 2 * M - 1)
        return cls(bands=np.zeros((bandwidth + 1, M * T)), M=M, T=T)

    def _gather(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        offset = np.abs(rows - cols)
        anchor = np.minimum(rows, cols)
        inside = offset <= self.bandwidth
        out = np.zeros(np.broadcast(rows, cols).shape)
        out[inside] = self.bands[offset[inside], anchor[inside]]
        return out

    def lag_blocks(self, lag: int) -> np.ndarray:
        """Cov(z_{t+lag}, z_t) for t = 0..T-1-lag, shape (T-lag, M, M)."""
        if lag < 0 or lag >= self.T:
            raise ValueError(f"lag must be in [0, {self.T - 1}], got {lag}")
        t = np.arange(self.T - lag)[:, None, None]
        i = np.arange(self.M)[None, :, None]
        j = np.arange(self.M)[None, None, :]
        rows = (t + lag) * self.M + i
        cols = t * self.M + j
        return self._gather(np.broadcast_to(rows, (t.size, self.M, self.M)), cols)

    def diag_blocks(self) -> np.ndarray:
        return self.lag_blocks(0)

    def variances(self) -> np.ndarray:
        return self.bands[0].reshape(self.T, self.M).copy()

    def block(self, t: int, s: int) -> np.ndarray:
        """Cov(z_t, z_s) as an M x M matrix (zero outside the band)."""
        i = np.arange(self.M)[:, None]
        j = np.arange(self.M)[None, :]
        return self._gather(t * self.M + i + 0 * j, s * self.M + j + 0 * i)

    def to_dense(self) -> np.ndarray:
        """Full MT x MT matrix with zeros outside the band. Small problems only."""
        n = self.M * self.T
        dense = np.zeros((n, n))
        for k in range(min(self.bandwidth, n - 1) + 1):
            diag = self.bands[k, : n - k]
            dense += np.diag(diag, -k)
            if k:
                dense += np.diag(diag, k)
        return dense
