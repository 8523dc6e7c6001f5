"""BOLD observation head: HRF kernel, block convolution matrix and the
observation x_t = B (hrf * z)_t + J r_t + eta_t.

Tap ordering: `taps` (h_1..h_n) are stored in the order the convolution
matrix consumes them, so h_n weights the current state and h_1 the state
n-1 samples back. `HrfKernel.response` gives the same weights in lag
order (lag 0 first), which is how kernels are written to and read from
CSV files.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy import signal, sparse, stats

from errors import DimensionError, ParameterError
from plrnn import (
    Nonlinearity,
    Trajectory,
    apply_phi,
    check_diagonal_covariance,
    checked_array,
    make_rng,
    noise_requested,
)

logger = logging.getLogger(__name__)

# Double-gamma parameters: response delay, undershoot delay, dispersions, ratio
RESPONSE_DELAY = 6.0
UNDERSHOOT_DELAY = 16.0
RESPONSE_DISPERSION = 1.0
UNDERSHOOT_DISPERSION = 1.0
UNDERSHOOT_RATIO = 6.0


@dataclass(frozen=True)
class HrfKernel:
    taps: np.ndarray
    tr: float

    def __post_init__(self):
        taps = np.array(self.taps, dtype=float).reshape(-1)
        if taps.size < 1:
            raise ParameterError("taps", "kernel needs at least one tap")
        if not np.all(np.isfinite(taps)):
            raise ParameterError("taps", "contains non-finite values")
        if taps.sum() <= 0:
            raise ParameterError("taps", "taps must sum to a positive value")
        if self.tr <= 0:
            raise ParameterError("tr", "sampling interval must be positive")
        taps.setflags(write=False)
        object.__setattr__(self, "taps", taps)

    @property
    def n(self) -> int:
        return self.taps.shape[0]

    @property
    def response(self) -> np.ndarray:
        """Weights in lag order: response[k] multiplies z_{t-k}."""
        return self.taps[::-1].copy()

    @property
    def lag_times(self) -> np.ndarray:
        return np.arange(self.n) * self.tr

    @classmethod
    def from_response(cls, response: np.ndarray, tr: float) -> "HrfKernel":
        """Build a kernel from lag-ordered weights (lag 0 first)."""
        return cls(taps=np.asarray(response, dtype=float)[::-1], tr=tr)

    @classmethod
    def delta(cls, tr: float = 1.0) -> "HrfKernel":
        return cls(taps=np.ones(1), tr=tr)


@dataclass(frozen=True)
class ObsParamsBold:
    """BOLD observation head.

    With `convolve_phi` set, the kernel convolves phi(z) instead of z.
    """

    B: np.ndarray
    J: np.ndarray
    Gamma: np.ndarray
    kernel: HrfKernel
    convolve_phi: bool = False

    kind = "bold"

    def __post_init__(self):
        B = np.array(self.B, dtype=float)
        if B.ndim != 2:
            raise DimensionError("B", B.shape, detail="must be N x M")
        N = B.shape[0]
        J = np.array(self.J, dtype=float)
        if J.size == 0:
            J = np.zeros((N, 0))
        if J.ndim != 2 or J.shape[0] != N:
            raise DimensionError("J", J.shape, (N, J.shape[-1] if J.ndim else 0))
        object.__setattr__(self, "B", checked_array("B", B, B.shape))
        object.__setattr__(self, "J", checked_array("J", J, J.shape))
        object.__setattr__(self, "Gamma", checked_array("Gamma", self.Gamma, (N, N)))
        check_diagonal_covariance("Gamma", self.Gamma)

    @property
    def N(self) -> int:
        return self.B.shape[0]

    @property
    def M(self) -> int:
        return self.B.shape[1]

    @property
    def P(self) -> int:
        return self.J.shape[1]

    def replace(self, **changes) -> "ObsParamsBold":
        return dataclasses.replace(self, **changes)


def canonical_hrf(tr: float, duration: float = 32.0) -> HrfKernel:
    """Canonical double-gamma HRF sampled every `tr` seconds.

    Args:
        tr: Sampling interval in seconds
        duration: Kernel length in seconds

    Returns:
        HrfKernel whose peak weight is exactly 1
    """
    if tr <= 0:
        raise ParameterError("tr", "sampling interval must be positive")
    if duration < tr:
        raise ParameterError("duration", f"must be at least tr={tr}")
    t = np.arange(int(np.floor(duration / tr)) + 1) * tr
    curve = stats.gamma.pdf(
        t, RESPONSE_DELAY / RESPONSE_DISPERSION, scale=RESPONSE_DISPERSION
    ) - stats.gamma.pdf(
        t, UNDERSHOOT_DELAY / UNDERSHOOT_DISPERSION, scale=UNDERSHOOT_DISPERSION
    ) / UNDERSHOOT_RATIO
    curve = curve / curve.max()
    return HrfKernel.from_response(curve, tr)


def build_H(kernel: HrfKernel, M: int, T: int) -> sparse.csr_matrix:
    """Block convolution matrix (MT x MT) acting on time-major stacked states.

    For M = 1 this is the lower-banded Toeplitz matrix with h_n on the
    diagonal and h_{n-1}..h_1 on the sub-diagonals; for M > 1 every scalar
    entry becomes an M x M diagonal block.
    """
    if kernel.n > T:
        raise DimensionError(
            "kernel", (kernel.n,), (T,), detail="kernel length exceeds series length"
        )
    response = kernel.response
    offsets = [-lag for lag in range(kernel.n)]
    H1 = sparse.diags(
        [np.full(T - lag, response[lag]) for lag in range(kernel.n)],
        offsets,
        shape=(T, T),
    )
    return sparse.kron(H1, sparse.identity(M), format="csr")


def convolve_states(kernel: HrfKernel, Z: np.ndarray) -> np.ndarray:
    """Causal truncated convolution of each column of Z (T x M) with the kernel."""
    Z = np.asarray(Z, dtype=float)
    return signal.lfilter(kernel.response, [1.0], Z, axis=0)


def observe_bold(
    obs: ObsParamsBold,
    z: Union[np.ndarray, Trajectory],
    nuisance: Optional[np.ndarray] = None,
    seed: Optional[int] = None,
    nonlinearity: Nonlinearity = "relu",
    noise: Optional[bool] = None,
) -> Trajectory:
    """Map latent states to BOLD observations.

    Args:
        obs: BOLD observation parameters
        z: T x M latent states
        nuisance: T x P nuisance regressors (required when P > 0)
        seed: Seed for observation noise
        nonlinearity: Used only when obs.convolve_phi is set
        noise: Add N(0, Gamma) noise. By default only when a seed is given.

    Returns:
        Trajectory of T x N observations
    """
    Z = z.values if isinstance(z, Trajectory) else np.asarray(z, dtype=float)
    if Z.ndim != 2 or Z.shape[1] != obs.M:
        raise DimensionError("z", Z.shape, (Z.shape[0] if Z.ndim else 0, obs.M))
    T = Z.shape[0]
    R = _nuisance_for(obs, T, nuisance)

    drive = apply_phi(Z, nonlinearity) if obs.convolve_phi else Z
    X = convolve_states(obs.kernel, drive) @ obs.B.T + R @ obs.J.T
    if noise_requested(noise, seed):
        rng = make_rng(seed, 1)
        X = X + np.sqrt(np.diag(obs.Gamma)) * rng.standard_normal(X.shape)
    return Trajectory(
        values=X,
        nuisance=R if obs.P > 0 else None,
        unstable=not np.all(np.isfinite(X)),
    )


def _nuisance_for(obs: ObsParamsBold, T: int, nuisance: Optional[np.ndarray]) -> np.ndarray:
    if nuisance is None:
        if obs.P > 0:
            raise DimensionError("nuisance", None, (T, obs.P), detail="required when P > 0")
        return np.zeros((T, 0))
    R = np.asarray(nuisance, dtype=float)
    if R.ndim == 1:
        R = R[:, None]
    if R.shape != (T, obs.P):
        raise DimensionError("nuisance", R.shape, (T, obs.P))
    return R
