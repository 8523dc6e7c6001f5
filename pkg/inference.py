"""EM machinery for the PLRNN state space model.

E-step: the log joint p(X, Z | theta) is piecewise quadratic in the stacked
states z (time-major, length MT). Within the region selected by the
indicator vector d (d_i = 1 where z_i > 0) it reads

    Q_d(z) = -1/2 z^T L_d z + z^T v_d + const
    L_d = U0 + D U1 + U1^T D + D U2 D + G^T H^T U3 H G
    v_d = v0 + D v1 + G H^T v2

with D = diag(d) and G = D when the observation drive is phi(z) (G = I
otherwise). The MAP path is found by alternating a banded solve of
L_d z = v_d with d := I(z > 0). The Laplace covariance is the band of
L_d^{-1}.

M-step: closed-form regressions of the expected sufficient statistics
(see moments.MomentSums), solved row by row so that the zero pattern of A
(diagonal) and W (zero diagonal) is respected.

Constant convention: Q and the log joint omit the -(T(M+N)/2) log(2 pi)
term; everything else (including the log-determinants) is kept.
"""

import itertools
import logging
import warnings
from dataclasses import dataclass, field
from typing import FrozenSet, List, NamedTuple, Optional, Tuple

import numpy as np
from scipy import sparse

from banded import (
    BandedCovariance,
    banded_cholesky,
    logdet_from_factor,
    selected_inverse,
    solve_cholesky_banded,
    to_lower_banded,
)
from errors import ConvergenceWarning, DimensionError, ParameterError, SingularSystemError
from hrf import build_H, convolve_states
from moments import MomentSums, compute_moments
from plrnn import ModelBundle, PlrnnParams, apply_phi, make_rng

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)
FREEZABLE = frozenset({"mu0", "A", "W", "h", "C", "Sigma", "B", "J", "Gamma"})
# Gram matrices worse than this are reported as singular
CONDITION_LIMIT = 1e14


@dataclass(frozen=True)
class EstepConfig:
    """Knobs of the MAP search.

    `exhaustive_max_dim`: when MT is at most this, every region optimum is
    also evaluated and the best one kept. `qp_polish` runs a projected
    gradient refinement inside the final region.
    """

    max_iter: int = 100
    exhaustive_max_dim: int = 12
    qp_polish: bool = False
    qp_max_iter: int = 500
    qp_tol: float = 1e-10


@dataclass(frozen=True)
class EmConfig:
    max_iter: int = 200
    tol: float = 1e-5
    ridge_lambda: float = 0.0
    freeze: FrozenSet[str] = frozenset()
    min_variance: float = 1e-6
    diagonal_loading: bool = False
    # Relative drop of Q beyond which an M-step is rejected and EM stops
    monotone_slack: float = 1e-6
    estep: EstepConfig = field(default_factory=EstepConfig)
    seed: Optional[int] = None

    def __post_init__(self):
        unknown = set(self.freeze) - FREEZABLE
        if unknown:
            raise ParameterError(
                "freeze", f"unknown names {sorted(unknown)}. Valid options: {sorted(FREEZABLE)}"
            )
        object.__setattr__(self, "freeze", frozenset(self.freeze))
        if self.ridge_lambda < 0:
            raise ParameterError("ridge_lambda", "must be non-negative")


# ---------------------------------------------------------------------------
# Data plumbing
# ---------------------------------------------------------------------------


def prepare_data(model: ModelBundle, X, S=None, R=None):
    """Validate X, S, R against the model; absent S and R become empty columns."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != model.N:
        raise DimensionError("X", X.shape, (X.shape[0] if X.ndim else 0, model.N))
    T = X.shape[0]
    K = model.latent.K
    if S is None:
        S = np.zeros((T, K))
    S = np.asarray(S, dtype=float).reshape(T, -1) if np.size(S) else np.zeros((T, K))
    if S.shape != (T, K):
        raise DimensionError("S", S.shape, (T, K))
    P = getattr(model.observation, "P", 0)
    if R is None or np.size(R) == 0:
        if P > 0:
            raise DimensionError("R", None, (T, P), detail="nuisance regressors required")
        R = np.zeros((T, P))
    R = np.asarray(R, dtype=float).reshape(T, -1)
    if R.shape != (T, P):
        raise DimensionError("R", R.shape, (T, P))
    return X, S, R


def _rectifies_observation(model: ModelBundle) -> bool:
    if model.latent.nonlinearity != "relu":
        return False
    if model.head == "linear":
        return True
    return bool(model.observation.convolve_phi)


def _inverse_diagonal(name: str, cov: np.ndarray) -> np.ndarray:
    diag = np.diag(cov)
    if np.any(diag <= 0):
        raise ParameterError(name, "variances must be strictly positive for inference")
    return 1.0 / diag


def _observation_target(model: ModelBundle, X: np.ndarray, R: np.ndarray) -> np.ndarray:
    if model.head == "linear":
        return X
    return X - R @ model.observation.J.T


def _observation_drive(model: ModelBundle, Z: np.ndarray) -> np.ndarray:
    drive = apply_phi(Z, model.latent.nonlinearity) if _rectifies_observation(model) else Z
    if model.head == "linear":
        return drive
    return convolve_states(model.observation.kernel, drive)


def log_joint(model: ModelBundle, Z: np.ndarray, X, S=None, R=None) -> float:
    """log p(X, Z | theta) evaluated directly from residuals (no 2 pi terms)."""
    X, S, R = prepare_data(model, X, S, R)
    Z = np.asarray(Z, dtype=float).reshape(X.shape[0], model.M)
    lat = model.latent
    sig = np.diag(lat.Sigma)
    gam = np.diag(model.observation.Gamma)

    pred = np.empty_like(Z)
    pred[0] = lat.mu0 + lat.C @ S[0]
    a = np.diag(lat.A)
    pred[1:] = a * Z[:-1] + lat.phi(Z[:-1]) @ lat.W.T + lat.h + S[1:] @ lat.C.T
    latent_res = Z - pred
    predicted = _observation_drive(model, Z) @ model.observation.B.T
    obs_res = _observation_target(model, X, R) - predicted

    T = X.shape[0]
    return float(
        -0.5 * np.sum(latent_res**2 / sig)
        - 0.5 * np.sum(obs_res**2 / gam)
        - 0.5 * T * (np.sum(np.log(sig)) + np.sum(np.log(gam)))
    )


# ---------------------------------------------------------------------------
# Quadratic system
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuadraticSystem:
    U0: sparse.csr_matrix
    U1: sparse.csr_matrix
    U2: sparse.csr_matrix
    U3: sparse.csr_matrix
    v0: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    H: sparse.csr_matrix
    d_omega: np.ndarray
    const: float
    M: int
    T: int
    bandwidth: int
    rectify_obs: bool
    piecewise: bool
    obs_precision: sparse.csr_matrix

    def effective_region(self, d: Optional[np.ndarray] = None) -> np.ndarray:
        """Indicator used in the dynamics (all ones for the identity transfer)."""
        if not self.piecewise:
            return np.ones(self.M * self.T)
        d = self.d_omega if d is None else d
        return np.asarray(d, dtype=float).reshape(-1)

    def hessian(self, d: Optional[np.ndarray] = None) -> sparse.csr_matrix:
        """Negative Hessian L_d of Q in region d."""
        dd = self.effective_region(d)
        D = sparse.diags(dd)
        G = D if self.rectify_obs else sparse.identity(dd.size)
        L = self.U0 + D @ self.U1 + self.U1.T @ D + D @ self.U2 @ D + G @ self.obs_precision @ G
        return sparse.csr_matrix(L)

    def rhs(self, d: Optional[np.ndarray] = None) -> np.ndarray:
        dd = self.effective_region(d)
        g = dd if self.rectify_obs else 1.0
        return self.v0 + dd * self.v1 + g * (self.H.T @ self.v2)

    def value(self, z: np.ndarray, d: Optional[np.ndarray] = None) -> float:
        """Q_d(z); with d = I(z > 0) this equals the log joint."""
        z = np.asarray(z, dtype=float).reshape(-1)
        if d is None:
            d = z > 0
        return float(-0.5 * z @ (self.hessian(d) @ z) + z @ self.rhs(d) + self.const)

    def gradient(self, z: np.ndarray, d: Optional[np.ndarray] = None) -> np.ndarray:
        z = np.asarray(z, dtype=float).reshape(-1)
        if d is None:
            d = z > 0
        return self.rhs(d) - self.hessian(d) @ z

    def factorize(self, d: np.ndarray, what: str = "E-step Hessian"):
        ab = to_lower_banded(self.hessian(d), self.bandwidth)
        return banded_cholesky(ab, what=what)

    def solve(self, d: np.ndarray) -> np.ndarray:
        factor, _ = self.factorize(d)
        return solve_cholesky_banded(factor, self.rhs(d))


def hessian_bandwidth(model: ModelBundle) -> int:
    M = model.M
    if model.head == "bold":
        return M * max(2, model.observation.kernel.n) - 1
    return 2 * M - 1


def assemble_system(
    model: ModelBundle,
    X,
    S=None,
    R=None,
    d_omega: Optional[np.ndarray] = None,
) -> QuadraticSystem:
    """Build U0..U3, v0..v2 and H for the E-step objective.

    Args:
        model: Current parameters
        X: (T, N) observations
        S: (T, K) inputs or None
        R: (T, P) nuisance regressors or None
        d_omega: Optional initial region indicator of length MT

    Returns:
        QuadraticSystem
    """
    X, S, R = prepare_data(model, X, S, R)
    lat = model.latent
    T, M = X.shape[0], lat.M
    if d_omega is None:
        d_omega = np.ones(M * T, dtype=bool)
    d_omega = np.asarray(d_omega, dtype=bool).reshape(-1)
    if d_omega.size != M * T:
        raise DimensionError("d_omega", d_omega.shape, (M * T,))

    sig_inv = np.diag(_inverse_diagonal("Sigma", lat.Sigma))
    gam_inv = np.diag(_inverse_diagonal("Gamma", model.observation.Gamma))
    A, W, B = lat.A, lat.W, model.observation.B

    upper = sparse.eye(T, k=1)
    lower = sparse.eye(T, k=-1)
    not_last = sparse.diags(np.r_[np.ones(T - 1), 0.0])
    last = sparse.diags(np.r_[np.zeros(T - 1), 1.0])

    U0 = (
        sparse.kron(not_last, sig_inv + A.T @ sig_inv @ A)
        + sparse.kron(last, sig_inv)
        + sparse.kron(upper, -A.T @ sig_inv)
        + sparse.kron(lower, -sig_inv @ A)
    )
    U1 = sparse.kron(not_last, W.T @ sig_inv @ A) + sparse.kron(upper, -W.T @ sig_inv)
    U2 = sparse.kron(not_last, W.T @ sig_inv @ W)
    U3 = sparse.kron(sparse.identity(T), B.T @ gam_inv @ B)

    drive = np.empty((T, M))
    drive[0] = lat.mu0 + lat.C @ S[0]
    drive[1:] = lat.h + S[1:] @ lat.C.T
    v0 = drive @ sig_inv
    v0[:-1] -= drive[1:] @ (sig_inv @ A)
    v1 = np.zeros((T, M))
    v1[:-1] = -drive[1:] @ (sig_inv @ W)
    target = _observation_target(model, X, R)
    v2 = target @ (gam_inv @ B)

    H = sparse.identity(M * T, format="csr") if model.head == "linear" else build_H(
        model.observation.kernel, M, T
    )
    obs_precision = sparse.csr_matrix(H.T @ U3 @ H)
    const = float(
        -0.5 * np.sum(drive**2 @ np.diag(sig_inv))
        - 0.5 * np.sum(target**2 @ np.diag(gam_inv))
        - 0.5 * T * (
            np.sum(np.log(np.diag(lat.Sigma))) + np.sum(np.log(np.diag(model.observation.Gamma)))
        )
    )

    return QuadraticSystem(
        U0=sparse.csr_matrix(U0),
        U1=sparse.csr_matrix(U1),
        U2=sparse.csr_matrix(U2),
        U3=sparse.csr_matrix(U3),
        v0=v0.reshape(-1),
        v1=v1.reshape(-1),
        v2=v2.reshape(-1),
        H=sparse.csr_matrix(H),
        d_omega=d_omega,
        const=const,
        M=M,
        T=T,
        bandwidth=hessian_bandwidth(model),
        rectify_obs=_rectifies_observation(model),
        piecewise=lat.nonlinearity == "relu",
        obs_precision=obs_precision,
    )


# ---------------------------------------------------------------------------
# E-step
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StatePosterior:
    """Laplace posterior over the latent path.

    `V` and `moments` are None for a MAP-only result (estep_map).
    """

    z_map: np.ndarray
    d_omega: np.ndarray
    Q_value: float
    converged: bool
    n_iter: int
    V: Optional[BandedCovariance] = None
    moments: Optional[MomentSums] = None
    logdet_precision: float = float("nan")

    @property
    def T(self) -> int:
        return self.z_map.shape[0]

    @property
    def M(self) -> int:
        return self.z_map.shape[1]

    @property
    def entropy(self) -> float:
        """Differential entropy of N(z_map, V)."""
        n = self.T * self.M
        return 0.5 * (n * (1.0 + LOG_2PI) - self.logdet_precision)


def _projected_gradient(system: QuadraticSystem, z: np.ndarray, config: EstepConfig) -> np.ndarray:
    d = z > 0
    L = system.hessian(d)
    v = system.rhs(d)
    step = 1.0 / max(float(abs(L).sum(axis=1).max()), 1e-12)

    def project(x):
        return np.where(d, np.maximum(x, 0.0), np.minimum(x, 0.0))

    x = project(z)
    for _ in range(config.qp_max_iter):
        updated = project(x + step * (v - L @ x))
        if np.max(np.abs(updated - x)) < config.qp_tol:
            return updated
        x = updated
    return x


def estep_map(
    model: ModelBundle,
    X,
    S=None,
    R=None,
    z_init: Optional[np.ndarray] = None,
    config: EstepConfig = EstepConfig(),
    seed: Optional[int] = None,
    system: Optional[QuadraticSystem] = None,
) -> StatePosterior:
    """MAP path by alternating region-wise banded solves and region updates.

    Args:
        model: Current parameters
        X, S, R: Observations, inputs, nuisance regressors
        z_init: Optional (T, M) starting path; its region seeds the search
            and it is kept as a candidate, so the result never scores lower
        config: Search settings
        seed: Seed for the single-bit flips of the cycle guard
        system: Pre-assembled system (assembled from the arguments if None)

    Returns:
        StatePosterior without covariance or moments
    """
    if system is None:
        system = assemble_system(model, X, S, R)
    M, T = system.M, system.T
    rng = make_rng(seed, 3)

    best_z, best_q = None, -np.inf
    if z_init is not None:
        z0 = np.asarray(z_init, dtype=float).reshape(-1)
        if z0.size != M * T:
            raise DimensionError("z_init", np.shape(z_init), (T, M))
        best_z, best_q = z0, system.value(z0)
        d = z0 > 0
    else:
        d = np.ones(M * T, dtype=bool)

    converged = False
    visited = set()
    n_iter = 0
    for n_iter in range(1, config.max_iter + 1):
        visited.add(d.tobytes())
        z = system.solve(d)
        q = system.value(z)
        if q > best_q:
            best_z, best_q = z, q
        d_new = z > 0
        if not system.piecewise or np.array_equal(d_new, d):
            converged = True
            break
        if d_new.tobytes() in visited:
            inconsistent = np.flatnonzero(d_new != d)
            flip = rng.choice(inconsistent)
            d = d.copy()
            d[flip] = d_new[flip]
            logger.debug(f"Region revisited at iteration {n_iter}; flipping bit {flip}")
        else:
            d = d_new

    if not converged:
        warnings.warn(
            f"E-step reached {config.max_iter} iterations without a consistent region",
            ConvergenceWarning,
        )
        logger.warning("E-step did not reach a consistent region; returning best solution")

    if system.piecewise and M * T <= config.exhaustive_max_dim:
        for bits in itertools.product((False, True), repeat=M * T):
            z = system.solve(np.array(bits))
            q = system.value(z)
            if q > best_q:
                best_z, best_q = z, q

    if config.qp_polish and system.piecewise:
        polished = _projected_gradient(system, best_z, config)
        q = system.value(polished)
        if q > best_q:
            best_z, best_q = polished, q

    z_map = best_z.reshape(T, M)
    logger.debug(f"E-step MAP: Q={best_q:.6g}, iterations={n_iter}, converged={converged}")
    return StatePosterior(
        z_map=z_map,
        d_omega=z_map > 0,
        Q_value=best_q,
        converged=converged,
        n_iter=n_iter,
    )


def estep_covariance(
    system: QuadraticSystem, d_omega: np.ndarray
) -> Tuple[BandedCovariance, float]:
    """Band of the inverse negative Hessian in region d_omega.

    Returns:
        (banded covariance, log-determinant of the negative Hessian)
    """
    factor, _ = system.factorize(np.asarray(d_omega).reshape(-1), what="posterior covariance")
    cov = BandedCovariance(bands=selected_inverse(factor), M=system.M, T=system.T)
    return cov, logdet_from_factor(factor)


def estep(
    model: ModelBundle,
    X,
    S=None,
    R=None,
    z_init: Optional[np.ndarray] = None,
    config: EstepConfig = EstepConfig(),
    seed: Optional[int] = None,
) -> StatePosterior:
    """Full E-step: MAP path, banded covariance and moment sums."""
    X, S, R = prepare_data(model, X, S, R)
    system = assemble_system(model, X, S, R)
    post = estep_map(model, X, S, R, z_init=z_init, config=config, seed=seed, system=system)
    return complete_posterior(model, system, post, X, S, R)


def complete_posterior(
    model: ModelBundle,
    system: QuadraticSystem,
    post: StatePosterior,
    X: np.ndarray,
    S: np.ndarray,
    R: np.ndarray,
) -> StatePosterior:
    """Attach covariance and moments to a MAP result under `system`."""
    V, logdet = estep_covariance(system, post.d_omega)
    moments = compute_moments(model, post.z_map, V, X, S, R)
    return StatePosterior(
        z_map=post.z_map,
        d_omega=post.d_omega,
        Q_value=post.Q_value,
        converged=post.converged,
        n_iter=post.n_iter,
        V=V,
        moments=moments,
        logdet_precision=logdet,
    )


def laplace_log_evidence(model: ModelBundle, posterior: StatePosterior, X, S=None, R=None) -> float:
    """Laplace approximation of log p(X | theta), with all constants."""
    if np.isnan(posterior.logdet_precision):
        raise ValueError("Posterior has no covariance; run the full E-step first")
    T, M, N = posterior.T, posterior.M, model.N
    joint = log_joint(model, posterior.z_map, X, S, R) - 0.5 * T * (M + N) * LOG_2PI
    return joint - 0.5 * posterior.logdet_precision + 0.5 * M * T * LOG_2PI


# ---------------------------------------------------------------------------
# M-steps
# ---------------------------------------------------------------------------


def _solve_rows(
    gram: np.ndarray,
    cross: np.ndarray,
    free: np.ndarray,
    current: np.ndarray,
    ridge: np.ndarray,
    what: str,
) -> np.ndarray:
    """Row-wise least squares L_j = argmin of the expected squared residual.

    Entries where `free` is False keep their value from `current`; their
    contribution is moved to the right-hand side.
    """
    rows, cols = cross.shape
    result = current.copy()
    for j in range(rows):
        idx = np.flatnonzero(free[j])
        if idx.size == 0:
            continue
        fixed = np.flatnonzero(~free[j])
        rhs = cross[j, idx] - current[j, fixed] @ gram[np.ix_(fixed, idx)]
        sub = gram[np.ix_(idx, idx)] + np.diag(ridge[idx])
        cond = np.linalg.cond(sub)
        if not np.isfinite(cond) or cond > CONDITION_LIMIT:
            raise SingularSystemError(f"{what} row {j}", cond)
        result[j, idx] = np.linalg.solve(sub, rhs)
    return result


def latent_gram(moments: MomentSums) -> np.ndarray:
    """Gram matrix of the regressors o_t = [z_{t-1}, phi(z_{t-1}), 1, s_t]."""
    m = moments
    return np.block(
        [
            [m.E3, m.E4.T, m.G10[:, None], m.F3.T],
            [m.E4, m.E1, m.G3[:, None], m.F4.T],
            [m.G10[None, :], m.G3[None, :], np.array([[m.T - 1.0]]), m.G2[None, :]],
            [m.F3, m.F4, m.G2[:, None], m.F6],
        ]
    )


def latent_cross(moments: MomentSums) -> np.ndarray:
    """sum E[z_t o_t^T] with o_t = [z_{t-1}, phi(z_{t-1}), 1, s_t]."""
    m = moments
    return np.hstack([m.E2, m.E5, m.G11[:, None], m.F5])


def _stack_latent(lat: PlrnnParams) -> np.ndarray:
    return np.hstack([lat.A, lat.W, lat.h[:, None], lat.C])


def latent_residual_scatter(lat: PlrnnParams, moments: MomentSums) -> np.ndarray:
    """Expected residual scatter sum E[eps_t eps_t^T] including t = 1."""
    m = moments
    L = _stack_latent(lat)
    cross = latent_cross(m)
    start = lat.mu0 + lat.C @ m.s1
    initial = m.Ez1z1 - np.outer(start, m.Ez1) - np.outer(m.Ez1, start) + np.outer(start, start)
    return initial + m.E0 - L @ cross.T - cross @ L.T + L @ latent_gram(m) @ L.T


def mstep_latent(
    moments: MomentSums,
    current: PlrnnParams,
    freeze: FrozenSet[str] = frozenset(),
    ridge_lambda: float = 0.0,
    min_variance: float = 1e-6,
) -> PlrnnParams:
    """Closed-form update of mu0, A, W, h, C and Sigma.

    Row j regresses z_{j,t} on [z_{j,t-1}, phi(z_{i,t-1}) for i != j, 1, s_t];
    frozen groups stay at their current values.

    Returns:
        Updated PlrnnParams
    """
    M, K = current.M, current.K
    width = 2 * M + 1 + K
    free = np.zeros((M, width), dtype=bool)
    for j in range(M):
        if "A" not in freeze:
            free[j, j] = True
        if "W" not in freeze:
            free[j, M : 2 * M] = True
            free[j, M + j] = False
        if "h" not in freeze:
            free[j, 2 * M] = True
        if "C" not in freeze:
            free[j, 2 * M + 1 :] = True

    ridge = np.full(width, ridge_lambda)
    L = _solve_rows(
        latent_gram(moments), latent_cross(moments), free, _stack_latent(current), ridge,
        "latent M-step",
    )
    A = np.diag(np.diag(L[:, :M]))
    W = L[:, M : 2 * M].copy()
    np.fill_diagonal(W, 0.0)
    h = L[:, 2 * M]
    C = L[:, 2 * M + 1 :]
    mu0 = current.mu0 if "mu0" in freeze else moments.Ez1 - C @ moments.s1

    updated = current.replace(A=A, W=W, h=h, C=C, mu0=mu0)
    if "Sigma" in freeze:
        return updated
    scatter = latent_residual_scatter(updated, moments)
    sigma = np.maximum(np.diag(scatter) / moments.T, min_variance)
    return updated.replace(Sigma=np.diag(sigma))


def observation_gram(moments: MomentSums) -> np.ndarray:
    m = moments
    return np.block([[m.H3, m.H2.T], [m.H2, m.F8]])


def observation_cross(moments: MomentSums) -> np.ndarray:
    return np.hstack([moments.H1, moments.F7])


def observation_residual_scatter(Y: np.ndarray, moments: MomentSums) -> np.ndarray:
    cross = observation_cross(moments)
    return moments.F2 - Y @ cross.T - cross @ Y.T + Y @ observation_gram(moments) @ Y.T


def mstep_observation(
    moments: MomentSums,
    current,
    freeze: FrozenSet[str] = frozenset(),
    ridge_lambda: float = 0.0,
    min_variance: float = 1e-6,
    diagonal_loading: bool = False,
):
    """Closed-form update of B, J and Gamma: Y = [H1 F7] Gram^{-1}.

    Args:
        moments: Expectation sums
        current: Current observation parameters (linear or BOLD head)
        freeze: Names of parameters kept fixed
        ridge_lambda: Ridge added to the Gram diagonal
        min_variance: Floor for Gamma
        diagonal_loading: Restrict B to a diagonal (requires N == M)

    Returns:
        Updated observation parameters of the same type as `current`
    """
    N, M = current.B.shape
    P = getattr(current, "P", 0)
    J = current.J if P > 0 else np.zeros((N, 0))
    Y0 = np.hstack([current.B, J])

    free = np.ones((N, M + P), dtype=bool)
    if "B" in freeze:
        free[:, :M] = False
    elif diagonal_loading:
        if N != M:
            raise DimensionError("B", (N, M), (M, M), detail="diagonal loading needs N == M")
        free[:, :M] = np.eye(M, dtype=bool)
        Y0[:, :M] = np.diag(np.diag(current.B))
    if "J" in freeze:
        free[:, M:] = False

    gram = observation_gram(moments)
    if free.all() and ridge_lambda == 0.0:
        cond = np.linalg.cond(gram)
        if not np.isfinite(cond) or cond > CONDITION_LIMIT:
            raise SingularSystemError("observation M-step Gram", cond)
        Y = np.linalg.solve(gram, observation_cross(moments).T).T
    else:
        Y = _solve_rows(
            gram, observation_cross(moments), free, Y0, np.full(M + P, ridge_lambda),
            "observation M-step",
        )

    changes = {"B": Y[:, :M]}
    if P > 0:
        changes["J"] = Y[:, M:]
    if "Gamma" not in freeze:
        scatter = observation_residual_scatter(Y, moments)
        changes["Gamma"] = np.diag(np.maximum(np.diag(scatter) / moments.T, min_variance))
    return current.replace(**changes)


def expected_joint_loglik(model: ModelBundle, moments: MomentSums) -> float:
    """Q(theta) = E_q[log p(X, Z | theta)] without the 2 pi constants."""
    lat = model.latent
    sig = np.diag(lat.Sigma)
    gam = np.diag(model.observation.Gamma)
    P = getattr(model.observation, "P", 0)
    J = model.observation.J if P > 0 else np.zeros((model.N, 0))
    Y = np.hstack([model.observation.B, J])
    latent_term = np.sum(np.diag(latent_residual_scatter(lat, moments)) / sig)
    obs_term = np.sum(np.diag(observation_residual_scatter(Y, moments)) / gam)
    T = moments.T
    return float(
        -0.5 * latent_term
        - 0.5 * obs_term
        - 0.5 * T * (np.sum(np.log(sig)) + np.sum(np.log(gam)))
    )


# ---------------------------------------------------------------------------
# EM
# ---------------------------------------------------------------------------


class EmResult(NamedTuple):
    model: ModelBundle
    posterior: StatePosterior
    q_trace: List[float]
    elbo_trace: List[float]
    converged: bool
    n_iter: int


def mstep(model: ModelBundle, moments: MomentSums, config: EmConfig) -> ModelBundle:
    latent = mstep_latent(
        moments, model.latent, config.freeze, config.ridge_lambda, config.min_variance
    )
    observation = mstep_observation(
        moments, model.observation, config.freeze, config.ridge_lambda,
        config.min_variance, config.diagonal_loading,
    )
    return model.replace(latent=latent, observation=observation)


def em_fit(
    model0: ModelBundle,
    X,
    S=None,
    R=None,
    config: EmConfig = EmConfig(),
    z_init: Optional[np.ndarray] = None,
) -> EmResult:
    """Alternate full E-steps and M-steps until Q stops improving.

    Stops when |Q_k - Q_{k-1}| / |Q_{k-1}| < tol or after max_iter
    iterations. The Laplace E-step does not guarantee that Q rises, so an
    M-step that lowers Q by more than `monotone_slack` (relative) is
    rejected and EM stops there; the Q trace is non-decreasing within that
    slack. Returns the model with the highest Q seen, with a final E-step
    under that model.
    """
    X, S, R = prepare_data(model0, X, S, R)
    T = X.shape[0]
    model = model0
    z = z_init
    q_trace: List[float] = []
    elbo_trace: List[float] = []
    best_model, best_q = model0, -np.inf
    converged = stalled = False
    n_iter = 0

    for n_iter in range(1, config.max_iter + 1):
        post = estep(model, X, S, R, z_init=z, config=config.estep, seed=_seed(config, n_iter))
        new_model = mstep(model, post.moments, config)
        q = expected_joint_loglik(new_model, post.moments)
        if not np.isfinite(q):
            raise SingularSystemError(f"EM iteration {n_iter} (non-finite Q)")
        if q_trace and q < q_trace[-1] - config.monotone_slack * abs(q_trace[-1]):
            logger.warning(
                f"EM iteration {n_iter}: Q fell from {q_trace[-1]:.8g} to {q:.8g}; "
                "keeping the previous model"
            )
            stalled = True
            break
        q_trace.append(q)
        elbo_trace.append(q - 0.5 * T * (model.M + model.N) * LOG_2PI + post.entropy)
        logger.debug(f"EM iteration {n_iter}: Q={q:.8g}")

        if q > best_q:
            best_model, best_q = new_model, q
        model, z = new_model, post.z_map
        if len(q_trace) > 1:
            previous = q_trace[-2]
            if abs(q - previous) <= config.tol * max(abs(previous), 1e-300):
                converged = True
                break

    if not (converged or stalled):
        warnings.warn(f"EM stopped after {config.max_iter} iterations", ConvergenceWarning)
        logger.warning(f"EM did not converge within {config.max_iter} iterations")

    final = estep(best_model, X, S, R, z_init=z, config=config.estep, seed=_seed(config, 0))
    return EmResult(best_model, final, q_trace, elbo_trace, converged, n_iter)


def _seed(config: EmConfig, iteration: int) -> Optional[int]:
    if config.seed is None:
        return None
    return int(np.random.SeedSequence([config.seed, iteration]).generate_state(1)[0])
