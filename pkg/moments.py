"""Rectified-Gaussian moments and the expectation sums used by the M-steps.

Under the Gaussian (Laplace) posterior every state z is normal, so the
moments of phi(z) = max(z, 0) have closed forms:

    E[phi(z)]         = mu Phi(mu/sigma) + sigma N(mu/sigma)
    E[phi(z)^2]       = (mu^2 + sigma^2) Phi(mu/sigma) + mu sigma N(mu/sigma)
    E[x phi(y)]       = mu_x E[phi(y)] + Cov(x, y) Phi(mu_y/sigma_y)
    E[phi(a) phi(b)]  = truncated bivariate normal moment

The bivariate normal CDF is computed through Owen's T function, which
keeps everything vectorized.
"""

import logging
from dataclasses import dataclass, fields
from typing import NamedTuple, Optional

import numpy as np
from scipy import special

from banded import BandedCovariance
from hrf import convolve_states
from plrnn import ModelBundle, Nonlinearity

logger = logging.getLogger(__name__)

# Variances at or below this are treated as point masses
DEGENERATE_VARIANCE = 1e-14
_RHO_LIMIT = 1.0 - 1e-12
_NUDGE = 1e-15


def _norm_pdf(x):
    return np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)


def _safe_sigma(var):
    var = np.asarray(var, dtype=float)
    degenerate = var <= DEGENERATE_VARIANCE
    return np.sqrt(np.where(degenerate, 1.0, var)), degenerate


def rectified_mean(mu, var):
    """E[max(z, 0)] for z ~ N(mu, var)."""
    mu = np.asarray(mu, dtype=float)
    sigma, degenerate = _safe_sigma(var)
    alpha = mu / sigma
    value = mu * special.ndtr(alpha) + sigma * _norm_pdf(alpha)
    return np.where(degenerate, np.maximum(mu, 0.0), value)


def rectified_second_moment(mu, var):
    """E[max(z, 0)^2] for z ~ N(mu, var)."""
    mu = np.asarray(mu, dtype=float)
    sigma, degenerate = _safe_sigma(var)
    alpha = mu / sigma
    value = (mu**2 + sigma**2) * special.ndtr(alpha) + mu * sigma * _norm_pdf(alpha)
    return np.where(degenerate, np.maximum(mu, 0.0) ** 2, value)


def linear_rectified_moment(mu_x, mu_y, var_y, cov_xy):
    """E[x max(y, 0)] for jointly normal (x, y)."""
    mu_x = np.asarray(mu_x, dtype=float)
    mu_y = np.asarray(mu_y, dtype=float)
    sigma, degenerate = _safe_sigma(var_y)
    p_active = np.where(degenerate, (mu_y > 0).astype(float), special.ndtr(mu_y / sigma))
    return mu_x * rectified_mean(mu_y, var_y) + np.asarray(cov_xy, dtype=float) * p_active


def bivariate_normal_cdf(h, k, rho):
    """P(U < h, V < k) for standard bivariate normal (U, V) with correlation rho."""
    h, k, rho = np.broadcast_arrays(
        np.asarray(h, dtype=float), np.asarray(k, dtype=float), np.asarray(rho, dtype=float)
    )
    rho = np.clip(rho, -_RHO_LIMIT, _RHO_LIMIT)
    h = np.where(h == 0.0, _NUDGE, h)
    k = np.where(k == 0.0, _NUDGE, k)
    s = np.sqrt(1.0 - rho**2)
    a_h = (k - rho * h) / (h * s)
    a_k = (h - rho * k) / (k * s)
    beta = np.where(h * k > 0, 0.0, 0.5)
    value = (
        0.5 * special.ndtr(h)
        + 0.5 * special.ndtr(k)
        - special.owens_t(h, a_h)
        - special.owens_t(k, a_k)
        - beta
    )
    return np.clip(value, 0.0, 1.0)


def rectified_cross_moment(mu_a, var_a, mu_b, var_b, cov_ab):
    """E[max(a, 0) max(b, 0)] for jointly normal (a, b)."""
    mu_a = np.asarray(mu_a, dtype=float)
    mu_b = np.asarray(mu_b, dtype=float)
    sa, deg_a = _safe_sigma(var_a)
    sb, deg_b = _safe_sigma(var_b)
    rho = np.clip(np.asarray(cov_ab, dtype=float) / (sa * sb), -_RHO_LIMIT, _RHO_LIMIT)
    s = np.sqrt(1.0 - rho**2)
    alpha = mu_a / sa
    beta = mu_b / sb

    prob = bivariate_normal_cdf(alpha, beta, rho)
    tail_b = special.ndtr((beta - rho * alpha) / s)
    tail_a = special.ndtr((alpha - rho * beta) / s)
    pdf_a = _norm_pdf(alpha)
    pdf_b = _norm_pdf(beta)
    e_u = pdf_a * tail_b + rho * pdf_b * tail_a
    e_v = pdf_b * tail_a + rho * pdf_a * tail_b
    e_uv = (
        rho * prob
        - rho * alpha * pdf_a * tail_b
        - rho * beta * pdf_b * tail_a
        + s * pdf_a * _norm_pdf((beta - rho * alpha) / s)
    )
    value = mu_a * mu_b * prob + mu_a * sb * e_v + mu_b * sa * e_u + sa * sb * e_uv

    value = np.where(deg_a & ~deg_b, np.maximum(mu_a, 0.0) * rectified_mean(mu_b, var_b), value)
    value = np.where(deg_b & ~deg_a, np.maximum(mu_b, 0.0) * rectified_mean(mu_a, var_a), value)
    return np.where(deg_a & deg_b, np.maximum(mu_a, 0.0) * np.maximum(mu_b, 0.0), value)


class RectifiedMoments(NamedTuple):
    e_phi: np.ndarray  # E[phi(z)], shape (..., M)
    e_z_phi: np.ndarray  # E[z_i phi(z_j)], shape (..., M, M)
    e_phi_phi: np.ndarray  # E[phi(z_i) phi(z_j)], shape (..., M, M)


def rectified_moments(
    mean: np.ndarray, cov: np.ndarray, nonlinearity: Nonlinearity = "relu"
) -> RectifiedMoments:
    """Moments of phi(z) for z ~ N(mean, cov), vectorized over leading axes.

    Args:
        mean: (..., M) means
        cov: (..., M, M) covariances
        nonlinearity: 'relu', or 'identity' for plain Gaussian moments

    Returns:
        RectifiedMoments with E[phi], E[z phi^T] and E[phi phi^T]
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    second = cov + mean[..., :, None] * mean[..., None, :]
    if nonlinearity == "identity":
        return RectifiedMoments(mean.copy(), second, second.copy())

    var = np.diagonal(cov, axis1=-2, axis2=-1)
    mu_i, mu_j = mean[..., :, None], mean[..., None, :]
    var_i, var_j = var[..., :, None], var[..., None, :]

    e_phi = rectified_mean(mean, var)
    e_z_phi = linear_rectified_moment(mu_i, mu_j, var_j, cov)
    e_phi_phi = rectified_cross_moment(mu_i, var_i, mu_j, var_j, cov)
    diag = np.arange(mean.shape[-1])
    e_phi_phi[..., diag, diag] = rectified_second_moment(mean, var)
    return RectifiedMoments(e_phi, e_z_phi, e_phi_phi)


@dataclass(frozen=True)
class MomentSums:
    """Posterior expectation sums consumed by the M-steps and by Q.

    Latent sums run over transitions t = 2..T (prev = t-1):
        E1 = sum E[phi_prev phi_prev^T]   E2 = sum E[z_t z_prev^T]
        E3 = sum E[z_prev z_prev^T]       E4 = sum E[phi_prev z_prev^T]
        E5 = sum E[z_t phi_prev^T]        E0 = sum E[z_t z_t^T]
        F3 = sum s_t E[z_prev]^T          F4 = sum s_t E[phi_prev]^T
        F5 = sum E[z_t] s_t^T             F6 = sum s_t s_t^T
        G10 = sum_{1..T-1} E[z_t]         G11 = sum_{2..T} E[z_t]
        G2 = sum s_t                      G3 = sum E[phi_prev]
    Observation sums run over t = 1..T with y_t the observation drive:
        F2 = sum x x^T   F7 = sum x r^T   F8 = sum r r^T
        H1 = sum x E[y]^T   H2 = sum r E[y]^T   H3 = sum E[y y^T]
    """

    T: int
    E0: np.ndarray
    E1: np.ndarray
    E2: np.ndarray
    E3: np.ndarray
    E4: np.ndarray
    E5: np.ndarray
    F2: np.ndarray
    F3: np.ndarray
    F4: np.ndarray
    F5: np.ndarray
    F6: np.ndarray
    F7: np.ndarray
    F8: np.ndarray
    G10: np.ndarray
    G11: np.ndarray
    G2: np.ndarray
    G3: np.ndarray
    H1: np.ndarray
    H2: np.ndarray
    H3: np.ndarray
    Ez1: np.ndarray
    Ez1z1: np.ndarray
    s1: np.ndarray

    def to_dict(self) -> dict:
        return {f.name: np.asarray(getattr(self, f.name)).tolist() for f in fields(self)}


def _lag_covariances(cov: Optional[BandedCovariance], T: int, M: int, lag: int) -> np.ndarray:
    if cov is None:
        return np.zeros((T - lag, M, M))
    return cov.lag_blocks(lag)


def _drive_covariance(
    lag_cov: np.ndarray,
    mean: np.ndarray,
    var: np.ndarray,
    e_phi: np.ndarray,
    lag: int,
    rectify: bool,
) -> np.ndarray:
    """Cov(drive_{b+lag}, drive_b) for all b, shape (T-lag, M, M)."""
    if not rectify:
        return lag_cov
    T = mean.shape[0]
    later, earlier = slice(lag, T), slice(0, T - lag)
    joint = rectified_cross_moment(
        mean[later][:, :, None], var[later][:, :, None],
        mean[earlier][:, None, :], var[earlier][:, None, :],
        lag_cov,
    )
    if lag == 0:
        diag = np.arange(mean.shape[1])
        joint[:, diag, diag] = rectified_second_moment(mean, var)
    return joint - e_phi[later][:, :, None] * e_phi[earlier][:, None, :]


def compute_moments(
    model: ModelBundle,
    z_mean: np.ndarray,
    cov: Optional[BandedCovariance],
    X: np.ndarray,
    S: Optional[np.ndarray] = None,
    R: Optional[np.ndarray] = None,
) -> MomentSums:
    """Expectation sums under a Gaussian posterior.

    Args:
        model: Model whose nonlinearity and observation head define the drive
        z_mean: (T, M) posterior means
        cov: Banded posterior covariance; None means a point-mass posterior
        X: (T, N) observations
        S: (T, K) inputs or None
        R: (T, P) nuisance regressors or None

    Returns:
        MomentSums
    """
    z_mean = np.asarray(z_mean, dtype=float)
    X = np.asarray(X, dtype=float)
    T, M = z_mean.shape
    S = np.zeros((T, model.latent.K)) if S is None else np.asarray(S, dtype=float).reshape(T, -1)
    P = getattr(model.observation, "P", 0)
    R = np.zeros((T, P)) if R is None else np.asarray(R, dtype=float).reshape(T, -1)
    nonlinearity = model.latent.nonlinearity

    cov0 = _lag_covariances(cov, T, M, 0)
    cov1 = _lag_covariances(cov, T, M, 1)
    var = np.diagonal(cov0, axis1=1, axis2=2)
    rm = rectified_moments(z_mean, cov0, nonlinearity)
    second = cov0 + z_mean[:, :, None] * z_mean[:, None, :]

    prev, nxt = slice(0, T - 1), slice(1, T)
    mu_prev, mu_next = z_mean[prev], z_mean[nxt]
    S_next = S[nxt]

    if nonlinearity == "identity":
        E5 = np.sum(cov1 + mu_next[:, :, None] * mu_prev[:, None, :], axis=0)
    else:
        E5 = np.sum(
            linear_rectified_moment(
                mu_next[:, :, None], mu_prev[:, None, :], var[prev][:, None, :], cov1
            ),
            axis=0,
        )

    # Observation drive y_t
    obs = model.observation
    if model.head == "linear":
        e_y = rm.e_phi
        e_yy = np.sum(rm.e_phi_phi, axis=0)
    else:
        rectify = obs.convolve_phi and nonlinearity == "relu"
        drive_mean = rm.e_phi if rectify else z_mean
        e_y = convolve_states(obs.kernel, drive_mean)
        e_yy = e_y.T @ e_y + _convolved_covariance(
            obs.kernel.response, cov, z_mean, var, rm.e_phi, rectify
        )

    return MomentSums(
        T=T,
        E0=np.sum(second[nxt], axis=0),
        E1=np.sum(rm.e_phi_phi[prev], axis=0),
        E2=np.sum(cov1 + mu_next[:, :, None] * mu_prev[:, None, :], axis=0),
        E3=np.sum(second[prev], axis=0),
        E4=np.sum(rm.e_z_phi[prev], axis=0).T,
        E5=E5,
        F2=X.T @ X,
        F3=S_next.T @ mu_prev,
        F4=S_next.T @ rm.e_phi[prev],
        F5=mu_next.T @ S_next,
        F6=S_next.T @ S_next,
        F7=X.T @ R,
        F8=R.T @ R,
        G10=mu_prev.sum(axis=0),
        G11=mu_next.sum(axis=0),
        G2=S_next.sum(axis=0),
        G3=rm.e_phi[prev].sum(axis=0),
        H1=X.T @ e_y,
        H2=R.T @ e_y,
        H3=e_yy,
        Ez1=z_mean[0].copy(),
        Ez1z1=second[0].copy(),
        s1=S[0].copy(),
    )


def _convolved_covariance(
    response: np.ndarray,
    cov: Optional[BandedCovariance],
    z_mean: np.ndarray,
    var: np.ndarray,
    e_phi: np.ndarray,
    rectify: bool,
) -> np.ndarray:
    """sum_t Cov(y_t) for y_t = sum_l response[l] drive_{t-l} (truncated window)."""
    T, M = z_mean.shape
    total = np.zeros((M, M))
    if cov is None:
        return total
    n = response.shape[0]
    for lag in range(min(n, T)):
        if lag * M > cov.bandwidth:
            break
        # weight[b] = sum_l response[l] response[l - lag] over windows ending inside the series
        weight = np.zeros(T - lag)
        for l in range(lag, n):
            last = T - l
            if last <= 0:
                break
            weight[:last] += response[l] * response[l - lag]
        blocks = _drive_covariance(cov.lag_blocks(lag), z_mean, var, e_phi, lag, rectify)
        summed = np.einsum("b,bij->ij", weight, blocks)
        total += summed if lag == 0 else summed + summed.T
    return total
