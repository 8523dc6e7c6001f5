"""Reconstruction-quality measures.

- kl_x: binned state-space divergence between true and generated
  observations, with additive smoothing and a [0, 1] normalization
- KL_z: divergence between the posterior state mixture and the freely
  generated prior mixture (Monte Carlo and variational), plus normalization
- lyapunov_max: maximal Lyapunov exponent from log-distance growth
- power_spectrum_correlation: mean Pearson correlation of Welch spectra
- n_step_ahead_mse: prediction error as a function of horizon
"""

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import signal, special, stats

from errors import DimensionError, ParameterError
from hrf import convolve_states
from inference import StatePosterior, prepare_data
from plrnn import ModelBundle, PlrnnParams, Trajectory, apply_phi, generate_latent, latent_step

logger = logging.getLogger(__name__)

ArrayOrTrajectory = Union[np.ndarray, Trajectory]
LOG_2PI = math.log(2.0 * math.pi)
# Complexity cap for one chunk of the mixture density (samples x components x dim)
_CHUNK_BUDGET = 4_000_000


def _values(traj: ArrayOrTrajectory, name: str) -> np.ndarray:
    values = traj.values if isinstance(traj, Trajectory) else np.asarray(traj, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if values.ndim != 2 or values.shape[0] == 0:
        raise DimensionError(name, values.shape, detail="need a non-empty T x D array")
    return values


# ---------------------------------------------------------------------------
# KL_x
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BinSpec:
    """Common binning grid: `delta`-wide bins over [low, high] per dimension."""

    delta: float = 1.0
    low: float = -4.0
    high: float = 4.0
    alpha: float = 1e-6
    clamp_warn_fraction: float = 0.01

    def __post_init__(self):
        if self.delta <= 0:
            raise ParameterError("delta", "bin width must be positive")
        if self.alpha <= 0:
            raise ParameterError("alpha", "smoothing constant must be positive")
        if self.high <= self.low:
            raise ParameterError("high", f"must exceed low={self.low}")

    @property
    def bins_per_dim(self) -> int:
        return max(1, int(math.ceil((self.high - self.low) / self.delta - 1e-9)))

    def total_bins(self, dim: int) -> float:
        return float(self.bins_per_dim) ** dim


@dataclass(frozen=True)
class KlReport:
    kl: float
    kl_normalized: float
    normalizer: float
    n_bins_true: int
    n_bins_gen: int
    n_bins_total: float
    T_true: int
    T_gen: int
    clamped_fraction: float
    delta: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def bin_indices(values: np.ndarray, spec: BinSpec) -> Tuple[np.ndarray, float]:
    """Integer bin coordinates (clamped to the edge bins) and clamped fraction."""
    raw = np.floor((values - spec.low) / spec.delta).astype(np.int64)
    clamped = np.clip(raw, 0, spec.bins_per_dim - 1)
    fraction = float(np.mean(np.any(raw != clamped, axis=1)))
    return clamped, fraction


def _occupancy(values: np.ndarray, spec: BinSpec) -> Tuple[Dict[tuple, int], float]:
    idx, fraction = bin_indices(values, spec)
    rows, counts = np.unique(idx, axis=0, return_counts=True)
    return {tuple(r): int(c) for r, c in zip(rows.tolist(), counts)}, fraction


def kl_x(
    true_traj: ArrayOrTrajectory, gen_traj: ArrayOrTrajectory, spec: BinSpec = BinSpec()
) -> KlReport:
    """KL(p_true || p_gen) over binned observation space.

    Bin probabilities are (n_k + alpha) / (T + alpha K) with K the total
    number of bins. Only occupied bins are stored; empty bins enter the sums
    in closed form. The normalizer is the divergence obtained when the
    generated mass lies entirely outside the true support, so
    kl_normalized lies in [0, 1].

    Args:
        true_traj: True observations (T x N), standardized
        gen_traj: Generated observations (T_gen x N); non-finite rows are dropped
        spec: Binning grid

    Returns:
        KlReport
    """
    true_values = _values(true_traj, "true_traj")
    gen_values = _values(gen_traj, "gen_traj")
    if true_values.shape[1] != gen_values.shape[1]:
        raise DimensionError(
            "gen_traj", gen_values.shape, (gen_values.shape[0], true_values.shape[1])
        )
    gen_values = gen_values[np.all(np.isfinite(gen_values), axis=1)]
    if gen_values.shape[0] == 0:
        raise DimensionError("gen_traj", (0,), detail="no finite generated samples")

    dim = true_values.shape[1]
    K = spec.total_bins(dim)
    alpha = spec.alpha
    T_true, T_gen = true_values.shape[0], gen_values.shape[0]
    true_counts, clamp_true = _occupancy(true_values, spec)
    gen_counts, clamp_gen = _occupancy(gen_values, spec)
    clamped = max(clamp_true, clamp_gen)
    if clamped > spec.clamp_warn_fraction:
        logger.warning(f"{clamped:.1%} of points fall outside the bin range and were clamped")

    z_true = T_true + alpha * K
    z_gen = T_gen + alpha * K
    p_true_empty = alpha / z_true
    p_gen_empty = alpha / z_gen

    kl = 0.0
    normalizer = 0.0
    for key, n in true_counts.items():
        p = (n + alpha) / z_true
        q = (gen_counts.get(key, 0) + alpha) / z_gen
        kl += p * math.log(p / q)
        normalizer += p * math.log(p / p_gen_empty)
    only_gen = [n for key, n in gen_counts.items() if key not in true_counts]
    for n in only_gen:
        kl += p_true_empty * math.log(p_true_empty / ((n + alpha) / z_gen))
    both_empty = K - len(true_counts) - len(only_gen)
    empty_term = p_true_empty * math.log(p_true_empty / p_gen_empty)
    kl += both_empty * empty_term
    normalizer += (K - len(true_counts)) * empty_term

    kl_normalized = float(np.clip(kl / normalizer, 0.0, 1.0)) if normalizer > 0 else 0.0
    return KlReport(
        kl=float(kl),
        kl_normalized=kl_normalized,
        normalizer=float(normalizer),
        n_bins_true=len(true_counts),
        n_bins_gen=len(gen_counts),
        n_bins_total=K,
        T_true=T_true,
        T_gen=T_gen,
        clamped_fraction=clamped,
        delta=spec.delta,
    )


def kl_x_bin_sweep(
    true_traj: ArrayOrTrajectory,
    gen_traj: ArrayOrTrajectory,
    deltas: Sequence[float] = (1.0, 0.5, 0.2, 0.1),
    spec: BinSpec = BinSpec(),
) -> Dict[float, KlReport]:
    """kl_x for several bin widths on the same range."""
    return {
        float(d): kl_x(true_traj, gen_traj, BinSpec(d, spec.low, spec.high, spec.alpha))
        for d in deltas
    }


def occupancy_table(
    true_traj: ArrayOrTrajectory, gen_traj: ArrayOrTrajectory, spec: BinSpec = BinSpec()
) -> pd.DataFrame:
    """Occupied bins with true and generated counts, one row per bin."""
    true_counts, _ = _occupancy(_values(true_traj, "true_traj"), spec)
    gen_values = _values(gen_traj, "gen_traj")
    gen_counts, _ = _occupancy(gen_values[np.all(np.isfinite(gen_values), axis=1)], spec)
    keys = sorted(set(true_counts) | set(gen_counts))
    dim = len(keys[0]) if keys else 0
    frame = pd.DataFrame(keys, columns=[f"bin{i + 1}" for i in range(dim)])
    frame["n_true"] = [true_counts.get(k, 0) for k in keys]
    frame["n_gen"] = [gen_counts.get(k, 0) for k in keys]
    return frame


# ---------------------------------------------------------------------------
# Gaussian mixtures and KL_z
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianMixture:
    """Equal-weight mixture with one component per time step."""

    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self):
        means = np.asarray(self.means, dtype=float)
        covs = np.asarray(self.covariances, dtype=float)
        if means.ndim != 2:
            raise DimensionError("means", means.shape, detail="must be T x M")
        if covs.shape != means.shape + (means.shape[1],):
            raise DimensionError("covariances", covs.shape, means.shape + (means.shape[1],))
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covariances", covs)

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def cholesky(self) -> np.ndarray:
        try:
            return np.linalg.cholesky(self.covariances)
        except np.linalg.LinAlgError as e:
            raise ParameterError("covariances", "degenerate mixture component") from e

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        which = rng.integers(0, self.n_components, size=n)
        noise = rng.standard_normal((n, self.dim))
        return self.means[which] + np.einsum("nij,nj->ni", self.cholesky()[which], noise)

    def log_pdf(self, x: np.ndarray) -> np.ndarray:
        """Mixture log-density at the rows of x, evaluated in chunks."""
        x = np.asarray(x, dtype=float)
        chol = self.cholesky()
        inv_chol = np.linalg.inv(chol)
        half_logdet = np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)
        log_norm = -0.5 * self.dim * LOG_2PI - half_logdet - math.log(self.n_components)
        chunk = max(1, _CHUNK_BUDGET // max(1, self.n_components * self.dim))
        out = np.empty(x.shape[0])
        for start in range(0, x.shape[0], chunk):
            block = x[start : start + chunk]
            diff = block[:, None, :] - self.means[None, :, :]
            white = np.einsum("cij,ncj->nci", inv_chol, diff)
            out[start : start + chunk] = special.logsumexp(
                log_norm[None, :] - 0.5 * np.sum(white**2, axis=2), axis=1
            )
        return out


def posterior_mixture(posterior: StatePosterior, variance_floor: float = 1.0) -> GaussianMixture:
    """Mixture of N(z_map_t, V_tt) with variances floored at `variance_floor`."""
    if variance_floor <= 0:
        raise ParameterError("variance_floor", "must be positive")
    T, M = posterior.z_map.shape
    covs = posterior.V.diag_blocks() if posterior.V is not None else np.zeros((T, M, M))
    covs = covs.copy()
    diag = np.arange(M)
    covs[:, diag, diag] = np.maximum(covs[:, diag, diag], variance_floor)
    return GaussianMixture(posterior.z_map, covs)


def generative_mixture(
    params: PlrnnParams,
    T: int,
    inputs: Optional[np.ndarray] = None,
    seed: Optional[int] = None,
    covariance: Union[str, np.ndarray] = "sigma",
) -> GaussianMixture:
    """Mixture of the one-step transition densities along a freely generated path.

    Component t has mean F(z_{t-1}) (mu0 + C s_1 for the first one).

    Args:
        params: Latent parameters
        T: Number of components
        inputs: Optional (T, K) inputs
        seed: Seed for the sampled path
        covariance: "sigma" (the model's Sigma), "identity" or an M x M matrix

    Returns:
        GaussianMixture with T components
    """
    path = generate_latent(params, T, inputs=inputs, seed=seed)
    if path.unstable:
        raise ParameterError("params", "generated path diverged; no prior mixture")
    Z = path.values
    if inputs is None:
        S = np.zeros((T, params.K))
    else:
        S = np.asarray(inputs, dtype=float).reshape(T, -1)
    means = np.empty_like(Z)
    means[0] = params.mu0 + params.C @ S[0]
    means[1:] = latent_step(params, Z[:-1], S[1:])

    if isinstance(covariance, str):
        if covariance == "identity":
            cov = np.eye(params.M)
        elif covariance == "sigma":
            cov = params.Sigma
            if np.any(np.diag(cov) <= 0):
                raise ParameterError(
                    "covariance", "Sigma is singular; pass covariance='identity' or a matrix"
                )
        else:
            raise ParameterError("covariance", "must be 'identity', 'sigma' or a matrix")
    else:
        cov = np.asarray(covariance, dtype=float)
        if cov.shape != (params.M, params.M):
            raise DimensionError("covariance", cov.shape, (params.M, params.M))
    return GaussianMixture(means, np.broadcast_to(cov, (T, params.M, params.M)).copy())


def kl_z_mc_samples(
    p: GaussianMixture, q: GaussianMixture, n_samples: int = 500_000, seed: Optional[int] = None
) -> np.ndarray:
    """Per-sample terms log p(z) - log q(z) for z drawn from p."""
    if p.dim != q.dim:
        raise DimensionError("q", (q.dim,), (p.dim,))
    rng = np.random.default_rng(seed)
    z = p.sample(n_samples, rng)
    return p.log_pdf(z) - q.log_pdf(z)


def kl_z_mc(
    p: GaussianMixture, q: GaussianMixture, n_samples: int = 500_000, seed: Optional[int] = None
) -> float:
    """Monte Carlo estimate of KL(p || q)."""
    return float(np.mean(kl_z_mc_samples(p, q, n_samples, seed)))


def pairwise_gaussian_kl(p: GaussianMixture, q: GaussianMixture) -> np.ndarray:
    """KL(p_a || q_b) for every component pair, shape (p.n, q.n)."""
    q_inv = np.linalg.inv(q.covariances)
    _, p_logdet = np.linalg.slogdet(p.covariances)
    _, q_logdet = np.linalg.slogdet(q.covariances)
    trace = np.einsum("bij,aji->ab", q_inv, p.covariances)
    diff = q.means[None, :, :] - p.means[:, None, :]
    maha = np.einsum("abi,bij,abj->ab", diff, q_inv, diff)
    return 0.5 * (trace + maha - p.dim + q_logdet[None, :] - p_logdet[:, None])


def kl_z_variational(p: GaussianMixture, q: GaussianMixture, reverse: bool = False) -> float:
    """Variational approximation of KL(p || q) between Gaussian mixtures.

    With `reverse` the roles are swapped, giving KL(q || p).
    """
    if reverse:
        p, q = q, p
    if p.dim != q.dim:
        raise DimensionError("q", (q.dim,), (p.dim,))
    self_term = special.logsumexp(-pairwise_gaussian_kl(p, p), axis=1) - math.log(p.n_components)
    cross_term = special.logsumexp(-pairwise_gaussian_kl(p, q), axis=1) - math.log(q.n_components)
    return float(np.mean(self_term - cross_term))


def reference_gaussian(mixture: GaussianMixture) -> GaussianMixture:
    """Single Gaussian with the time-averaged mean and covariance."""
    return GaussianMixture(
        mixture.means.mean(axis=0, keepdims=True),
        mixture.covariances.mean(axis=0, keepdims=True),
    )


def normalize_kl_z(kl: float, posterior_mix: GaussianMixture, gen_mix: GaussianMixture) -> float:
    """kl divided by KL(p_inf || p_ref); NaN (with a warning) when that is zero."""
    denominator = kl_z_variational(posterior_mix, reference_gaussian(gen_mix))
    if not np.isfinite(denominator) or abs(denominator) < 1e-12:
        logger.warning("KL_z normalizer is degenerate; returning NaN")
        warnings.warn("Degenerate KL_z normalizer", RuntimeWarning)
        return float("nan")
    return float(kl / denominator)


@dataclass(frozen=True)
class KlzReport:
    kl_mc: float
    kl_variational: float
    kl_normalized: float
    kl_reverse_variational: float
    kl_reverse_mc: float
    n_samples: int
    variance_floor: float
    degenerate: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def kl_z_report(
    posterior: StatePosterior,
    params: PlrnnParams,
    inputs: Optional[np.ndarray] = None,
    n_samples: int = 500_000,
    variance_floor: float = 1.0,
    covariance: Union[str, np.ndarray] = "sigma",
    seed: Optional[int] = None,
) -> KlzReport:
    """Both KL_z directions, MC and variational, and the normalized value."""
    p_inf = posterior_mixture(posterior, variance_floor)
    p_gen = generative_mixture(params, posterior.T, inputs=inputs, seed=seed, covariance=covariance)
    variational = kl_z_variational(p_inf, p_gen)
    normalized = normalize_kl_z(variational, p_inf, p_gen)
    report = KlzReport(
        kl_mc=kl_z_mc(p_inf, p_gen, n_samples, seed),
        kl_variational=variational,
        kl_normalized=normalized,
        kl_reverse_variational=kl_z_variational(p_inf, p_gen, reverse=True),
        kl_reverse_mc=kl_z_mc(p_gen, p_inf, n_samples, seed),
        n_samples=n_samples,
        variance_floor=variance_floor,
        degenerate=bool(np.isnan(normalized)),
    )
    logger.debug(f"KL_z: variational={variational:.4g}, normalized={normalized:.4g}")
    return report


# ---------------------------------------------------------------------------
# Lyapunov exponent
# ---------------------------------------------------------------------------


class LyapunovEstimate(NamedTuple):
    lambda_max: float  # per time unit
    lambda_per_step: float
    r2: float
    p_value: float
    window: Tuple[int, int]
    d0: float
    n_pairs: int
    curve: np.ndarray


Stepper = Callable[[np.ndarray], np.ndarray]


def plrnn_stepper(params: PlrnnParams) -> Stepper:
    """Noise-free PLRNN map acting on a batch of states."""
    return lambda z: latent_step(params, z)


def ode_stepper(deriv: Callable[[np.ndarray], np.ndarray], dt: float, n_steps: int = 1) -> Stepper:
    from benchmarks import rk4_step

    def step(x):
        for _ in range(n_steps):
            x = rk4_step(deriv, x, dt)
        return x

    return step


def log_distance_curve(
    stepper: Stepper, base: np.ndarray, d0: float, horizon: int, seed=None
) -> np.ndarray:
    """Mean log separation of perturbed trajectory pairs over `horizon` steps."""
    rng = np.random.default_rng(seed)
    base = np.asarray(base, dtype=float)
    direction = rng.standard_normal(base.shape)
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    x, y = base.copy(), base + d0 * direction
    curve = np.empty(horizon + 1)
    curve[0] = math.log(d0)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for k in range(1, horizon + 1):
            x, y = stepper(x), stepper(y)
            logs = np.log(np.linalg.norm(x - y, axis=1))
            finite = logs[np.isfinite(logs)]
            curve[k] = finite.mean() if finite.size else np.nan
    if np.isnan(curve).all() or np.isnan(curve[1]):
        raise FloatingPointError("trajectories diverged beyond float range immediately")
    return curve


def lyapunov_max(
    stepper: Stepper,
    base: np.ndarray,
    d0: float = 1e-10,
    horizon: int = 1000,
    dt: float = 1.0,
    seed: Optional[int] = None,
    min_lags: int = 5,
    plateau_fraction: float = 0.9,
) -> LyapunovEstimate:
    """Maximal Lyapunov exponent from the initial slope of the log-distance curve.

    The regression window runs from lag 0 until the curve has covered
    `plateau_fraction` of its rise to the final plateau (at least `min_lags`
    lags). If the curve never rises the whole horizon is used.

    Args:
        stepper: Deterministic one-step map acting on (n, D) batches
        base: (n_pairs, D) base points, ideally on the attractor
        d0: Initial separation
        horizon: Number of steps followed
        dt: Time per step, for the per-time-unit exponent
        seed: Seed for the perturbation directions

    Returns:
        LyapunovEstimate
    """
    if d0 <= 0:
        raise ParameterError("d0", "initial separation must be positive")
    base = np.atleast_2d(np.asarray(base, dtype=float))
    curve = log_distance_curve(stepper, base, d0, horizon, seed)
    finite = np.flatnonzero(np.isfinite(curve))
    last = finite[-1]
    tail = curve[max(1, last - max(1, horizon // 10)) : last + 1]
    rise = curve - curve[0]
    plateau_rise = np.nanmean(tail) - curve[0]
    if plateau_rise <= 0:
        end = last
    else:
        reached = np.flatnonzero(rise[: last + 1] >= plateau_fraction * plateau_rise)
        end = int(reached[0]) if reached.size else last
        end = min(max(end, min_lags), last)
    lags = np.arange(end + 1)
    fit = stats.linregress(lags, curve[: end + 1])
    return LyapunovEstimate(
        lambda_max=float(fit.slope / dt),
        lambda_per_step=float(fit.slope),
        r2=float(fit.rvalue**2),
        p_value=float(fit.pvalue),
        window=(0, int(end)),
        d0=d0,
        n_pairs=base.shape[0],
        curve=curve,
    )


def base_points(traj: ArrayOrTrajectory, n_pairs: int, seed: Optional[int] = None) -> np.ndarray:
    """Random finite rows of a trajectory, used as starting points."""
    values = _values(traj, "traj")
    values = values[np.all(np.isfinite(values), axis=1)]
    rng = np.random.default_rng(seed)
    return values[rng.choice(values.shape[0], size=n_pairs, replace=values.shape[0] < n_pairs)]


# ---------------------------------------------------------------------------
# Power spectra and prediction error
# ---------------------------------------------------------------------------


def power_spectrum_correlation(
    true_traj: ArrayOrTrajectory, gen_traj: ArrayOrTrajectory, nperseg: Optional[int] = None
) -> float:
    """Mean over dimensions of the Pearson correlation between Welch spectra."""
    x = _values(true_traj, "true_traj")
    y = _values(gen_traj, "gen_traj")
    if x.shape[1] != y.shape[1]:
        raise DimensionError("gen_traj", y.shape, (y.shape[0], x.shape[1]))
    T = min(x.shape[0], y.shape[0])
    nperseg = nperseg or T // 8
    if nperseg < 2 or T < 2 * nperseg:
        raise ParameterError("T", f"series of length {T} too short for segments of {nperseg}")
    kwargs = dict(nperseg=nperseg, noverlap=nperseg // 2, window="hann", axis=0)
    _, px = signal.welch(x, **kwargs)
    _, py = signal.welch(y, **kwargs)
    correlations = [stats.pearsonr(px[:, i], py[:, i])[0] for i in range(x.shape[1])]
    return float(np.nanmean(correlations))


@dataclass(frozen=True)
class AheadPredictionReport:
    steps: np.ndarray
    obs_mse: np.ndarray
    state_mse: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"n": self.steps, "obs_mse": self.obs_mse, "state_mse": self.state_mse})


def n_step_ahead_mse(
    model: ModelBundle,
    posterior: StatePosterior,
    X,
    S=None,
    R=None,
    max_n: int = 10,
) -> AheadPredictionReport:
    """Mean squared error of n-step predictions started from the MAP path.

    From every t the latent model runs noise-free for n steps starting at
    z_map(t). Observations are predicted through the observation head; for
    the BOLD head, states up to t come from z_map and later ones from the
    prediction. The state variant compares predicted states with z_map(t+n).
    n = 0 gives the residual of the observation model.
    """
    X, S, R = prepare_data(model, X, S, R)
    Z = posterior.z_map
    T = Z.shape[0]
    if not 0 <= max_n < T:
        raise ParameterError("max_n", f"must lie in [0, {T - 1}]")
    lat, obs = model.latent, model.observation
    rectify = lat.nonlinearity == "relu" and (model.head == "linear" or obs.convolve_phi)

    predictions = [Z]
    for k in range(1, max_n + 1):
        predictions.append(latent_step(lat, predictions[-1][: T - k], S[k:]))

    obs_mse = np.empty(max_n + 1)
    state_mse = np.empty(max_n + 1)
    for k in range(max_n + 1):
        target = X[k:]
        if model.head == "linear":
            drive = apply_phi(predictions[k], lat.nonlinearity) if rectify else predictions[k]
            x_hat = drive @ obs.B.T
        else:
            x_hat = _bold_ahead(model, Z, predictions, k, rectify) @ obs.B.T + R[k:] @ obs.J.T
        obs_mse[k] = np.mean((target - x_hat) ** 2)
        state_mse[k] = np.mean((predictions[k] - Z[k:]) ** 2)
    return AheadPredictionReport(np.arange(max_n + 1), obs_mse, state_mse)


def _bold_ahead(model, Z, predictions, k, rectify) -> np.ndarray:
    """Convolved drive at times k..T-1 mixing inferred and predicted states."""
    response = model.observation.kernel.response
    phi = model.latent.nonlinearity
    T, M = Z.shape
    if k == 0:
        drive = apply_phi(Z, phi) if rectify else Z
        return convolve_states(model.observation.kernel, drive)
    out = np.zeros((T - k, M))
    base = np.arange(T - k)
    for lag, weight in enumerate(response):
        if lag < k:
            states = predictions[k - lag][: T - k]
        else:
            src = base + k - lag
            states = np.zeros((T - k, M))
            valid = src >= 0
            states[valid] = Z[src[valid]]
        out += weight * (apply_phi(states, phi) if rectify else states)
    return out


def summarize_mse(reports: List[AheadPredictionReport]) -> pd.DataFrame:
    """Median and quartiles of per-n MSE across fits."""
    frame = pd.concat([r.to_frame().assign(run=i) for i, r in enumerate(reports)])
    return frame.groupby("n")[["obs_mse", "state_mse"]].quantile([0.25, 0.5, 0.75]).unstack()
