"""Stepwise annealing protocol and the random-init / LDS baselines.

anneal_fit runs:
    0. random draw of the parameters (stable by construction)
    1. LDS fit with Sigma = I fixed
    2. PLRNN fit with Sigma = I fixed, warm-started from step 1
    3. PLRNN fits with Sigma fixed to each scale of the schedule, with B
       (and Gamma for the BOLD head) frozen at their step-2 values
    4. posterior covariance recomputed with Sigma = I at the step-3 path

Usage:
    from training import AnnealConfig, anneal_fit

    fit = anneal_fit(X, config=AnnealConfig(M=12, seed=3))
    print(fit.steps[-1].q, fit.stable)
"""

import logging
import time
from dataclasses import dataclass, field
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np

from errors import DimensionError, ParameterError, PlrnnSsmError, TrainingError
from hrf import HrfKernel, ObsParamsBold
from inference import (
    EmConfig,
    EmResult,
    EstepConfig,
    StatePosterior,
    assemble_system,
    complete_posterior,
    em_fit,
    laplace_log_evidence,
    prepare_data,
)
from plrnn import (
    ModelBundle,
    Nonlinearity,
    ObsParamsLinear,
    PlrnnParams,
    generate_latent,
    make_rng,
    spectral_radius,
)

logger = logging.getLogger(__name__)

# Stream ids for make_rng
_INIT_STREAM = 4
# Deterministic run length used to judge stability of a fitted model
STABILITY_HORIZON = 1000


@dataclass(frozen=True)
class AnnealConfig:
    """Training settings.

    `sigma_schedule` holds the process-noise scales of the third step and
    must be strictly decreasing. With head="bold" a kernel is required.
    """

    M: int
    sigma_schedule: Tuple[float, ...] = (1e-1, 1e-2, 1e-3)
    protocol: Literal["anneal", "random_init"] = "anneal"
    nonlinearity: Nonlinearity = "relu"
    head: Literal["linear", "bold"] = "linear"
    kernel: Optional[HrfKernel] = None
    convolve_phi: bool = False
    ridge_lambda: float = 0.0
    em_max_iter: int = 200
    em_tol: float = 1e-5
    random_init_sigma: float = 1e-3
    diagonal_loading: bool = False
    estep: EstepConfig = field(default_factory=EstepConfig)
    seed: Optional[int] = None
    # Initialization scales
    a_range: Tuple[float, float] = (0.3, 0.9)
    w_scale: float = 0.1
    bias_scale: float = 0.1
    input_scale: float = 0.5
    target_radius: float = 0.95

    def __post_init__(self):
        if self.M < 1:
            raise ParameterError("M", "latent dimension must be >= 1")
        schedule = tuple(float(s) for s in self.sigma_schedule)
        if any(s <= 0 for s in schedule):
            raise ParameterError("sigma_schedule", "scales must be positive")
        if any(b >= a for a, b in zip(schedule, schedule[1:])):
            raise ParameterError("sigma_schedule", "must be strictly decreasing")
        object.__setattr__(self, "sigma_schedule", schedule)
        if self.protocol not in ("anneal", "random_init"):
            raise ParameterError("protocol", "must be 'anneal' or 'random_init'")
        if self.head not in ("linear", "bold"):
            raise ParameterError("head", "must be 'linear' or 'bold'")
        if self.head == "bold" and self.kernel is None:
            raise ParameterError("kernel", "the BOLD head needs an HRF kernel")
        if not 0 < self.target_radius < 1:
            raise ParameterError("target_radius", "must lie in (0, 1)")

    def em_config(self, freeze: Sequence[str] = ()) -> EmConfig:
        return EmConfig(
            max_iter=self.em_max_iter,
            tol=self.em_tol,
            ridge_lambda=self.ridge_lambda,
            freeze=frozenset(freeze),
            diagonal_loading=self.diagonal_loading,
            estep=self.estep,
            seed=self.seed,
        )


@dataclass(frozen=True)
class StepRecord:
    """Summary of one training step."""

    name: str
    q: float
    q_trace: List[float]
    elbo_trace: List[float]
    n_iter: int
    converged: bool
    seconds: float
    sigma_scale: Optional[float] = None
    skipped: bool = False

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "q": self.q,
            "q_trace": list(self.q_trace),
            "elbo_trace": list(self.elbo_trace),
            "n_iter": self.n_iter,
            "converged": self.converged,
            "seconds": self.seconds,
            "sigma_scale": self.sigma_scale,
            "skipped": self.skipped,
        }


@dataclass(frozen=True)
class FitResult:
    model: ModelBundle
    posterior: StatePosterior
    steps: List[StepRecord]
    stable: bool
    wall_clock: float
    protocol: str
    log_evidence: float = float("nan")

    @property
    def q_per_step(self) -> List[float]:
        return [s.q for s in self.steps]

    @property
    def final_q(self) -> float:
        return self.steps[-1].q if self.steps else float("nan")


def draw_initial_params(
    M: int,
    N: int,
    K: int = 0,
    P: int = 0,
    seed: Optional[int] = None,
    X: Optional[np.ndarray] = None,
    config: Optional[AnnealConfig] = None,
    nonlinearity: Optional[Nonlinearity] = None,
) -> ModelBundle:
    """Random starting parameters with max|eig(A + W)| < 1.

    Args:
        M, N, K, P: Latent, observed, input and nuisance dimensions
        seed: Root seed
        X: Optional (T, N) data; B then comes from a least-squares regression
            of X on its leading principal components
        config: Scales, head and kernel (defaults to AnnealConfig(M))
        nonlinearity: Overrides config.nonlinearity

    Returns:
        ModelBundle with Sigma = Gamma = I and J = 0
    """
    if min(M, N) < 1 or min(K, P) < 0:
        raise DimensionError("dims", (M, N, K, P), detail="need M, N >= 1 and K, P >= 0")
    config = config or AnnealConfig(M=M)
    nonlinearity = nonlinearity or config.nonlinearity
    rng = make_rng(seed, _INIT_STREAM)

    a = rng.uniform(*config.a_range, size=M)
    W = rng.normal(0.0, config.w_scale / np.sqrt(M), size=(M, M))
    np.fill_diagonal(W, 0.0)
    A = np.diag(a)
    radius = spectral_radius(A + W)
    if radius >= 1.0:
        scale = config.target_radius / radius
        A, W = A * scale, W * scale
        logger.debug(f"Rescaled initial A + W from spectral radius {radius:.3f}")

    latent = PlrnnParams(
        mu0=rng.normal(0.0, config.bias_scale, size=M),
        A=A,
        W=W,
        C=rng.normal(0.0, config.input_scale, size=(M, K)),
        h=rng.normal(0.0, config.bias_scale, size=M),
        Sigma=np.eye(M),
        nonlinearity=nonlinearity,
    )
    B = _initial_loadings(X, M, N, rng)
    if config.diagonal_loading:
        if M != N:
            raise DimensionError("B", (N, M), (M, M), detail="diagonal loading needs N == M")
        B = np.diag(np.diag(B))
    if config.head == "bold":
        observation = ObsParamsBold(
            B=B, J=np.zeros((N, P)), Gamma=np.eye(N),
            kernel=config.kernel, convolve_phi=config.convolve_phi,
        )
    else:
        if P > 0:
            raise DimensionError("P", (P,), (0,), detail="linear head takes no nuisance regressors")
        observation = ObsParamsLinear(B=B, Gamma=np.eye(N))
    return ModelBundle(latent=latent, observation=observation, metadata={"init_seed": seed})


def _initial_loadings(
    X: Optional[np.ndarray], M: int, N: int, rng: np.random.Generator
) -> np.ndarray:
    if X is None:
        return rng.standard_normal((N, M))
    X = np.asarray(X, dtype=float)
    centered = X - X.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    k = min(M, vt.shape[0])
    factors = np.zeros((X.shape[0], M))
    factors[:, :k] = centered @ vt[:k].T
    if k < M:
        factors[:, k:] = rng.standard_normal((X.shape[0], M - k)) * 0.1
    B, *_ = np.linalg.lstsq(factors, X, rcond=None)
    return B.T


def _check_standardized(X: np.ndarray) -> None:
    mean = np.abs(X.mean(axis=0)).max()
    sd = np.abs(X.std(axis=0) - 1.0).max()
    if mean > 0.1 or sd > 0.1:
        logger.warning(
            f"Data do not look standardized (max |mean|={mean:.2f}, max |sd-1|={sd:.2f})"
        )


def _with_sigma(model: ModelBundle, scale: float) -> ModelBundle:
    latent = model.latent.replace(Sigma=scale * np.eye(model.M))
    return model.replace(latent=latent)


def _with_nonlinearity(model: ModelBundle, nonlinearity: Nonlinearity) -> ModelBundle:
    return model.replace(latent=model.latent.replace(nonlinearity=nonlinearity))


def is_stable(params: PlrnnParams, T: int = STABILITY_HORIZON) -> bool:
    """True when the noise-free trajectory from mu0 stays bounded."""
    return not generate_latent(params, T, deterministic=True).unstable


def _record(name: str, result: EmResult, started: float, sigma_scale=None) -> StepRecord:
    record = StepRecord(
        name=name,
        q=result.q_trace[-1] if result.q_trace else float("nan"),
        q_trace=list(result.q_trace),
        elbo_trace=list(result.elbo_trace),
        n_iter=result.n_iter,
        converged=result.converged,
        seconds=time.perf_counter() - started,
        sigma_scale=sigma_scale,
    )
    logger.info(
        f"Step {name} done: Q={record.q:.6g} after {record.n_iter} iterations "
        f"({record.seconds:.1f}s)"
    )
    return record


def _run_step(name, checkpoint, fn):
    try:
        return fn()
    except (PlrnnSsmError, np.linalg.LinAlgError, FloatingPointError) as e:
        logger.error(f"Training step {name} failed: {e}")
        raise TrainingError(name, e, checkpoint=checkpoint) from e


def _checkpoint(
    result: EmResult, steps: List[StepRecord], started: float, protocol: str
) -> FitResult:
    return FitResult(
        model=result.model,
        posterior=result.posterior,
        steps=list(steps),
        stable=is_stable(result.model.latent),
        wall_clock=time.perf_counter() - started,
        protocol=protocol,
    )


def lds_fit(
    X,
    S=None,
    R=None,
    config: Optional[AnnealConfig] = None,
    model0: Optional[ModelBundle] = None,
) -> EmResult:
    """EM for the linear dynamical system with Sigma = I fixed."""
    X = np.asarray(X, dtype=float)
    if model0 is None:
        model0 = draw_initial_params(
            config.M, X.shape[1], _width(S), _width(R), seed=config.seed, X=X,
            config=config, nonlinearity="identity",
        )
    model0 = _with_sigma(_with_nonlinearity(model0, "identity"), 1.0)
    return em_fit(model0, X, S, R, config.em_config(freeze={"Sigma"}))


def anneal_fit(X, S=None, R=None, config: Optional[AnnealConfig] = None) -> FitResult:
    """Stepwise annealing fit.

    Args:
        X: (T, N) observations, ideally standardized
        S: (T, K) inputs or None
        R: (T, P) nuisance regressors or None (BOLD head)
        config: Training settings

    Returns:
        FitResult with one StepRecord per executed step

    Raises:
        TrainingError: If a step fails; carries the last good FitResult
    """
    if config is None:
        raise ParameterError("config", "AnnealConfig is required")
    if config.protocol == "random_init":
        return random_init_fit(X, S, R, config)
    X = np.asarray(X, dtype=float)
    _check_standardized(X)
    started = time.perf_counter()
    steps: List[StepRecord] = []
    logger.info(
        f"Annealing fit: M={config.M}, N={X.shape[1]}, T={X.shape[0]}, head={config.head}, "
        f"nonlinearity={config.nonlinearity}, seed={config.seed}"
    )

    model0 = _run_step(
        "init", None,
        lambda: draw_initial_params(
            config.M, X.shape[1], _width(S), _width(R), seed=config.seed, X=X,
            config=config, nonlinearity="identity",
        ),
    )

    t0 = time.perf_counter()
    lds = _run_step("lds", None, lambda: lds_fit(X, S, R, config, model0=model0))
    steps.append(_record("lds", lds, t0, sigma_scale=1.0))
    checkpoint = _checkpoint(lds, steps, started, "anneal")

    if config.nonlinearity == "identity":
        plrnn = lds
        steps.append(
            StepRecord(
                name="plrnn", q=steps[-1].q, q_trace=[], elbo_trace=[], n_iter=0,
                converged=True, seconds=0.0, sigma_scale=1.0, skipped=True,
            )
        )
        logger.info("Step plrnn skipped: identity nonlinearity makes it the LDS fit")
    else:
        t0 = time.perf_counter()
        warm = _with_nonlinearity(lds.model, config.nonlinearity)
        plrnn = _run_step(
            "plrnn", checkpoint,
            lambda: em_fit(
                warm, X, S, R, config.em_config(freeze={"Sigma"}), z_init=lds.posterior.z_map
            ),
        )
        steps.append(_record("plrnn", plrnn, t0, sigma_scale=1.0))
        checkpoint = _checkpoint(plrnn, steps, started, "anneal")

    freeze = {"Sigma", "B"}
    if config.head == "bold":
        freeze.add("Gamma")
    current = plrnn
    for i, scale in enumerate(config.sigma_schedule, start=1):
        name = f"anneal_{i}"
        t0 = time.perf_counter()
        warm = _with_sigma(current.model, scale)
        previous = current
        current = _run_step(
            name, checkpoint,
            lambda: em_fit(
                warm, X, S, R, config.em_config(freeze=freeze), z_init=previous.posterior.z_map
            ),
        )
        steps.append(_record(name, current, t0, sigma_scale=scale))
        checkpoint = _checkpoint(current, steps, started, "anneal")

    t0 = time.perf_counter()
    posterior = _run_step(
        "covariance", checkpoint,
        lambda: reestimate_covariance(current.model, current.posterior, X, S, R),
    )
    steps.append(
        StepRecord(
            name="covariance", q=steps[-1].q, q_trace=[], elbo_trace=[], n_iter=0,
            converged=True, seconds=time.perf_counter() - t0, sigma_scale=1.0,
        )
    )

    result = _finish(
        current.model, posterior, steps, started, "anneal", X, S, R,
        evidence_posterior=current.posterior,
    )
    logger.info(
        f"Annealing fit finished in {result.wall_clock:.1f}s: final Q={result.final_q:.6g}, "
        f"stable={result.stable}"
    )
    return result


def reestimate_covariance(
    model: ModelBundle, posterior: StatePosterior, X, S=None, R=None
) -> StatePosterior:
    """Laplace covariance and moments at a fixed path with Sigma = I."""
    unit = _with_sigma(model, 1.0)
    X, S, R = prepare_data(unit, X, S, R)
    system = assemble_system(unit, X, S, R)
    at_path = StatePosterior(
        z_map=posterior.z_map,
        d_omega=posterior.d_omega,
        Q_value=system.value(posterior.z_map),
        converged=posterior.converged,
        n_iter=posterior.n_iter,
    )
    return complete_posterior(unit, system, at_path, X, S, R)


def random_init_fit(X, S=None, R=None, config: Optional[AnnealConfig] = None) -> FitResult:
    """Single EM run from a random start with Sigma frozen at a small scale."""
    X = np.asarray(X, dtype=float)
    _check_standardized(X)
    started = time.perf_counter()
    logger.info(
        f"Random-init fit: M={config.M}, sigma={config.random_init_sigma}, seed={config.seed}"
    )
    model0 = draw_initial_params(
        config.M, X.shape[1], _width(S), _width(R), seed=config.seed, X=X, config=config,
    )
    model0 = _with_sigma(model0, config.random_init_sigma)
    t0 = time.perf_counter()
    result = _run_step(
        "random_init", None,
        lambda: em_fit(model0, X, S, R, config.em_config(freeze={"Sigma"})),
    )
    steps = [_record("random_init", result, t0, sigma_scale=config.random_init_sigma)]
    return _finish(result.model, result.posterior, steps, started, "random_init", X, S, R)


def _finish(
    model, posterior, steps, started, protocol, X, S, R, evidence_posterior=None
) -> FitResult:
    try:
        evidence = laplace_log_evidence(model, evidence_posterior or posterior, X, S, R)
    except (PlrnnSsmError, ValueError) as e:
        logger.warning(f"Could not compute Laplace evidence: {e}")
        evidence = float("nan")
    return FitResult(
        model=model.replace(metadata={**model.metadata, "protocol": protocol}),
        posterior=posterior,
        steps=steps,
        stable=is_stable(model.latent),
        wall_clock=time.perf_counter() - started,
        protocol=protocol,
        log_evidence=evidence,
    )


def _width(A) -> int:
    if A is None or np.size(A) == 0:
        return 0
    A = np.asarray(A)
    return 1 if A.ndim == 1 else A.shape[1]
