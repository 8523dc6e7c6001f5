"""Core model types and forward simulation for the PLRNN state space model.

Latent dynamics:
    z_t = A z_{t-1} + W phi(z_{t-1}) + h + C s_t + eps_t,   eps_t ~ N(0, Sigma)
    z_1 ~ N(mu0 + C s_1, Sigma)

Linear observation head:
    x_t = B phi(z_t) + eta_t,   eta_t ~ N(0, Gamma)

phi is the ReLU, or the identity for the linear dynamical system (LDS)
variant. All containers are immutable; "updates" build new objects.

Usage:
    from plrnn import PlrnnParams, ObsParamsLinear, ModelBundle, generate_latent

    latent = PlrnnParams(mu0=..., A=..., W=..., C=..., h=..., Sigma=...)
    traj = generate_latent(latent, T=1000, seed=7)
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Dict, Literal, Optional, Sequence, Union

import numpy as np

from errors import DimensionError, ParameterError

if TYPE_CHECKING:
    from hrf import ObsParamsBold

logger = logging.getLogger(__name__)

Nonlinearity = Literal["relu", "identity"]
NONLINEARITIES = ("relu", "identity")

# States beyond this magnitude count as diverged
DIVERGENCE_THRESHOLD = 1e8


def make_rng(seed: Optional[int], *stream: int) -> np.random.Generator:
    """Counter-based generator with explicit stream splitting.

    The same (seed, stream) pair always yields the same sequence; distinct
    stream tuples yield independent sequences.

    Args:
        seed: Root seed (None draws fresh OS entropy)
        *stream: Integers identifying the sub-stream (run index, step, ...)

    Returns:
        numpy Generator backed by Philox
    """
    seq = np.random.SeedSequence(seed, spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(seq))


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def apply_phi(z: np.ndarray, nonlinearity: Nonlinearity = "relu") -> np.ndarray:
    """Apply the transfer function elementwise."""
    if nonlinearity == "relu":
        return relu(z)
    if nonlinearity == "identity":
        return np.asarray(z, dtype=float)
    raise ValueError(
        f"Unknown nonlinearity '{nonlinearity}'. Valid options: {', '.join(NONLINEARITIES)}"
    )


def checked_array(name: str, value: Any, shape: Sequence[int]) -> np.ndarray:
    arr = np.array(value, dtype=float)
    if arr.shape != tuple(shape):
        raise DimensionError(name, arr.shape, shape)
    if not np.all(np.isfinite(arr)):
        raise ParameterError(name, "contains non-finite values")
    arr.setflags(write=False)
    return arr


def check_diagonal_covariance(name: str, cov: np.ndarray) -> None:
    off = cov - np.diag(np.diag(cov))
    if np.any(off != 0.0):
        raise ParameterError(name, "must be diagonal")
    if np.any(np.diag(cov) < 0.0):
        raise ParameterError(name, "diagonal entries must be non-negative")


@dataclass(frozen=True)
class PlrnnParams:
    """Latent PLRNN parameters.

    A is diagonal (M x M), W has a zero diagonal, Sigma is diagonal PSD and
    C maps K external inputs (K may be 0).
    """

    mu0: np.ndarray
    A: np.ndarray
    W: np.ndarray
    C: np.ndarray
    h: np.ndarray
    Sigma: np.ndarray
    nonlinearity: Nonlinearity = "relu"

    def __post_init__(self):
        mu0 = np.array(self.mu0, dtype=float).reshape(-1)
        M = mu0.shape[0]
        if M < 1:
            raise DimensionError("mu0", mu0.shape, detail="latent dimension must be >= 1")
        C = np.array(self.C, dtype=float)
        if C.size == 0:
            C = np.zeros((M, 0))
        if C.ndim != 2 or C.shape[0] != M:
            raise DimensionError("C", C.shape, (M, C.shape[-1] if C.ndim else 0))

        object.__setattr__(self, "mu0", checked_array("mu0", mu0, (M,)))
        object.__setattr__(self, "A", checked_array("A", self.A, (M, M)))
        object.__setattr__(self, "W", checked_array("W", self.W, (M, M)))
        object.__setattr__(self, "C", checked_array("C", C, C.shape))
        object.__setattr__(self, "h", checked_array("h", np.ravel(self.h), (M,)))
        object.__setattr__(self, "Sigma", checked_array("Sigma", self.Sigma, (M, M)))

        if np.any(self.A - np.diag(np.diag(self.A)) != 0.0):
            raise ParameterError("A", "off-diagonal entries must be zero")
        if np.any(np.diag(self.W) != 0.0):
            raise ParameterError("W", "diagonal entries must be zero")
        check_diagonal_covariance("Sigma", self.Sigma)
        if self.nonlinearity not in NONLINEARITIES:
            raise ValueError(
                f"Unknown nonlinearity '{self.nonlinearity}'. "
                f"Valid options: {', '.join(NONLINEARITIES)}"
            )

    @property
    def M(self) -> int:
        return self.mu0.shape[0]

    @property
    def K(self) -> int:
        return self.C.shape[1]

    def phi(self, z: np.ndarray) -> np.ndarray:
        return apply_phi(z, self.nonlinearity)

    def replace(self, **changes) -> "PlrnnParams":
        return dataclasses.replace(self, **changes)

    def transition_matrix(self, region: np.ndarray) -> np.ndarray:
        """Linear map A + W D_region governing one linear sub-region."""
        d = np.asarray(region, dtype=float)
        if self.nonlinearity == "identity":
            d = np.ones(self.M)
        return self.A + self.W * d[None, :]


@dataclass(frozen=True)
class ObsParamsLinear:
    """Linear observation head x = B phi(z) + eta with diagonal Gamma."""

    B: np.ndarray
    Gamma: np.ndarray

    def __post_init__(self):
        B = np.array(self.B, dtype=float)
        if B.ndim != 2:
            raise DimensionError("B", B.shape, detail="must be N x M")
        N = B.shape[0]
        object.__setattr__(self, "B", checked_array("B", B, B.shape))
        object.__setattr__(self, "Gamma", checked_array("Gamma", self.Gamma, (N, N)))
        check_diagonal_covariance("Gamma", self.Gamma)

    @property
    def N(self) -> int:
        return self.B.shape[0]

    @property
    def M(self) -> int:
        return self.B.shape[1]

    kind = "linear"

    def replace(self, **changes) -> "ObsParamsLinear":
        return dataclasses.replace(self, **changes)


ObsParams = Union[ObsParamsLinear, "ObsParamsBold"]


@dataclass(frozen=True)
class Trajectory:
    """Ordered sequence of equally spaced vectors.

    `values` is T x D. Optional `inputs` (T x K) and `nuisance` (T x P)
    share the time axis. Non-finite values are only allowed when the
    trajectory is flagged unstable.
    """

    values: np.ndarray
    inputs: Optional[np.ndarray] = None
    nuisance: Optional[np.ndarray] = None
    dt: float = 1.0
    unstable: bool = False
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2 or values.shape[0] < 2:
            raise DimensionError("values", values.shape, detail="need T >= 2 rows")
        if not self.unstable and not np.all(np.isfinite(values)):
            raise ParameterError("values", "non-finite entries in a stable trajectory")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        for name in ("inputs", "nuisance"):
            extra = getattr(self, name)
            if extra is None:
                continue
            extra = np.array(extra, dtype=float)
            if extra.ndim == 1:
                extra = extra[:, None]
            if extra.shape[0] != values.shape[0]:
                raise DimensionError(
                    name, extra.shape, (values.shape[0], extra.shape[-1]),
                    detail="row count must match values",
                )
            extra.setflags(write=False)
            object.__setattr__(self, name, extra)
        if self.dt <= 0:
            raise ParameterError("dt", "must be positive")

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def replace(self, **changes) -> "Trajectory":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class ModelBundle:
    """Latent parameters, one observation head and provenance metadata."""

    latent: PlrnnParams
    observation: ObsParams
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.observation.B.shape[1] != self.latent.M:
            raise DimensionError(
                "B", self.observation.B.shape, (self.observation.B.shape[0], self.latent.M),
                detail="columns must equal latent dimension M",
            )

    @property
    def head(self) -> str:
        return self.observation.kind

    @property
    def M(self) -> int:
        return self.latent.M

    @property
    def N(self) -> int:
        return self.observation.N

    def replace(self, **changes) -> "ModelBundle":
        return dataclasses.replace(self, **changes)


def _inputs_for(params: PlrnnParams, T: int, inputs: Optional[np.ndarray]) -> np.ndarray:
    if inputs is None:
        return np.zeros((T, params.K))
    S = np.asarray(inputs, dtype=float)
    if S.ndim == 1:
        S = S[:, None]
    if S.shape != (T, params.K):
        raise DimensionError("inputs", S.shape, (T, params.K))
    return S


def latent_step(
    params: PlrnnParams,
    z_prev: np.ndarray,
    s_t: Optional[np.ndarray] = None,
    noise: Optional[np.ndarray] = None,
) -> np.ndarray:
    """One deterministic transition plus optional additive noise.

    Works on a single state (M,) or a batch (..., M).

    Args:
        params: Latent parameters
        z_prev: Previous state(s)
        s_t: Input at time t, shape (K,) or broadcastable (..., K)
        noise: Optional additive noise with the shape of z_prev

    Returns:
        Next state(s)
    """
    z_prev = np.asarray(z_prev, dtype=float)
    if z_prev.shape[-1] != params.M:
        raise DimensionError("z_prev", z_prev.shape, (params.M,))
    a = np.diag(params.A)
    z = a * z_prev + params.phi(z_prev) @ params.W.T + params.h
    if s_t is not None and params.K > 0:
        s_t = np.asarray(s_t, dtype=float)
        if s_t.shape[-1] != params.K:
            raise DimensionError("s_t", s_t.shape, (params.K,))
        z = z + s_t @ params.C.T
    if noise is not None:
        z = z + noise
    return z


def generate_latent(
    params: PlrnnParams,
    T: int,
    inputs: Optional[np.ndarray] = None,
    z1: Optional[np.ndarray] = None,
    seed: Optional[int] = None,
    deterministic: bool = False,
) -> Trajectory:
    """Simulate the latent process.

    Args:
        params: Latent parameters
        T: Number of time steps (>= 2)
        inputs: Optional T x K input matrix
        z1: Optional initial state; drawn from N(mu0 + C s_1, Sigma) otherwise
        seed: Seed for the Philox stream
        deterministic: Drop all process noise (initial state becomes mu0 + C s_1)

    Returns:
        Trajectory of latent states. On divergence (|z| > 1e8 or
        non-finite) the remaining rows are NaN and `unstable` is set.
    """
    if T < 2:
        raise DimensionError("T", (T,), detail="need T >= 2")
    S = _inputs_for(params, T, inputs)
    rng = make_rng(seed, 0)
    sd = np.sqrt(np.diag(params.Sigma))

    Z = np.full((T, params.M), np.nan)
    if z1 is not None:
        z = np.asarray(z1, dtype=float).reshape(-1)
        if z.shape != (params.M,):
            raise DimensionError("z1", z.shape, (params.M,))
    else:
        z = params.mu0 + params.C @ S[0]
        if not deterministic:
            z = z + sd * rng.standard_normal(params.M)
    Z[0] = z

    unstable = False
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(1, T):
            noise = None if deterministic else sd * rng.standard_normal(params.M)
            z = latent_step(params, z, S[t], noise)
            if not np.all(np.isfinite(z)) or np.max(np.abs(z)) > DIVERGENCE_THRESHOLD:
                unstable = True
                logger.debug(f"Latent simulation diverged at t={t}")
                break
            Z[t] = z

    return Trajectory(
        values=Z,
        inputs=S if params.K > 0 else None,
        unstable=unstable,
    )


def noise_requested(noise: Optional[bool], seed: Optional[int]) -> bool:
    """Observation noise is drawn when asked for, or by default when seeded."""
    return seed is not None if noise is None else noise


def observe_linear(
    obs: ObsParamsLinear,
    z: Union[np.ndarray, Trajectory],
    seed: Optional[int] = None,
    nonlinearity: Nonlinearity = "relu",
    noise: Optional[bool] = None,
) -> Trajectory:
    """Map latent states to observations x_t = B phi(z_t) + eta_t.

    Args:
        obs: Linear observation parameters
        z: T x M latent states (array or Trajectory)
        seed: Seed for observation noise
        nonlinearity: Transfer function of the generating model
        noise: Add N(0, Gamma) noise. By default only when a seed is given.

    Returns:
        Trajectory of T x N observations
    """
    Z = z.values if isinstance(z, Trajectory) else np.asarray(z, dtype=float)
    if Z.ndim != 2 or Z.shape[1] != obs.M:
        raise DimensionError("z", Z.shape, (Z.shape[0] if Z.ndim else 0, obs.M))
    X = apply_phi(Z, nonlinearity) @ obs.B.T
    if noise_requested(noise, seed):
        rng = make_rng(seed, 1)
        X = X + np.sqrt(np.diag(obs.Gamma)) * rng.standard_normal(X.shape)
    unstable = isinstance(z, Trajectory) and z.unstable
    return Trajectory(values=X, unstable=unstable or not np.all(np.isfinite(X)))


def observe(
    bundle: ModelBundle,
    z: Union[np.ndarray, Trajectory],
    nuisance: Optional[np.ndarray] = None,
    seed: Optional[int] = None,
    noise: Optional[bool] = None,
) -> Trajectory:
    """Dispatch to the bundle's observation head."""
    if bundle.head == "linear":
        if nuisance is not None and np.size(nuisance) > 0:
            raise DimensionError(
                "nuisance", np.shape(nuisance), detail="linear head takes no nuisance regressors"
            )
        return observe_linear(
            bundle.observation, z, seed=seed,
            nonlinearity=bundle.latent.nonlinearity, noise=noise,
        )
    from hrf import observe_bold

    return observe_bold(
        bundle.observation, z, nuisance=nuisance, seed=seed,
        nonlinearity=bundle.latent.nonlinearity, noise=noise,
    )


def simulate(
    bundle: ModelBundle,
    T: int,
    inputs: Optional[np.ndarray] = None,
    nuisance: Optional[np.ndarray] = None,
    seed: Optional[int] = None,
    deterministic: bool = False,
) -> tuple[Trajectory, Trajectory]:
    """Generate latent states and observations from a full model.

    Returns:
        (latent trajectory, observation trajectory)
    """
    latent = generate_latent(
        bundle.latent, T, inputs=inputs, seed=seed, deterministic=deterministic
    )
    if latent.unstable:
        X = np.full((T, bundle.N), np.nan)
        return latent, Trajectory(values=X, unstable=True)
    observed = observe(
        bundle, latent, nuisance=nuisance, seed=seed, noise=False if deterministic else None
    )
    return latent, observed.replace(inputs=latent.inputs, nuisance=nuisance)


def spectral_radius(matrix: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(matrix))))
