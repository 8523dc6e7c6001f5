"""Benchmark dynamical systems: Lorenz and van der Pol.

Trajectories are integrated with a classic fixed-step RK4 scheme and
subsampled. Optional Gaussian process noise is added either after every
retained sample (default) or after every RK4 step.

Usage:
    from benchmarks import OdeSystem, SamplingSpec, rk4_sample, standardize

    traj = rk4_sample(OdeSystem.lorenz(), SamplingSpec(T=1000, noise_var=0.3, seed=1))
    data, transform = standardize(traj)
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Literal, Optional, Sequence, Tuple

import numpy as np

from errors import DimensionError, ParameterError
from plrnn import Trajectory, make_rng

logger = logging.getLogger(__name__)

Derivative = Callable[[np.ndarray], np.ndarray]

SYSTEM_DIMS = {"lorenz": 3, "vdp": 2}
DEFAULT_PARAMS = {
    "lorenz": {"s": 10.0, "r": 28.0, "b": 8.0 / 3.0},
    "vdp": {"mu": 2.0, "omega": 1.0},
}
# Uniform boxes around each attractor for random initial conditions
INITIAL_BOXES = {
    "lorenz": ((-10.0, -10.0, 0.0), (10.0, 10.0, 40.0)),
    "vdp": ((-3.0, -3.0), (3.0, 3.0)),
}
# Process-noise variances used for the benchmark protocol
PROTOCOL_NOISE = {"lorenz": 0.3, "vdp": 0.1}


def lorenz_deriv(
    state: np.ndarray, s: float = 10.0, r: float = 28.0, b: float = 8.0 / 3.0
) -> np.ndarray:
    """Lorenz vector field; accepts a single state or a batch (..., 3)."""
    state = np.asarray(state, dtype=float)
    x, y, z = state[..., 0], state[..., 1], state[..., 2]
    return np.stack([s * (y - x), x * (r - z) - y, x * y - b * z], axis=-1)


def vdp_deriv(state: np.ndarray, mu: float = 2.0, omega: float = 1.0) -> np.ndarray:
    """van der Pol vector field; accepts a single state or a batch (..., 2)."""
    state = np.asarray(state, dtype=float)
    x, y = state[..., 0], state[..., 1]
    return np.stack([y, mu * (1.0 - x**2) * y - omega**2 * x], axis=-1)


@dataclass(frozen=True)
class OdeSystem:
    name: Literal["lorenz", "vdp"]
    params: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in SYSTEM_DIMS:
            raise ValueError(
                f"Unknown system '{self.name}'. Valid options: {', '.join(SYSTEM_DIMS)}"
            )
        merged = dict(DEFAULT_PARAMS[self.name])
        unknown = set(self.params) - set(merged)
        if unknown:
            raise ParameterError(
                "params", f"unknown keys {sorted(unknown)} for system '{self.name}'"
            )
        merged.update({k: float(v) for k, v in self.params.items()})
        if not all(np.isfinite(v) for v in merged.values()):
            raise ParameterError("params", "parameters must be finite")
        object.__setattr__(self, "params", merged)

    @property
    def dim(self) -> int:
        return SYSTEM_DIMS[self.name]

    @classmethod
    def lorenz(cls, s: float = 10.0, r: float = 28.0, b: float = 8.0 / 3.0) -> "OdeSystem":
        return cls("lorenz", {"s": s, "r": r, "b": b})

    @classmethod
    def vdp(cls, mu: float = 2.0, omega: float = 1.0) -> "OdeSystem":
        return cls("vdp", {"mu": mu, "omega": omega})

    def deriv(self, state: np.ndarray) -> np.ndarray:
        if self.name == "lorenz":
            return lorenz_deriv(state, **self.params)
        return vdp_deriv(state, **self.params)


@dataclass(frozen=True)
class SamplingSpec:
    """How to draw one benchmark trajectory.

    `dt` is the RK4 step; one sample is kept every `subsample` steps. With
    `initial=None` the start is uniform in the system's box. The first
    `burn_in` samples are always discarded, also after an explicit `initial`;
    set `burn_in=0` to keep the initial state as the first sample.
    """

    T: int = 1000
    dt: float = 0.01
    subsample: int = 10
    noise_var: float = 0.0
    seed: Optional[int] = None
    initial: Optional[Sequence[float]] = None
    burn_in: int = 500
    noise_mode: Literal["per_sample", "per_step"] = "per_sample"

    def __post_init__(self):
        if self.T < 2:
            raise ParameterError("T", "need at least 2 samples")
        if self.dt <= 0:
            raise ParameterError("dt", "integration step must be positive")
        if self.subsample < 1:
            raise ParameterError("subsample", "must be >= 1")
        if self.noise_var < 0:
            raise ParameterError("noise_var", "must be non-negative")
        if self.burn_in < 0:
            raise ParameterError("burn_in", "must be non-negative")
        if self.noise_mode not in ("per_sample", "per_step"):
            raise ParameterError("noise_mode", "must be 'per_sample' or 'per_step'")

    @property
    def sample_interval(self) -> float:
        return self.dt * self.subsample


def rk4_step(f: Derivative, x: np.ndarray, dt: float) -> np.ndarray:
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_rk4(
    f: Derivative,
    x0: np.ndarray,
    dt: float,
    n_samples: int,
    subsample: int = 1,
    noise_var: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    noise_mode: str = "per_sample",
) -> Tuple[np.ndarray, bool]:
    """Fixed-step RK4 integration with optional discrete process noise.

    The first row is x0; every further row is `subsample` RK4 steps later.

    Returns:
        (samples of shape n_samples x D, unstable flag). After divergence the
        remaining rows are NaN.
    """
    x = np.array(x0, dtype=float)
    out = np.full((n_samples,) + x.shape, np.nan)
    out[0] = x
    sd = np.sqrt(noise_var)
    if noise_var > 0 and rng is None:
        rng = np.random.default_rng()

    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(1, n_samples):
            for _ in range(subsample):
                x = rk4_step(f, x, dt)
                if noise_var > 0 and noise_mode == "per_step":
                    x = x + sd * rng.standard_normal(x.shape)
            if noise_var > 0 and noise_mode == "per_sample":
                x = x + sd * rng.standard_normal(x.shape)
            if not np.all(np.isfinite(x)):
                logger.warning(f"RK4 integration became non-finite at sample {i}")
                return out, True
            out[i] = x
    return out, False


def rk4_sample(system: OdeSystem, spec: SamplingSpec) -> Trajectory:
    """Draw one trajectory of `spec.T` samples from a benchmark system.

    Args:
        system: Lorenz or van der Pol system
        spec: Sampling specification

    Returns:
        Trajectory with dt equal to the sample interval. Non-finite states
        abort the integration and flag the trajectory unstable.
    """
    rng = make_rng(spec.seed, 2)
    if spec.initial is None:
        low, high = INITIAL_BOXES[system.name]
        x0 = rng.uniform(low, high)
    else:
        x0 = np.asarray(spec.initial, dtype=float)
        if x0.shape != (system.dim,):
            raise DimensionError("initial", x0.shape, (system.dim,))

    n_total = spec.T + spec.burn_in
    samples, unstable = integrate_rk4(
        system.deriv,
        x0,
        spec.dt,
        n_total,
        subsample=spec.subsample,
        noise_var=spec.noise_var,
        rng=rng,
        noise_mode=spec.noise_mode,
    )
    values = samples[spec.burn_in:]
    logger.debug(
        f"Sampled {system.name}: T={spec.T}, burn_in={spec.burn_in}, "
        f"noise_var={spec.noise_var}, unstable={unstable}"
    )
    return Trajectory(
        values=values,
        dt=spec.sample_interval,
        unstable=unstable,
        metadata={"system": system.name, "params": dict(system.params), "seed": spec.seed},
    )


@dataclass(frozen=True)
class StandardizeTransform:
    """Affine map x -> (x - mean) / scale, column-wise."""

    mean: np.ndarray
    scale: np.ndarray

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=float) - self.mean) / self.scale

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=float) * self.scale + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "StandardizeTransform":
        return cls(mean=np.asarray(data["mean"], float), scale=np.asarray(data["scale"], float))


def standardize(
    traj: Trajectory, columns: Optional[Sequence[str]] = None
) -> Tuple[Trajectory, StandardizeTransform]:
    """Zero-mean, unit-variance columns.

    Args:
        traj: Trajectory to standardize
        columns: Optional column names used in error messages

    Returns:
        (standardized trajectory, transform for inverse mapping)

    Raises:
        ParameterError: If the trajectory is unstable or a column has zero variance
    """
    values = traj.values
    if traj.unstable or not np.all(np.isfinite(values)):
        raise ParameterError("traj", "unstable trajectory with non-finite rows, cannot standardize")
    mean = values.mean(axis=0)
    scale = values.std(axis=0)
    flat = np.flatnonzero(~(scale > 0))
    if flat.size:
        name = columns[flat[0]] if columns is not None else f"column {flat[0]}"
        raise ParameterError(name, "zero variance, cannot standardize")
    transform = StandardizeTransform(mean=mean, scale=scale)
    return traj.replace(values=transform.apply(values)), transform
