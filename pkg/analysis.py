"""Fixed points and attractors of the deterministic PLRNN map.

Fixed points are found analytically: inside region d the map is affine,
so z* = (I - A - W D)^{-1} h, and the candidate is a true fixed point when
its sign pattern matches d. Attractors are found by simulation from many
random initial states, then classified as fixed point, limit cycle or
chaotic and merged by Hausdorff distance.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Literal, Optional

import numpy as np
from scipy import stats
from scipy.spatial.distance import directed_hausdorff

from errors import ParameterError
from plrnn import DIVERGENCE_THRESHOLD, PlrnnParams, latent_step, make_rng

logger = logging.getLogger(__name__)

MAX_ENUMERATION_DIM = 20
# Coordinates below this are driven to -inf and no longer influence the others
FREEZE_THRESHOLD = -1e6
_REGION_CHUNK = 4096


@dataclass(frozen=True)
class FixedPoint:
    z_star: np.ndarray
    region: np.ndarray
    eigenvalues: np.ndarray
    stable: bool
    consistent: bool
    degenerate: bool = False

    @property
    def spectral_radius(self) -> float:
        return float(np.max(np.abs(self.eigenvalues))) if self.eigenvalues.size else float("nan")

    def to_dict(self) -> dict:
        return {
            "z_star": self.z_star.tolist(),
            "region": self.region.astype(int).tolist(),
            "eigenvalues_real": np.real(self.eigenvalues).tolist(),
            "eigenvalues_imag": np.imag(self.eigenvalues).tolist(),
            "stable": self.stable,
            "consistent": self.consistent,
            "degenerate": self.degenerate,
        }


def _regions(start: int, stop: int, M: int) -> np.ndarray:
    codes = np.arange(start, stop, dtype=np.int64)
    return ((codes[:, None] >> np.arange(M)) & 1).astype(bool)


def enumerate_fixed_points(
    params: PlrnnParams,
    max_dim: int = MAX_ENUMERATION_DIM,
    only_consistent: bool = False,
) -> List[FixedPoint]:
    """Solve for the fixed point of every linear region.

    Args:
        params: Latent parameters (inputs are taken as zero)
        max_dim: Refuse to enumerate 2^M regions beyond this M
        only_consistent: Drop candidates whose sign pattern violates the region

    Returns:
        One FixedPoint per region (or only the consistent ones). Singular
        regions are returned with `degenerate` set and NaN coordinates.
    """
    M = params.M
    if M > max_dim:
        raise ParameterError("M", f"{M} exceeds the enumeration cap of {max_dim} (2^M regions)")
    if params.nonlinearity == "identity":
        region_count = 1
    else:
        region_count = 2**M

    eye = np.eye(M)
    points: List[FixedPoint] = []
    n_degenerate = 0
    for start in range(0, region_count, _REGION_CHUNK):
        stop = min(start + _REGION_CHUNK, region_count)
        if params.nonlinearity == "identity":
            regions = np.ones((1, M), dtype=bool)
        else:
            regions = _regions(start, stop, M)
        maps = params.A[None] + params.W[None] * regions[:, None, :]
        systems = eye[None] - maps
        cond = np.linalg.cond(systems)
        ok = np.isfinite(cond) & (cond < 1e12)
        z = np.full((regions.shape[0], M), np.nan)
        if ok.any():
            rhs = np.broadcast_to(params.h, (ok.sum(), M))[..., None]
            z[ok] = np.linalg.solve(systems[ok], rhs)[..., 0]
        eigenvalues = np.linalg.eigvals(maps)
        radius = np.max(np.abs(eigenvalues), axis=1)
        if params.nonlinearity == "identity":
            consistent = ok.copy()
        else:
            consistent = ok & np.all((z > 0) == regions, axis=1)
        n_degenerate += int((~ok).sum())
        for i in range(regions.shape[0]):
            if only_consistent and not consistent[i]:
                continue
            points.append(
                FixedPoint(
                    z_star=z[i],
                    region=regions[i],
                    eigenvalues=eigenvalues[i],
                    stable=bool(radius[i] <= 1.0),
                    consistent=bool(consistent[i]),
                    degenerate=bool(not ok[i]),
                )
            )
    if n_degenerate:
        logger.debug(f"{n_degenerate} regions have a singular I - A - W D")
    return points


@dataclass(frozen=True)
class AttractorConfig:
    """Multi-start simulation settings; initial states are N(0, init_scale^2 I)."""

    n_init: int = 100
    T: int = 5000
    transient_fraction: float = 0.2
    init_scale: float = 2.0
    fixed_point_tol: float = 1e-8
    merge_tol: float = 1e-3
    chaotic_merge_tol: float = 0.25
    chaos_slope: float = 1e-3
    chaos_p: float = 0.05
    chaos_d0: float = 1e-8
    chaos_horizon: int = 200
    seed: Optional[int] = None
    max_fixed_point_dim: int = MAX_ENUMERATION_DIM

    def __post_init__(self):
        if self.n_init < 1:
            raise ParameterError("n_init", "need at least one initial condition")
        if not 0 <= self.transient_fraction < 1:
            raise ParameterError("transient_fraction", "must lie in [0, 1)")
        if self.T < 10:
            raise ParameterError("T", "horizon too short")


@dataclass(frozen=True)
class Attractor:
    kind: Literal["fixed_point", "limit_cycle", "chaotic"]
    representative: np.ndarray
    hits: int
    runs: List[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "hits": self.hits,
            "runs": list(self.runs),
            "representative": self.representative.tolist(),
        }


@dataclass(frozen=True)
class AttractorSet:
    attractors: List[Attractor]
    n_unstable_fixed_points: int
    n_unbounded: int
    n_init: int
    fixed_points_enumerated: bool = True

    @property
    def n_stable(self) -> int:
        return len(self.attractors)

    def count(self, kind: str) -> int:
        return sum(a.kind == kind for a in self.attractors)

    def to_dict(self) -> dict:
        return {
            "n_stable": self.n_stable,
            "n_fixed_points": self.count("fixed_point"),
            "n_limit_cycles": self.count("limit_cycle"),
            "n_chaotic": self.count("chaotic"),
            "n_unstable_fixed_points": self.n_unstable_fixed_points,
            "n_unbounded": self.n_unbounded,
            "n_init": self.n_init,
            "fixed_points_enumerated": self.fixed_points_enumerated,
            "attractors": [a.to_dict() for a in self.attractors],
        }


def _simulate_batch(params: PlrnnParams, Z0: np.ndarray, T: int, keep: int):
    """Noise-free runs; returns the last `keep` states and an unbounded mask."""
    n, M = Z0.shape
    z = Z0.copy()
    tail = np.full((n, keep, M), np.nan)
    unbounded = np.zeros(n, dtype=bool)
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(1, T):
            z = latent_step(params, z)
            live = np.where(z < FREEZE_THRESHOLD, 0.0, z)
            too_far = np.max(np.abs(live), axis=1) > DIVERGENCE_THRESHOLD
            bad = ~np.all(np.isfinite(live), axis=1) | too_far
            unbounded |= bad
            z[unbounded] = 0.0
            slot = t - (T - keep)
            if slot >= 0:
                tail[:, slot] = z
    tail[unbounded] = np.nan
    return tail, unbounded


def _run_slopes(
    params: PlrnnParams, starts: np.ndarray, config: AttractorConfig, rng
) -> np.ndarray:
    """Per-run log-distance regression (slope, p-value) for one perturbed pair each."""
    frozen = starts < FREEZE_THRESHOLD
    direction = rng.standard_normal(starts.shape) * ~frozen
    norms = np.linalg.norm(direction, axis=1, keepdims=True)
    direction = direction / np.where(norms > 0, norms, 1.0)
    x, y = starts.copy(), starts + config.chaos_d0 * direction
    logs = np.empty((starts.shape[0], config.chaos_horizon + 1))
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        logs[:, 0] = np.log(np.linalg.norm(np.where(frozen, 0.0, x - y), axis=1))
        for k in range(1, config.chaos_horizon + 1):
            x, y = latent_step(params, x), latent_step(params, y)
            diff = np.where(frozen, 0.0, x - y)
            logs[:, k] = np.log(np.linalg.norm(diff, axis=1))

    result = np.zeros((starts.shape[0], 2))
    for i, curve in enumerate(logs):
        finite = np.flatnonzero(np.isfinite(curve))
        if finite.size < 3:
            result[i] = (0.0, 1.0)
            continue
        end = finite[-1]
        plateau = np.mean(curve[finite[-max(1, finite.size // 10):]]) - curve[finite[0]]
        if plateau > 0:
            reached = np.flatnonzero(curve[: end + 1] - curve[finite[0]] >= 0.9 * plateau)
            end = max(int(reached[0]), 5) if reached.size else end
        window = finite[finite <= end]
        if window.size < 3:
            result[i] = (0.0, 1.0)
            continue
        fit = stats.linregress(window, curve[window])
        result[i] = (fit.slope, fit.pvalue)
    return result


def _hausdorff(a: np.ndarray, b: np.ndarray) -> float:
    return max(directed_hausdorff(a, b)[0], directed_hausdorff(b, a)[0])


def detect_attractors(
    params: PlrnnParams, config: AttractorConfig = AttractorConfig()
) -> AttractorSet:
    """Find and classify the attracting objects reached from random starts.

    Args:
        params: Latent parameters; the map runs without noise and inputs
        config: Simulation and classification settings

    Returns:
        AttractorSet; unbounded runs are counted separately and unstable
        fixed points come from enumerate_fixed_points
    """
    rng = make_rng(config.seed, 5)
    M = params.M
    Z0 = rng.normal(0.0, config.init_scale, size=(config.n_init, M))
    keep = max(2, config.T - int(config.transient_fraction * config.T))
    tail, unbounded = _simulate_batch(params, Z0, config.T, keep)

    bounded = np.flatnonzero(~unbounded)
    terminal = tail[bounded]
    masked = np.where(terminal < FREEZE_THRESHOLD, 0.0, terminal)
    scale = masked.reshape(-1, M).std(axis=0) if bounded.size else np.ones(M)
    scale = np.where(scale > 1e-12, scale, 1.0)
    standardized = masked / scale

    step = np.linalg.norm(masked[:, -1] - masked[:, -2], axis=1) if bounded.size else np.zeros(0)
    is_fixed = step < config.fixed_point_tol
    kinds = np.where(is_fixed, "fixed_point", "limit_cycle").astype(object)
    moving = np.flatnonzero(~is_fixed)
    if moving.size:
        slopes = _run_slopes(params, terminal[moving, -1], config, rng)
        chaotic = (slopes[:, 0] > config.chaos_slope) & (slopes[:, 1] < config.chaos_p)
        kinds[moving[chaotic]] = "chaotic"

    attractors: List[dict] = []
    for local, run in enumerate(bounded):
        kind = kinds[local]
        points = standardized[local, -1:] if kind == "fixed_point" else standardized[local]
        tol = config.chaotic_merge_tol if kind == "chaotic" else config.merge_tol
        for entry in attractors:
            if entry["kind"] == kind and _hausdorff(points, entry["points"]) < tol:
                entry["runs"].append(int(run))
                break
        else:
            attractors.append(
                {"kind": kind, "points": points, "runs": [int(run)], "raw": terminal[local]}
            )

    objects = [
        Attractor(
            kind=e["kind"],
            representative=e["raw"][-1] if e["kind"] == "fixed_point" else e["raw"],
            hits=len(e["runs"]),
            runs=e["runs"],
        )
        for e in attractors
    ]

    enumerated = M <= config.max_fixed_point_dim
    n_unstable = 0
    if enumerated:
        candidates = enumerate_fixed_points(
            params, config.max_fixed_point_dim, only_consistent=True
        )
        n_unstable = sum(not fp.stable for fp in candidates)
    else:
        logger.warning(f"M={M} too large to enumerate fixed points; unstable count omitted")

    result = AttractorSet(
        attractors=objects,
        n_unstable_fixed_points=n_unstable,
        n_unbounded=int(unbounded.sum()),
        n_init=config.n_init,
        fixed_points_enumerated=enumerated,
    )
    logger.info(
        f"Attractors: {result.count('fixed_point')} fixed points, "
        f"{result.count('limit_cycle')} limit cycles, {result.count('chaotic')} chaotic, "
        f"{result.n_unbounded} unbounded runs"
    )
    return result


@dataclass(frozen=True)
class DynamicsReport:
    fixed_points: List[FixedPoint]
    attractors: Optional[AttractorSet]

    def to_dict(self) -> dict:
        return {
            "fixed_points": [fp.to_dict() for fp in self.fixed_points],
            "attractors": self.attractors.to_dict() if self.attractors else None,
        }


def analyze_dynamics(
    params: PlrnnParams, config: AttractorConfig = AttractorConfig()
) -> DynamicsReport:
    """Consistent fixed points plus the simulated attractor inventory."""
    fixed = []
    if params.M <= config.max_fixed_point_dim:
        fixed = enumerate_fixed_points(params, config.max_fixed_point_dim, only_consistent=True)
    return DynamicsReport(fixed_points=fixed, attractors=detect_attractors(params, config))
