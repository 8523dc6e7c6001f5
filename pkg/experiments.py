"""Experiment pipelines behind the command line.

- run_benchmark_suite: sample benchmark systems, fit, generate and score
- fit_dataset: ingest channel CSVs, smooth, standardize, fit, evaluate
- simulate_task / evaluate_task / analyze_task: single-model utilities

Usage:
    from experiments import ExperimentConfig, run_benchmark_suite

    config = ExperimentConfig.from_json("suite.json", n_seeds=5)
    report = run_benchmark_suite(config)
"""

import dataclasses
import logging
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import stats
from scipy.ndimage import gaussian_filter1d
from tqdm import tqdm

from analysis import AttractorConfig, analyze_dynamics, detect_attractors
from artifacts import ArtifactHelper
from benchmarks import PROTOCOL_NOISE, SYSTEM_DIMS, OdeSystem, SamplingSpec, rk4_sample, standardize
from config import Config
from errors import ConfigValidationError, DataValidationError, ParameterError, PlrnnSsmError
from hrf import canonical_hrf
from inference import EstepConfig, estep
from metrics import (
    BinSpec,
    base_points,
    kl_x,
    kl_z_report,
    lyapunov_max,
    n_step_ahead_mse,
    ode_stepper,
    plrnn_stepper,
    power_spectrum_correlation,
)
from plrnn import ModelBundle, Trajectory, generate_latent, observe, simulate
from training import AnnealConfig, anneal_fit

logger = logging.getLogger(__name__)

TASKS = ("simulate", "fit", "evaluate", "analyze", "benchmark-suite")
SUITE_SCHEMA = "plrnn-ssm/suite"
# RK4 settings of the benchmark protocol
BENCHMARK_DT = 0.01
BENCHMARK_SUBSAMPLE = 10


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a CLI task needs. Loadable from JSON; unknown keys are rejected."""

    task: str = "fit"
    # Data ingestion
    data_path: Optional[str] = None
    inputs_path: Optional[str] = None
    nuisance_path: Optional[str] = None
    nuisance_dim: int = 0
    model_path: Optional[str] = None
    smoothing: bool = True
    smoothing_sigma: float = 1.0
    standardize: bool = True
    use_inputs: bool = True
    # Model
    head: str = "linear"
    tr: Optional[float] = None
    kernel_path: Optional[str] = None
    # Canonical kernel length in seconds when no kernel file is given
    hrf_duration: float = 32.0
    convolve_phi: bool = False
    nonlinearity: str = "relu"
    M_list: Tuple[int, ...] = (8,)
    protocol: str = "anneal"
    sigma_schedule: Tuple[float, ...] = (1e-1, 1e-2, 1e-3)
    ridge_lambda: float = 0.0
    em_max_iter: int = 200
    em_tol: float = 1e-5
    # Benchmark suite
    systems: Tuple[str, ...] = ("lorenz",)
    protocols: Tuple[str, ...] = ("anneal",)
    n_seeds: int = 20
    sample_T: int = 1000
    noise_var: Optional[float] = None
    gen_T: int = 100_000
    success_threshold: float = 0.4
    outlier_q: float = -1000.0
    lyapunov_pairs: int = 20
    lyapunov_horizon: int = 500
    # Evaluation and analysis
    kl_z_samples: int = 500_000
    ahead_steps: int = 10
    analyze: bool = True
    attractor_n_init: int = 100
    attractor_T: int = 5000
    simulate_T: int = 1000
    system: Optional[str] = None
    # RK4 sampling of benchmark systems
    dt: float = BENCHMARK_DT
    subsample: int = BENCHMARK_SUBSAMPLE
    burn_in: int = 500
    initial: Optional[Tuple[float, ...]] = None
    noise_mode: str = "per_sample"
    # Environment-level (fall back to Config)
    seed: Optional[int] = None
    output_dir: Optional[str] = None
    workers: Optional[int] = None

    def __post_init__(self):
        for name in ("M_list", "sigma_schedule", "systems", "protocols"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.initial is not None:
            object.__setattr__(self, "initial", tuple(float(v) for v in self.initial))

    @classmethod
    def field_names(cls) -> List[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_dict(cls, data: Dict[str, Any], **overrides) -> "ExperimentConfig":
        merged = dict(data)
        merged.update({k: v for k, v in overrides.items() if v is not None})
        unknown = sorted(set(merged) - set(cls.field_names()))
        if unknown:
            raise ConfigValidationError(unknown[0], "unknown configuration key")
        return cls(**merged)

    @classmethod
    def from_json(cls, path: str, **overrides) -> "ExperimentConfig":
        try:
            data = ArtifactHelper.read_json(path)
        except DataValidationError as e:
            raise ConfigValidationError("config", str(e)) from e
        if not isinstance(data, dict):
            raise ConfigValidationError("config", "top level must be a JSON object")
        return cls.from_dict(data, **overrides)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    @property
    def resolved_seed(self) -> int:
        return Config.get_seed(self.seed)

    @property
    def resolved_output_dir(self) -> Path:
        return Config.get_output_dir(self.output_dir)

    @property
    def resolved_workers(self) -> int:
        return Config.get_workers(self.workers)

    def validate(self) -> "ExperimentConfig":
        """Check the fields the task needs.

        Raises:
            ConfigValidationError: Naming the first offending field
        """
        if self.task not in TASKS:
            raise ConfigValidationError("task", f"must be one of {', '.join(TASKS)}")
        if self.head not in ("linear", "bold"):
            raise ConfigValidationError("head", "must be 'linear' or 'bold'")
        if self.nonlinearity not in ("relu", "identity"):
            raise ConfigValidationError("nonlinearity", "must be 'relu' or 'identity'")
        if self.head == "bold" and self.task == "fit" and self.tr is None:
            raise ConfigValidationError("tr", "the bold head needs the sampling interval (s)")
        if self.tr is not None and self.tr <= 0:
            raise ConfigValidationError("tr", "must be positive")
        if self.task in ("fit", "benchmark-suite"):
            if not self.M_list:
                raise ConfigValidationError("M_list", "needs at least one latent dimension")
            if any(int(m) < 1 for m in self.M_list):
                raise ConfigValidationError("M_list", "latent dimensions must be >= 1")
        for protocol in (self.protocol,) + self.protocols:
            if protocol not in ("anneal", "random_init"):
                raise ConfigValidationError("protocol", f"unknown protocol {protocol!r}")
        if self.system is not None and self.system not in SYSTEM_DIMS:
            raise ConfigValidationError("system", f"unknown system {self.system!r}")
        for system in self.systems:
            if system not in SYSTEM_DIMS:
                raise ConfigValidationError("systems", f"unknown system {system!r}")
        if self.n_seeds < 0:
            raise ConfigValidationError("n_seeds", "must be non-negative")
        schedule = self.sigma_schedule
        if not schedule or any(s <= 0 for s in schedule):
            raise ConfigValidationError("sigma_schedule", "needs positive noise levels")
        if any(b >= a for a, b in zip(schedule, schedule[1:])):
            raise ConfigValidationError("sigma_schedule", "must be strictly decreasing")
        if self.ridge_lambda < 0:
            raise ConfigValidationError("ridge_lambda", "must be non-negative")
        try:
            self.sampling_spec(T=2, noise_var=self.noise_var or 0.0, seed=None)
        except ParameterError as e:
            raise ConfigValidationError(e.operand, str(e)) from e
        if self.initial is not None:
            targets = self.systems if self.task == "benchmark-suite" else (self.system,)
            for system in (s for s in targets if s is not None):
                if len(self.initial) != SYSTEM_DIMS[system]:
                    raise ConfigValidationError(
                        "initial", f"{system} needs {SYSTEM_DIMS[system]} coordinates"
                    )
        if self.task in ("fit", "evaluate") and not self.data_path:
            raise ConfigValidationError("data_path", "required for this task")
        if self.task in ("evaluate", "analyze") and not self.model_path:
            raise ConfigValidationError("model_path", "required for this task")
        if self.task == "simulate" and not (self.model_path or self.system):
            raise ConfigValidationError("system", "give a model_path or a benchmark system")
        if self.nuisance_dim > 0 and not self.nuisance_path:
            raise ConfigValidationError("nuisance_path", f"{self.nuisance_dim} regressors declared")
        if self.nuisance_path and self.head != "bold":
            raise ConfigValidationError("nuisance_path", "nuisance regressors need the bold head")
        for name in ("data_path", "inputs_path", "nuisance_path", "model_path", "kernel_path"):
            value = getattr(self, name)
            if value and not Path(value).exists():
                raise ConfigValidationError(name, f"file not found: {value}")
        return self

    def sampling_spec(self, T: int, noise_var: float, seed: Optional[int]) -> SamplingSpec:
        return SamplingSpec(
            T=T, dt=self.dt, subsample=self.subsample, noise_var=noise_var, seed=seed,
            initial=self.initial, burn_in=self.burn_in, noise_mode=self.noise_mode,
        )

    def anneal_config(self, M: int, seed: int, protocol: Optional[str] = None) -> AnnealConfig:
        kernel = None
        if self.head == "bold":
            kernel = (
                ArtifactHelper.load_kernel_csv(self.kernel_path, self.tr)
                if self.kernel_path else canonical_hrf(self.tr, self.hrf_duration)
            )
        return AnnealConfig(
            M=int(M),
            sigma_schedule=self.sigma_schedule,
            protocol=protocol or self.protocol,
            nonlinearity=self.nonlinearity,
            head=self.head,
            kernel=kernel,
            convolve_phi=self.convolve_phi,
            ridge_lambda=self.ridge_lambda,
            em_max_iter=self.em_max_iter,
            em_tol=self.em_tol,
            seed=seed,
        )


def run_seed(root: int, *keys: int) -> int:
    """Per-run seed derived from the experiment seed and integer run keys."""
    return int(np.random.SeedSequence([root, *keys]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Benchmark suite
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SuiteTask:
    index: int
    system: str
    M: int
    protocol: str
    seed: int
    run_dir: str
    config: ExperimentConfig
    true_lyapunov: float = float("nan")


def generate_observations(model: ModelBundle, T: int, seed: int) -> Trajectory:
    """Free-running latent path mapped to noise-free observations."""
    latent = generate_latent(model.latent, T, seed=seed)
    if latent.unstable:
        return Trajectory(values=np.full((T, model.N), np.nan), unstable=True)
    return observe(model, latent, seed=seed, noise=False)


def _system_lyapunov(system: str, config: ExperimentConfig, seed: int) -> float:
    """Per-time-unit exponent of the noise-free benchmark system."""
    ode = OdeSystem(system)
    reference = rk4_sample(ode, SamplingSpec(T=2000, dt=BENCHMARK_DT, subsample=1, seed=seed))
    starts = base_points(reference, config.lyapunov_pairs, seed)
    estimate = lyapunov_max(
        ode_stepper(ode.deriv, BENCHMARK_DT), starts, horizon=config.lyapunov_horizon * 10,
        dt=BENCHMARK_DT, seed=seed,
    )
    return estimate.lambda_max


def run_suite_task(task: SuiteTask) -> Dict[str, Any]:
    """One (system, seed, M, protocol) run; failures are reported, not raised."""
    config = task.config
    row: Dict[str, Any] = {
        "run": task.index, "system": task.system, "M": task.M,
        "protocol": task.protocol, "seed": task.seed, "status": "ok", "error": None,
    }
    run_dir = Path(task.run_dir)
    try:
        noise = config.noise_var if config.noise_var is not None else PROTOCOL_NOISE[task.system]
        spec = config.sampling_spec(config.sample_T, noise, task.seed)
        data, _ = standardize(rk4_sample(OdeSystem(task.system), spec))
        fit = anneal_fit(data.values, config=config.anneal_config(task.M, task.seed, task.protocol))
        generated = generate_observations(fit.model, config.gen_T, task.seed)

        row.update(final_q=fit.final_q, stable=fit.stable and not generated.unstable)
        if row["stable"]:
            report = kl_x(data, generated, BinSpec())
            row.update(kl_x=report.kl, kl_x_normalized=report.kl_normalized)
            row["spectrum_corr"] = power_spectrum_correlation(data, generated)
            latent = generate_latent(
                fit.model.latent, max(config.gen_T, 1000), deterministic=True
            )
            if latent.unstable:
                row["terminal_change"] = float("inf")
            else:
                row["terminal_change"] = float(np.max(np.abs(np.diff(latent.values[-2:], axis=0))))
                estimate = lyapunov_max(
                    plrnn_stepper(fit.model.latent),
                    base_points(latent.values[500:], config.lyapunov_pairs, task.seed),
                    horizon=config.lyapunov_horizon, dt=spec.sample_interval, seed=task.seed,
                )
                row.update(
                    lyapunov=estimate.lambda_max,
                    lyapunov_per_step=estimate.lambda_per_step,
                    lyapunov_error=abs(estimate.lambda_max - task.true_lyapunov),
                )
            if task.system == "vdp":
                attractors = detect_attractors(
                    fit.model.latent,
                    AttractorConfig(
                        n_init=config.attractor_n_init, T=config.attractor_T, seed=task.seed
                    ),
                )
                row["n_limit_cycles"] = attractors.count("limit_cycle")
        ArtifactHelper.save_fit(fit, run_dir / "fit.json")
        ArtifactHelper.save_q_trace(fit, run_dir / "q_trace.csv")
    except Exception as e:
        logger.error(f"Run {task.index} ({task.system}, M={task.M}, seed={task.seed}) failed: {e}")
        row.update(status="failed", error=f"{type(e).__name__}: {e}")
    ArtifactHelper.write_json(row, run_dir / "run.json")
    return row


def build_suite_tasks(config: ExperimentConfig, run_root: Path) -> List[SuiteTask]:
    root = config.resolved_seed
    tasks = []
    index = 0
    for s_index, system in enumerate(config.systems):
        for M in config.M_list:
            for protocol in config.protocols:
                for k in range(config.n_seeds):
                    # one sample per (system, k), shared across M and protocols
                    seed = run_seed(root, s_index, k)
                    run_dir = run_root / f"{system}_M{M}_{protocol}_{k:03d}"
                    tasks.append(
                        SuiteTask(index, system, int(M), protocol, seed, str(run_dir), config)
                    )
                    index += 1
    return tasks


SUITE_COLUMNS = [
    "run", "system", "M", "protocol", "seed", "status", "error", "final_q", "stable",
    "kl_x", "kl_x_normalized", "spectrum_corr", "lyapunov", "lyapunov_per_step",
    "lyapunov_error", "terminal_change", "n_limit_cycles",
]


def aggregate_suite(
    runs: pd.DataFrame, success_threshold: float = 0.4, outlier_q: float = -1000.0
) -> List[Dict[str, Any]]:
    """Success fractions per (system, M, protocol) after screening.

    Unstable estimates and outliers with final Q below `outlier_q` are
    removed before the fractions are computed; both counts are reported.
    """
    runs = runs.reindex(columns=SUITE_COLUMNS)
    groups = []
    for (system, M, protocol), group in runs.groupby(["system", "M", "protocol"], sort=True):
        ok = group[group["status"] == "ok"]
        stable = ok[ok["stable"].astype(bool)]
        outliers = stable["final_q"] < outlier_q
        screened = stable[~outliers]
        n = len(screened)
        kl = screened["kl_x_normalized"].astype(float)
        entry = {
            "system": system, "M": int(M), "protocol": protocol,
            "n_runs": int(len(group)),
            "n_failed": int((group["status"] != "ok").sum()),
            "n_unstable": int(len(ok) - len(stable)),
            "n_outliers": int(outliers.sum()),
            "n_screened": n,
            "success_fraction": float((kl <= success_threshold).sum() / n) if n else None,
            "median_kl_x_normalized": float(kl.median()) if n else None,
        }
        if screened["n_limit_cycles"].notna().any():
            entry["limit_cycle_fraction"] = float((screened["n_limit_cycles"] > 0).sum() / n)
        groups.append(entry)
    return groups


def compare_protocols(
    runs: pd.DataFrame, baseline: str = "random_init", candidate: str = "anneal"
) -> List[Dict[str, Any]]:
    """Paired one-sided sign test of normalized KL_x, per (system, M).

    Runs are paired on their data seed. Failed or unstable fits score the
    worst normalized value, 1.
    """
    runs = runs.reindex(columns=SUITE_COLUMNS)
    usable = (runs["status"] == "ok") & runs["stable"].fillna(False).astype(bool)
    score = runs["kl_x_normalized"].astype(float).where(usable).fillna(1.0)
    runs = runs.assign(score=score)
    results = []
    for (system, M), group in runs.groupby(["system", "M"], sort=True):
        table = group.pivot_table(index="seed", columns="protocol", values="score")
        if baseline not in table or candidate not in table:
            continue
        pairs = table[[baseline, candidate]].dropna()
        diff = pairs[baseline] - pairs[candidate]
        wins, losses = int((diff > 0).sum()), int((diff < 0).sum())
        p_value = (
            float(stats.binomtest(wins, wins + losses, alternative="greater").pvalue)
            if wins + losses else None
        )
        results.append({
            "system": system, "M": int(M), "n_pairs": int(len(pairs)),
            "n_wins": wins, "n_losses": losses, "p_value": p_value,
            f"median_{candidate}": float(pairs[candidate].median()) if len(pairs) else None,
            f"median_{baseline}": float(pairs[baseline].median()) if len(pairs) else None,
        })
    return results


def run_benchmark_suite(config: ExperimentConfig) -> Dict[str, Any]:
    """Run every (system, M, protocol, seed) combination and aggregate.

    Runs execute in a process pool when more than one worker is configured.
    Writes runs.csv and suite.json under <output_dir>/suite.

    Returns:
        Suite report dict (schema plrnn-ssm/suite)
    """
    config.validate()
    out = config.resolved_output_dir / "suite"
    root = config.resolved_seed
    true_lyapunov = {}
    if config.n_seeds > 0:
        for system in config.systems:
            true_lyapunov[system] = _system_lyapunov(system, config, root)
            logger.info(f"Reference Lyapunov exponent for {system}: {true_lyapunov[system]:.3f}")
    tasks = [
        dataclasses.replace(t, true_lyapunov=true_lyapunov.get(t.system, float("nan")))
        for t in build_suite_tasks(config, out / "runs")
    ]
    logger.info(f"Benchmark suite: {len(tasks)} runs, {config.resolved_workers} workers")

    rows = []
    progress = tqdm(total=len(tasks), desc="Runs", disable=not Config.progress_enabled())
    if config.resolved_workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=config.resolved_workers) as pool:
            futures = [pool.submit(run_suite_task, t) for t in tasks]
            for future in as_completed(futures):
                rows.append(future.result())
                progress.update()
    else:
        for task in tasks:
            rows.append(run_suite_task(task))
            progress.update()
    progress.close()

    runs = pd.DataFrame(rows, columns=SUITE_COLUMNS).sort_values("run", kind="stable")
    ArtifactHelper.save_table(runs, out / "runs.csv")
    report = {
        "schema": SUITE_SCHEMA,
        "version": 1,
        "seed": root,
        "success_threshold": config.success_threshold,
        "reference_lyapunov": true_lyapunov,
        "groups": aggregate_suite(runs, config.success_threshold, config.outlier_q),
    }
    if {"anneal", "random_init"} <= set(config.protocols):
        report["protocol_comparison"] = compare_protocols(runs)
    ArtifactHelper.write_json(report, out / "suite.json")
    return report


def reaggregate(
    run_dir: Path, success_threshold: float = 0.4, outlier_q: float = -1000.0
) -> List[Dict[str, Any]]:
    """Rebuild the aggregate from per-run run.json files."""
    rows = [ArtifactHelper.read_json(p) for p in sorted(Path(run_dir).glob("*/run.json"))]
    return aggregate_suite(pd.DataFrame(rows, columns=SUITE_COLUMNS), success_threshold, outlier_q)


# ---------------------------------------------------------------------------
# Empirical data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    S: Optional[np.ndarray]
    R: Optional[np.ndarray]
    columns: List[str] = field(default_factory=list)


def load_dataset(config: ExperimentConfig) -> Dataset:
    """Read channels, inputs and nuisance regressors, then smooth and standardize X.

    Raises:
        DataValidationError: On malformed files or mismatched row counts
    """
    frame = ArtifactHelper.read_numeric_csv(config.data_path)
    X = frame.to_numpy()
    T = X.shape[0]
    S = R = None
    if config.inputs_path:
        S = ArtifactHelper.read_numeric_csv(config.inputs_path).to_numpy()
        if S.shape[0] != T:
            raise DataValidationError(
                config.inputs_path, f"has {S.shape[0]} rows, channels have {T}"
            )
    if config.nuisance_path:
        R = ArtifactHelper.read_numeric_csv(
            config.nuisance_path, expected_columns=config.nuisance_dim or None
        ).to_numpy()
        if R.shape[0] != T:
            raise DataValidationError(
                config.nuisance_path, f"has {R.shape[0]} rows, channels have {T}"
            )
    if config.smoothing:
        X = gaussian_filter1d(X, sigma=config.smoothing_sigma, axis=0, mode="nearest")
    if config.standardize:
        data, _ = standardize(Trajectory(values=X), columns=list(frame.columns))
        X = np.array(data.values)
    logger.info(f"Loaded {config.data_path}: T={T}, N={X.shape[1]}")
    return Dataset(X=X, S=S, R=R, columns=list(frame.columns))


def fit_dataset(config: ExperimentConfig) -> Dict[str, Any]:
    """Fit every M in the config to one dataset and write all artifacts.

    Returns:
        Mapping from M to the paths written and summary metrics
    """
    config.validate()
    data = load_dataset(config)
    S = data.S if config.use_inputs else None
    tag = "inputs" if S is not None else "noinputs"
    out = config.resolved_output_dir / "fits"
    seed = config.resolved_seed
    summary: Dict[str, Any] = {}
    for M in config.M_list:
        fit = anneal_fit(data.X, S, data.R, config.anneal_config(M, seed))
        stem = out / f"M{M}_{tag}"
        model = fit.model.replace(
            metadata={
                **fit.model.metadata, "data_path": config.data_path,
                "inputs_path": config.inputs_path if S is not None else None,
                "nuisance_path": config.nuisance_path, "seed": seed, "M": int(M),
            }
        )
        fit = dataclasses.replace(fit, model=model)
        report = _evaluate(config, fit.model, data.X, S, data.R, fit.posterior, seed)
        paths = {
            "model": str(ArtifactHelper.save_model(fit.model, stem.with_suffix(".model.json"))),
            "fit": str(ArtifactHelper.save_fit(fit, stem.with_suffix(".fit.json"))),
            "q_trace": str(ArtifactHelper.save_q_trace(fit, stem.with_suffix(".qtrace.csv"))),
            "report": str(ArtifactHelper.write_json(report, stem.with_suffix(".report.json"))),
        }
        summary[str(M)] = {"paths": paths, "final_q": fit.final_q, "stable": fit.stable,
                           "kl_z_normalized": report["kl_z"]["kl_normalized"]}
    return summary


def _evaluate(config, model, X, S, R, posterior, seed) -> Dict[str, Any]:
    report: Dict[str, Any] = {"model_head": model.head, "M": model.M}
    try:
        report["kl_z"] = kl_z_report(
            posterior, model.latent, inputs=S, n_samples=config.kl_z_samples, seed=seed
        ).to_dict()
    except PlrnnSsmError as e:
        logger.warning(f"KL_z could not be computed: {e}")
        report["kl_z"] = {"kl_normalized": None, "error": str(e)}
    max_n = min(config.ahead_steps, X.shape[0] - 1)
    ahead = n_step_ahead_mse(model, posterior, X, S, R, max_n=max_n)
    report["ahead_mse"] = ahead.to_frame().to_dict(orient="list")
    if config.analyze:
        dynamics = analyze_dynamics(
            model.latent,
            AttractorConfig(n_init=config.attractor_n_init, T=config.attractor_T, seed=seed),
        )
        report["dynamics"] = dynamics.to_dict()
    return report


# ---------------------------------------------------------------------------
# Single-model tasks
# ---------------------------------------------------------------------------


def simulate_task(config: ExperimentConfig) -> Dict[str, str]:
    """Sample a benchmark system or a saved model and write the trajectories."""
    config.validate()
    out = config.resolved_output_dir / "simulate"
    seed = config.resolved_seed
    if config.model_path:
        model = ArtifactHelper.load_model(config.model_path)
        latent, observed = simulate(model, config.simulate_T, seed=seed)
        return {
            "latent": str(ArtifactHelper.save_trajectory_json(latent, out / "latent.json")),
            "observed": str(ArtifactHelper.save_trajectory_json(observed, out / "observed.json")),
        }
    noise = config.noise_var if config.noise_var is not None else 0.0
    spec = config.sampling_spec(config.simulate_T, noise, seed)
    traj = rk4_sample(OdeSystem(config.system), spec)
    path = ArtifactHelper.save_trajectory_csv(traj, out / f"{config.system}.csv")
    return {"trajectory": str(path)}


def evaluate_task(config: ExperimentConfig) -> Dict[str, Any]:
    """E-step on the data under a saved model, then KL_z, ahead MSE and KL_x."""
    config.validate()
    model = ArtifactHelper.load_model(config.model_path)
    data = load_dataset(config)
    S = data.S if config.use_inputs and model.latent.K > 0 else None
    seed = config.resolved_seed
    posterior = estep(model, data.X, S, data.R, config=EstepConfig(), seed=seed)
    report = _evaluate(config.replace(analyze=False), model, data.X, S, data.R, posterior, seed)
    generated = generate_observations(model, config.gen_T, seed)
    if not generated.unstable:
        report["kl_x"] = kl_x(data.X, generated).to_dict()
    report["generated_unstable"] = generated.unstable
    out = config.resolved_output_dir / "evaluate"
    path = ArtifactHelper.write_json(report, out / "report.json")
    report["path"] = str(path)
    return report


def analyze_task(config: ExperimentConfig) -> Dict[str, Any]:
    """Fixed points and attractors of a saved model."""
    config.validate()
    model = ArtifactHelper.load_model(config.model_path)
    dynamics = analyze_dynamics(
        model.latent,
        AttractorConfig(
            n_init=config.attractor_n_init, T=config.attractor_T, seed=config.resolved_seed
        ),
    ).to_dict()
    out = config.resolved_output_dir / "analyze"
    path = ArtifactHelper.write_json(dynamics, out / "dynamics.json")
    dynamics["path"] = str(path)
    return dynamics


def run_task(config: ExperimentConfig) -> Any:
    handlers = {
        "simulate": simulate_task,
        "fit": fit_dataset,
        "evaluate": evaluate_task,
        "analyze": analyze_task,
        "benchmark-suite": run_benchmark_suite,
    }
    return handlers[config.task](config)

