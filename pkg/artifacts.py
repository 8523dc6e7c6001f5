"""File formats for models, trajectories, fits, reports and kernels.

All readers validate what they load and raise DataValidationError with the
offending row and column where that makes sense. Matrices are stored as
{"shape": [...], "values": [...row-major...]}.
"""

import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from banded import BandedCovariance
from errors import DataValidationError, PlrnnSsmError
from hrf import HrfKernel, ObsParamsBold
from inference import StatePosterior
from plrnn import ModelBundle, ObsParamsLinear, PlrnnParams, Trajectory
from training import FitResult, StepRecord

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

MODEL_SCHEMA = "plrnn-ssm/model"
TRAJECTORY_SCHEMA = "plrnn-ssm/trajectory"
FIT_SCHEMA = "plrnn-ssm/fit"
SCHEMA_VERSION = 1


def _to_jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    return value


def _optional_float(value: Any) -> float:
    return float("nan") if value is None else float(value)


class ArtifactHelper:
    """Readers and writers for every artifact the pipelines produce."""

    # ------------------------------------------------------------------
    # Generic JSON / tables
    # ------------------------------------------------------------------

    @staticmethod
    def write_json(data: Dict[str, Any], path: PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(_to_jsonable(data), f, indent=2)
        logger.info(f"Wrote {path}")
        return path

    @staticmethod
    def read_json(path: PathLike) -> Dict[str, Any]:
        path = Path(path)
        try:
            with open(path) as f:
                return json.load(f)
        except FileNotFoundError:
            raise DataValidationError(str(path), "file not found") from None
        except json.JSONDecodeError as e:
            raise DataValidationError(str(path), f"invalid JSON: {e.msg}", row=e.lineno) from e

    @staticmethod
    def save_table(frame: pd.DataFrame, path: PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False)
        logger.info(f"Wrote {path}")
        return path

    @staticmethod
    def load_table(path: PathLike) -> pd.DataFrame:
        try:
            return pd.read_csv(path)
        except FileNotFoundError:
            raise DataValidationError(str(path), "file not found") from None

    @staticmethod
    def read_numeric_csv(
        path: PathLike, expected_columns: Optional[int] = None, header: Optional[bool] = None
    ) -> pd.DataFrame:
        """Load a CSV whose cells must all be finite numbers.

        Args:
            path: CSV file
            expected_columns: Required column count, if known
            header: Force header handling; detected from the first row if None

        Raises:
            DataValidationError: Naming the first bad row (1-based, data rows)
                and column
        """
        path = Path(path)
        if not path.exists():
            raise DataValidationError(str(path), "file not found")
        if header is None:
            first = pd.read_csv(path, header=None, nrows=1, dtype=str)
            header = bool(first.size) and pd.to_numeric(first.iloc[0], errors="coerce").isna().any()
        frame = pd.read_csv(path, header=0 if header else None, dtype=str, skipinitialspace=True)
        if frame.empty:
            raise DataValidationError(str(path), "no data rows")
        if expected_columns is not None and frame.shape[1] != expected_columns:
            raise DataValidationError(
                str(path), f"expected {expected_columns} columns, found {frame.shape[1]}"
            )
        numeric = frame.apply(pd.to_numeric, errors="coerce")
        bad = numeric.isna() | ~np.isfinite(numeric.fillna(0.0).to_numpy())
        if bad.to_numpy().any():
            row, col = np.argwhere(bad.to_numpy())[0]
            raise DataValidationError(
                str(path),
                f"non-numeric or non-finite value {frame.iat[row, col]!r}",
                row=int(row) + 1,
                column=str(frame.columns[col]),
            )
        if not header:
            numeric.columns = [f"c{i + 1}" for i in range(numeric.shape[1])]
        return numeric.astype(float)

    # ------------------------------------------------------------------
    # Models
    # ------------------------------------------------------------------

    @staticmethod
    def matrix_to_dict(value: np.ndarray) -> Dict[str, Any]:
        value = np.asarray(value, dtype=float)
        return {"shape": list(value.shape), "values": value.reshape(-1).tolist()}

    @staticmethod
    def matrix_from_dict(data: Dict[str, Any], name: str, source: str = "model") -> np.ndarray:
        try:
            shape = tuple(int(s) for s in data["shape"])
            values = np.asarray(data["values"], dtype=float)
        except (KeyError, TypeError, ValueError) as e:
            raise DataValidationError(source, f"matrix '{name}' is malformed: {e}") from e
        if values.size != int(np.prod(shape)):
            raise DataValidationError(
                source, f"matrix '{name}' has {values.size} values for shape {list(shape)}"
            )
        return values.reshape(shape)

    @staticmethod
    def model_to_dict(model: ModelBundle) -> Dict[str, Any]:
        m = ArtifactHelper.matrix_to_dict
        lat = model.latent
        latent = {
            "mu0": m(lat.mu0), "A": m(lat.A), "W": m(lat.W), "C": m(lat.C),
            "h": m(lat.h), "Sigma": m(lat.Sigma), "nonlinearity": lat.nonlinearity,
        }
        obs = model.observation
        observation = {"kind": obs.kind, "B": m(obs.B), "Gamma": m(obs.Gamma)}
        if obs.kind == "bold":
            observation.update(
                J=m(obs.J),
                kernel={"response": obs.kernel.response.tolist(), "tr": obs.kernel.tr},
                convolve_phi=obs.convolve_phi,
            )
        return {
            "schema": MODEL_SCHEMA,
            "version": SCHEMA_VERSION,
            "created_at": datetime.now().isoformat(),
            "latent": latent,
            "observation": observation,
            "metadata": _to_jsonable(model.metadata),
        }

    @staticmethod
    def model_from_dict(data: Dict[str, Any], source: str = "model") -> ModelBundle:
        if data.get("schema") != MODEL_SCHEMA:
            raise DataValidationError(source, f"expected schema '{MODEL_SCHEMA}'", column="schema")
        if data.get("version") != SCHEMA_VERSION:
            raise DataValidationError(
                source, f"unsupported version {data.get('version')!r}", column="version"
            )
        get = ArtifactHelper.matrix_from_dict
        try:
            lat, obs = data["latent"], data["observation"]
            latent = PlrnnParams(
                mu0=get(lat["mu0"], "mu0", source), A=get(lat["A"], "A", source),
                W=get(lat["W"], "W", source), C=get(lat["C"], "C", source),
                h=get(lat["h"], "h", source), Sigma=get(lat["Sigma"], "Sigma", source),
                nonlinearity=lat.get("nonlinearity", "relu"),
            )
            if obs["kind"] == "linear":
                observation = ObsParamsLinear(
                    B=get(obs["B"], "B", source), Gamma=get(obs["Gamma"], "Gamma", source)
                )
            elif obs["kind"] == "bold":
                kernel = HrfKernel.from_response(obs["kernel"]["response"], obs["kernel"]["tr"])
                observation = ObsParamsBold(
                    B=get(obs["B"], "B", source), J=get(obs["J"], "J", source),
                    Gamma=get(obs["Gamma"], "Gamma", source), kernel=kernel,
                    convolve_phi=bool(obs.get("convolve_phi", False)),
                )
            else:
                raise DataValidationError(source, f"unknown head {obs['kind']!r}", column="kind")
        except KeyError as e:
            missing = e.args[0]
            raise DataValidationError(source, f"missing field {missing!r}", column=missing) from e
        except DataValidationError:
            raise
        except PlrnnSsmError as e:
            raise DataValidationError(source, str(e)) from e
        return ModelBundle(
            latent=latent, observation=observation, metadata=data.get("metadata", {})
        )

    @staticmethod
    def save_model(model: ModelBundle, path: PathLike) -> Path:
        return ArtifactHelper.write_json(ArtifactHelper.model_to_dict(model), path)

    @staticmethod
    def load_model(path: PathLike) -> ModelBundle:
        return ArtifactHelper.model_from_dict(ArtifactHelper.read_json(path), source=str(path))

    # ------------------------------------------------------------------
    # Trajectories
    # ------------------------------------------------------------------

    @staticmethod
    def trajectory_frame(traj: Trajectory, prefix: str = "x") -> pd.DataFrame:
        """Columns t, <prefix>1.., s1.., r1.."""
        frame = pd.DataFrame({"t": np.arange(traj.T) * traj.dt})
        for name, block in ((prefix, traj.values), ("s", traj.inputs), ("r", traj.nuisance)):
            if block is None:
                continue
            for i in range(block.shape[1]):
                frame[f"{name}{i + 1}"] = block[:, i]
        return frame

    @staticmethod
    def save_trajectory_csv(traj: Trajectory, path: PathLike, prefix: str = "x") -> Path:
        return ArtifactHelper.save_table(ArtifactHelper.trajectory_frame(traj, prefix), path)

    @staticmethod
    def load_trajectory_csv(path: PathLike) -> Trajectory:
        frame = ArtifactHelper.read_numeric_csv(path, header=True)
        if "t" not in frame.columns:
            raise DataValidationError(str(path), "missing time column", column="t")

        def block(prefix: str) -> Optional[np.ndarray]:
            cols = [c for c in frame.columns if c[:1] == prefix and c[1:].isdigit()]
            cols.sort(key=lambda c: int(c[1:]))
            return frame[cols].to_numpy() if cols else None

        values = block("z")
        if values is None:
            values = block("x")
        if values is None:
            raise DataValidationError(str(path), "no z1.. or x1.. value columns")
        t = frame["t"].to_numpy()
        dt = float(t[1] - t[0]) if t.size > 1 and t[1] > t[0] else 1.0
        return Trajectory(values=values, inputs=block("s"), nuisance=block("r"), dt=dt)

    @staticmethod
    def trajectory_to_dict(traj: Trajectory) -> Dict[str, Any]:
        m = ArtifactHelper.matrix_to_dict
        return {
            "schema": TRAJECTORY_SCHEMA,
            "version": SCHEMA_VERSION,
            "values": m(traj.values),
            "inputs": m(traj.inputs) if traj.inputs is not None else None,
            "nuisance": m(traj.nuisance) if traj.nuisance is not None else None,
            "dt": traj.dt,
            "unstable": traj.unstable,
            "metadata": _to_jsonable(traj.metadata),
        }

    @staticmethod
    def trajectory_from_dict(data: Dict[str, Any], source: str = "trajectory") -> Trajectory:
        if data.get("schema") != TRAJECTORY_SCHEMA:
            raise DataValidationError(
                source, f"expected schema '{TRAJECTORY_SCHEMA}'", column="schema"
            )
        get = ArtifactHelper.matrix_from_dict
        return Trajectory(
            values=get(data["values"], "values", source),
            inputs=get(data["inputs"], "inputs", source) if data.get("inputs") else None,
            nuisance=get(data["nuisance"], "nuisance", source) if data.get("nuisance") else None,
            dt=float(data.get("dt", 1.0)),
            unstable=bool(data.get("unstable", False)),
            metadata=data.get("metadata", {}),
        )

    @staticmethod
    def save_trajectory_json(traj: Trajectory, path: PathLike) -> Path:
        return ArtifactHelper.write_json(ArtifactHelper.trajectory_to_dict(traj), path)

    @staticmethod
    def load_trajectory_json(path: PathLike) -> Trajectory:
        return ArtifactHelper.trajectory_from_dict(ArtifactHelper.read_json(path), str(path))

    # ------------------------------------------------------------------
    # Fits
    # ------------------------------------------------------------------

    @staticmethod
    def posterior_to_dict(posterior: StatePosterior) -> Dict[str, Any]:
        m = ArtifactHelper.matrix_to_dict
        return {
            "z_map": m(posterior.z_map),
            "d_omega": posterior.d_omega.astype(int).tolist(),
            "Q_value": posterior.Q_value,
            "converged": posterior.converged,
            "n_iter": posterior.n_iter,
            "logdet_precision": posterior.logdet_precision,
            "V_bands": m(posterior.V.bands) if posterior.V is not None else None,
        }

    @staticmethod
    def posterior_from_dict(data: Dict[str, Any], source: str = "fit") -> StatePosterior:
        get = ArtifactHelper.matrix_from_dict
        z_map = get(data["z_map"], "z_map", source)
        T, M = z_map.shape
        V = None
        if data.get("V_bands"):
            V = BandedCovariance(bands=get(data["V_bands"], "V_bands", source), M=M, T=T)
        return StatePosterior(
            z_map=z_map,
            d_omega=np.asarray(data["d_omega"], dtype=bool),
            Q_value=float(data["Q_value"]),
            converged=bool(data["converged"]),
            n_iter=int(data["n_iter"]),
            V=V,
            logdet_precision=_optional_float(data.get("logdet_precision")),
        )

    @staticmethod
    def fit_to_dict(fit: FitResult) -> Dict[str, Any]:
        return {
            "schema": FIT_SCHEMA,
            "version": SCHEMA_VERSION,
            "created_at": datetime.now().isoformat(),
            "model": ArtifactHelper.model_to_dict(fit.model),
            "posterior": ArtifactHelper.posterior_to_dict(fit.posterior),
            "steps": [s.to_dict() for s in fit.steps],
            "stable": fit.stable,
            "wall_clock": fit.wall_clock,
            "protocol": fit.protocol,
            "log_evidence": fit.log_evidence,
        }

    @staticmethod
    def fit_from_dict(data: Dict[str, Any], source: str = "fit") -> FitResult:
        if data.get("schema") != FIT_SCHEMA:
            raise DataValidationError(source, f"expected schema '{FIT_SCHEMA}'", column="schema")
        try:
            steps = [StepRecord(**s) for s in data["steps"]]
            return FitResult(
                model=ArtifactHelper.model_from_dict(data["model"], source),
                posterior=ArtifactHelper.posterior_from_dict(data["posterior"], source),
                steps=steps,
                stable=bool(data["stable"]),
                wall_clock=float(data["wall_clock"]),
                protocol=data["protocol"],
                log_evidence=_optional_float(data.get("log_evidence")),
            )
        except (KeyError, TypeError) as e:
            raise DataValidationError(source, f"malformed fit record: {e}") from e

    @staticmethod
    def save_fit(fit: FitResult, path: PathLike) -> Path:
        return ArtifactHelper.write_json(ArtifactHelper.fit_to_dict(fit), path)

    @staticmethod
    def load_fit(path: PathLike) -> FitResult:
        return ArtifactHelper.fit_from_dict(ArtifactHelper.read_json(path), str(path))

    @staticmethod
    def q_trace_frame(steps: Sequence[StepRecord]) -> pd.DataFrame:
        rows: List[Dict[str, Any]] = []
        for step in steps:
            elbo = list(step.elbo_trace) + [np.nan] * (len(step.q_trace) - len(step.elbo_trace))
            for i, (q, e) in enumerate(zip(step.q_trace, elbo), start=1):
                rows.append({"step": step.name, "iteration": i, "q": q, "elbo": e})
        return pd.DataFrame(rows, columns=["step", "iteration", "q", "elbo"])

    @staticmethod
    def save_q_trace(fit: FitResult, path: PathLike) -> Path:
        return ArtifactHelper.save_table(ArtifactHelper.q_trace_frame(fit.steps), path)

    # ------------------------------------------------------------------
    # Kernels
    # ------------------------------------------------------------------

    @staticmethod
    def save_kernel_csv(kernel: HrfKernel, path: PathLike) -> Path:
        return ArtifactHelper.save_table(pd.DataFrame({"response": kernel.response}), path)

    @staticmethod
    def load_kernel_csv(path: PathLike, tr: float) -> HrfKernel:
        """One-column CSV of lag-ordered weights (first row is lag 0)."""
        frame = ArtifactHelper.read_numeric_csv(path)
        if frame.shape[1] != 1:
            raise DataValidationError(str(path), f"expected one column, found {frame.shape[1]}")
        try:
            return HrfKernel.from_response(frame.iloc[:, 0].to_numpy(), tr)
        except PlrnnSsmError as e:
            raise DataValidationError(str(path), str(e)) from e
