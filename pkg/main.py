"""
Command-line interface for PLRNN state-space model fitting and evaluation.

usage: main.py [--log-level LEVEL] [--output-dir DIR] [--workers N] [--seed SEED]
               {simulate,fit,evaluate,analyze,benchmark-suite,healthcheck} ...

Exit status is 0 on success, 2 when configuration or input data fail
validation, and 1 on any other error.
"""

import argparse
import json
import logging
import sys
from typing import Any, Dict, List, Optional

from config import Config
from errors import ConfigValidationError, DataValidationError
from experiments import ExperimentConfig, run_task

logger = logging.getLogger("plrnn_ssm")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INVALID = 2

# argparse dest -> ExperimentConfig field
OVERRIDES = {
    "data": "data_path",
    "inputs": "inputs_path",
    "nuisance": "nuisance_path",
    "nuisance_dim": "nuisance_dim",
    "model": "model_path",
    "kernel": "kernel_path",
    "M": "M_list",
    "head": "head",
    "tr": "tr",
    "hrf_duration": "hrf_duration",
    "protocol": "protocol",
    "protocols": "protocols",
    "nonlinearity": "nonlinearity",
    "systems": "systems",
    "system": "system",
    "n_seeds": "n_seeds",
    "T": "simulate_T",
    "sample_T": "sample_T",
    "gen_T": "gen_T",
    "noise_var": "noise_var",
    "em_max_iter": "em_max_iter",
    "sigma_schedule": "sigma_schedule",
    "ridge_lambda": "ridge_lambda",
    "dt": "dt",
    "subsample": "subsample",
    "burn_in": "burn_in",
    "initial": "initial",
    "noise_mode": "noise_mode",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plrnn-ssm",
        description="Fit and evaluate piecewise-linear RNN state-space models.",
    )
    parser.add_argument("--log-level", help="DEBUG, INFO, WARNING, ERROR or CRITICAL")
    parser.add_argument("--output-dir", help="Directory for all artifacts")
    parser.add_argument("--workers", type=int, help="Worker processes for the benchmark suite")
    parser.add_argument("--seed", type=int, help="Experiment seed")
    sub = parser.add_subparsers(dest="task", required=True)

    def task_parser(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON experiment configuration")
        return p

    p = task_parser("simulate", "Sample a benchmark system or a saved model")
    p.add_argument("--system", choices=["lorenz", "vdp"])
    p.add_argument("--model")
    p.add_argument("--T", type=int)
    _sampling_arguments(p)

    p = task_parser("fit", "Fit models to a channel CSV")
    _data_arguments(p)
    p.add_argument("--M", nargs="+", type=int, help="Latent dimensions to fit")
    p.add_argument("--protocol", choices=["anneal", "random_init"])
    p.add_argument("--nonlinearity", choices=["relu", "identity"])
    p.add_argument("--em-max-iter", dest="em_max_iter", type=int)
    _training_arguments(p)

    p = task_parser("evaluate", "Score a saved model on data")
    _data_arguments(p)
    p.add_argument("--model")
    p.add_argument("--gen-T", dest="gen_T", type=int)

    p = task_parser("analyze", "Fixed points and attractors of a saved model")
    p.add_argument("--model")

    p = task_parser("benchmark-suite", "Fit benchmark systems over many seeds")
    p.add_argument("--systems", nargs="+", choices=["lorenz", "vdp"])
    p.add_argument("--M", nargs="+", type=int)
    p.add_argument("--protocols", nargs="+", choices=["anneal", "random_init"])
    p.add_argument("--n-seeds", dest="n_seeds", type=int)
    p.add_argument("--sample-T", dest="sample_T", type=int)
    p.add_argument("--gen-T", dest="gen_T", type=int)
    p.add_argument("--em-max-iter", dest="em_max_iter", type=int)
    _training_arguments(p)
    _sampling_arguments(p)

    sub.add_parser("healthcheck", help="Check the installation")
    return parser


def _sampling_arguments(p: argparse.ArgumentParser) -> None:
    p.add_argument("--noise-var", dest="noise_var", type=float, help="Process-noise variance")
    p.add_argument("--dt", type=float, help="RK4 integration step")
    p.add_argument("--subsample", type=int, help="RK4 steps per kept sample")
    p.add_argument("--burn-in", dest="burn_in", type=int, help="Leading samples discarded")
    p.add_argument("--initial", nargs="+", type=float, help="Initial state (default: random)")
    p.add_argument("--noise-mode", dest="noise_mode", choices=["per_sample", "per_step"])


def _training_arguments(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--sigma-schedule", dest="sigma_schedule", nargs="+", type=float,
        help="Decreasing process-noise levels of the annealing steps",
    )
    p.add_argument("--ridge-lambda", dest="ridge_lambda", type=float, help="M-step ridge")


def _data_arguments(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="Channel CSV (T rows x N columns)")
    p.add_argument("--inputs", help="Input CSV (T rows x K columns)")
    p.add_argument("--no-inputs", dest="use_inputs", action="store_false", default=None)
    p.add_argument("--nuisance", help="Nuisance regressor CSV (T rows x P columns)")
    p.add_argument("--nuisance-dim", dest="nuisance_dim", type=int)
    p.add_argument("--head", choices=["linear", "bold"])
    p.add_argument("--tr", type=float, help="Sampling interval of BOLD data in seconds")
    p.add_argument("--kernel", help="Lag-ordered HRF kernel CSV")
    p.add_argument(
        "--hrf-duration", dest="hrf_duration", type=float,
        help="Canonical HRF length in seconds when no kernel file is given",
    )
    p.add_argument("--no-smoothing", dest="smoothing", action="store_false", default=None)


def experiment_config(args: argparse.Namespace) -> ExperimentConfig:
    """Merge JSON config, CLI overrides and global flags; CLI wins."""
    overrides: Dict[str, Any] = {"task": args.task}
    for dest, name in OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides[name] = value
    for name in ("use_inputs", "smoothing"):
        if getattr(args, name, None) is not None:
            overrides[name] = getattr(args, name)
    overrides.update(seed=args.seed, output_dir=args.output_dir, workers=args.workers)
    if getattr(args, "config", None):
        return ExperimentConfig.from_json(args.config, **overrides)
    return ExperimentConfig.from_dict({}, **overrides)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        Config.configure_logging(args.log_level)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID

    if args.task == "healthcheck":
        from healthcheck import main as healthcheck_main

        return healthcheck_main()

    try:
        config = experiment_config(args).validate()
        result = run_task(config)
    except (ConfigValidationError, DataValidationError) as e:
        logger.error(str(e))
        return EXIT_INVALID
    except Exception as e:
        logger.exception(f"{args.task} failed: {e}")
        return EXIT_ERROR

    print(json.dumps(_summary(result), indent=2, default=str))
    return EXIT_OK


def _summary(result: Any) -> Any:
    if isinstance(result, dict) and "groups" in result:
        return {"groups": result["groups"]}
    if isinstance(result, dict):
        return {k: v for k, v in result.items() if k not in ("fixed_points", "attractors")}
    return result


if __name__ == "__main__":
    sys.exit(main())
