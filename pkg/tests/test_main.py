"""Tests for the command-line entry point and its exit codes."""

import json

import numpy as np
import pytest

from artifacts import ArtifactHelper
from main import EXIT_ERROR, EXIT_INVALID, EXIT_OK, build_parser, experiment_config, main
from plrnn import ModelBundle, ObsParamsLinear


@pytest.fixture
def cycle_model_path(tmp_path, limit_cycle_params):
    model = ModelBundle(
        latent=limit_cycle_params, observation=ObsParamsLinear(B=np.eye(2), Gamma=np.eye(2))
    )
    return str(ArtifactHelper.save_model(model, tmp_path / "cycle.model.json"))


def test_cli_flags_override_json_config(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"M_list": [3], "em_max_iter": 50, "seed": 1}))
    args = build_parser().parse_args(
        ["--seed", "9", "fit", "--config", str(path), "--M", "2", "4", "--no-inputs"]
    )
    config = experiment_config(args)
    assert config.task == "fit"
    assert config.M_list == (2, 4)
    assert config.em_max_iter == 50
    assert config.seed == 9
    assert config.use_inputs is False
    assert config.smoothing is True


def test_simulate_succeeds(capsys, tmp_path):
    code = main(["--output-dir", str(tmp_path), "simulate", "--system", "vdp", "--T", "30"])
    assert code == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert summary["trajectory"].endswith("vdp.csv")


def test_analyze_succeeds(cycle_model_path, capsys, tmp_path):
    config = tmp_path / "a.json"
    config.write_text(json.dumps({"attractor_n_init": 5, "attractor_T": 200}))
    code = main(["analyze", "--config", str(config), "--model", cycle_model_path])
    assert code == EXIT_OK
    assert "path" in json.loads(capsys.readouterr().out)


def test_missing_required_field_is_invalid():
    assert main(["fit"]) == EXIT_INVALID


def test_unknown_config_key_is_invalid(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"learning_rate": 0.1}))
    assert main(["fit", "--config", str(path)]) == EXIT_INVALID


def test_malformed_data_is_invalid(tmp_path):
    data = tmp_path / "x.csv"
    data.write_text("a,b\n1,2\n3,x\n")
    assert main(["fit", "--data", str(data), "--M", "2"]) == EXIT_INVALID


def test_bad_log_level_is_invalid():
    assert main(["--log-level", "LOUD", "analyze"]) == EXIT_INVALID


def test_nuisance_without_file_is_invalid():
    assert main(["benchmark-suite", "--n-seeds", "0"]) == EXIT_OK
    args = ["fit", "--head", "bold", "--nuisance-dim", "2"]
    assert main(args) == EXIT_INVALID


def test_unexpected_failure_exits_one(monkeypatch, cycle_model_path):
    def boom(config):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr("main.run_task", boom)
    assert main(["analyze", "--model", cycle_model_path]) == EXIT_ERROR


def test_unknown_subcommand_exits_through_argparse():
    with pytest.raises(SystemExit) as info:
        main(["train"])
    assert info.value.code == 2


def test_sampling_flags_reach_the_config():
    args = build_parser().parse_args(
        [
            "simulate", "--system", "vdp", "--dt", "0.02", "--subsample", "5",
            "--burn-in", "0", "--initial", "1.0", "-0.5", "--noise-mode", "per_step",
            "--noise-var", "0.1",
        ]
    )
    spec = experiment_config(args).sampling_spec(10, 0.1, seed=1)
    assert spec.dt == pytest.approx(0.02)
    assert spec.subsample == 5
    assert spec.burn_in == 0
    assert spec.initial == (1.0, -0.5)
    assert spec.noise_mode == "per_step"


def test_training_flags_reach_the_config():
    for task in ("fit", "benchmark-suite"):
        args = build_parser().parse_args(
            [task, "--sigma-schedule", "0.5", "0.05", "--ridge-lambda", "0.01"]
        )
        config = experiment_config(args)
        assert config.sigma_schedule == (0.5, 0.05)
        assert config.ridge_lambda == pytest.approx(0.01)
        anneal = config.anneal_config(M=2, seed=0)
        assert tuple(anneal.sigma_schedule) == (0.5, 0.05)


def test_simulate_from_explicit_initial_state(tmp_path):
    code = main(
        [
            "--output-dir", str(tmp_path), "simulate", "--system", "vdp", "--T", "20",
            "--burn-in", "0", "--initial", "1.0", "-0.5",
        ]
    )
    assert code == EXIT_OK
    traj = ArtifactHelper.load_trajectory_csv(tmp_path / "simulate" / "vdp.csv")
    np.testing.assert_allclose(traj.values[0], [1.0, -0.5])


def test_bad_sampling_flags_are_invalid():
    assert main(["simulate", "--system", "vdp", "--dt", "-1"]) == EXIT_INVALID
    assert main(["simulate", "--system", "lorenz", "--initial", "1", "2"]) == EXIT_INVALID
