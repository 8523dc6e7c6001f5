"""Acceptance-scale reconstruction checks on the benchmark systems and synthetic BOLD data.

All tests here are slow (minutes to hours); run them with `pytest -m slow`.
"""

import numpy as np
import pytest

from artifacts import ArtifactHelper
from benchmarks import standardize
from experiments import ExperimentConfig, run_benchmark_suite
from hrf import ObsParamsBold, canonical_hrf
from metrics import kl_z_report, n_step_ahead_mse
from plrnn import ModelBundle, PlrnnParams, Trajectory, simulate
from training import AnnealConfig, anneal_fit

pytestmark = pytest.mark.slow


def suite_config(tmp_path, **fields):
    base = dict(
        task="benchmark-suite", sample_T=1000, seed=11, workers=4, output_dir=str(tmp_path)
    )
    base.update(fields)
    return ExperimentConfig(**base)


def screened_fraction(group, key):
    assert group["n_screened"] > 0
    return group[key]


def test_lorenz_anneal_reaches_low_kl_x(tmp_path):
    config = suite_config(tmp_path, systems=("lorenz",), M_list=(12,), n_seeds=20)
    (group,) = run_benchmark_suite(config)["groups"]
    successes = screened_fraction(group, "success_fraction") * group["n_screened"]
    assert successes >= 2


def test_van_der_pol_fits_produce_limit_cycles(tmp_path):
    config = suite_config(tmp_path, systems=("vdp",), M_list=(14,), n_seeds=20)
    (group,) = run_benchmark_suite(config)["groups"]
    assert screened_fraction(group, "limit_cycle_fraction") >= 0.3


def test_anneal_beats_random_init_on_lorenz(tmp_path):
    config = suite_config(
        tmp_path, systems=("lorenz",), M_list=(8,), n_seeds=30,
        protocols=("anneal", "random_init"),
    )
    report = run_benchmark_suite(config)
    (comparison,) = report["protocol_comparison"]
    assert comparison["n_pairs"] == 30
    assert comparison["median_anneal"] < comparison["median_random_init"]
    assert comparison["p_value"] < 0.05


def test_linear_model_fails_on_lorenz(tmp_path):
    config = suite_config(
        tmp_path, systems=("lorenz",), M_list=(8,), n_seeds=20, nonlinearity="identity"
    )
    run_benchmark_suite(config)
    runs = ArtifactHelper.load_table(tmp_path / "suite" / "runs.csv")
    ok = runs[runs["status"] == "ok"]
    assert len(ok) > 0
    stable = ok[ok["stable"].astype(bool)]
    kl = stable["kl_x_normalized"].astype(float)
    # unstable fits count as failures to reconstruct
    assert (kl >= 0.8).sum() + (len(ok) - len(stable)) >= 0.9 * len(ok)
    change = stable["terminal_change"].astype(float)
    assert np.all((change < 1e-6) | np.isinf(change))


def bold_truth(seed, M=3, N=4, P=1):
    rng = np.random.default_rng(seed)
    W = np.array([[0.0, 0.4, -0.3], [-0.4, 0.0, 0.3], [0.3, -0.3, 0.0]])
    latent = PlrnnParams(
        mu0=rng.normal(size=M), A=np.diag([0.6, 0.7, 0.5]), W=W, C=np.zeros((M, 0)),
        h=np.array([0.3, -0.2, 0.1]), Sigma=0.1 * np.eye(M),
    )
    observation = ObsParamsBold(
        B=rng.normal(size=(N, M)), J=rng.normal(0.0, 0.3, size=(N, P)),
        Gamma=0.1 * np.eye(N), kernel=canonical_hrf(tr=2.0, duration=24.0),
        convolve_phi=True,
    )
    return ModelBundle(latent=latent, observation=observation)


def fit_and_score(X, R, truth, nonlinearity, seed):
    config = AnnealConfig(
        M=truth.M, head="bold", kernel=truth.observation.kernel, convolve_phi=True,
        nonlinearity=nonlinearity, em_max_iter=50, seed=seed,
    )
    fit = anneal_fit(X, R=R, config=config)
    klz = kl_z_report(fit.posterior, fit.model.latent, n_samples=20_000, seed=seed)
    ahead = n_step_ahead_mse(fit.model, fit.posterior, X, R=R, max_n=1)
    return klz.kl_normalized, float(ahead.obs_mse[1])


def test_plrnn_bold_beats_linear_bold_on_plrnn_data():
    plrnn_kl, lds_kl, plrnn_mse, lds_mse = [], [], [], []
    for seed in range(10):
        truth = bold_truth(seed)
        R = np.random.default_rng(100 + seed).normal(size=(300, 1))
        _, observed = simulate(truth, 300, nuisance=R, seed=seed)
        data, _ = standardize(Trajectory(values=observed.values))
        for nonlinearity, kls, mses in (
            ("relu", plrnn_kl, plrnn_mse), ("identity", lds_kl, lds_mse)
        ):
            kl, mse = fit_and_score(data.values, R, truth, nonlinearity, seed)
            kls.append(kl)
            mses.append(mse)
    assert np.nanmedian(plrnn_kl) < np.nanmedian(lds_kl)
    assert np.median(plrnn_mse) < np.median(lds_mse)
