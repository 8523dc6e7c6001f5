"""Tests for the E-step objective, MAP search, covariance, M-steps and EM."""

import itertools

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import stats

from conftest import random_latent, random_model
from errors import DimensionError, ParameterError, SingularSystemError
from hrf import HrfKernel, ObsParamsBold
from inference import (
    EmConfig,
    EstepConfig,
    assemble_system,
    em_fit,
    estep,
    estep_covariance,
    estep_map,
    expected_joint_loglik,
    laplace_log_evidence,
    log_joint,
    mstep,
    mstep_latent,
    mstep_observation,
)
from moments import compute_moments
from plrnn import ModelBundle, ObsParamsLinear, PlrnnParams, generate_latent, simulate


def kalman_smoother(model, X):
    """Independent RTS smoother for the identity-transfer model (no inputs)."""
    lat, obs = model.latent, model.observation
    F = lat.A + lat.W
    B, G, Q = obs.B, obs.Gamma, lat.Sigma
    T, M = X.shape[0], lat.M
    m_pred, P_pred = lat.mu0.copy(), Q.copy()
    means, covs, pred_means, pred_covs = [], [], [], []
    loglik = 0.0
    for t in range(T):
        S = B @ P_pred @ B.T + G
        loglik += stats.multivariate_normal(B @ m_pred, S).logpdf(X[t])
        K = P_pred @ B.T @ np.linalg.inv(S)
        m = m_pred + K @ (X[t] - B @ m_pred)
        P = (np.eye(M) - K @ B) @ P_pred
        means.append(m)
        covs.append(P)
        m_pred = F @ m + lat.h
        P_pred = F @ P @ F.T + Q
        pred_means.append(m_pred)
        pred_covs.append(P_pred)
    smoothed, smoothed_cov = [means[-1]], [covs[-1]]
    for t in range(T - 2, -1, -1):
        J = covs[t] @ F.T @ np.linalg.inv(pred_covs[t])
        smoothed.insert(0, means[t] + J @ (smoothed[0] - pred_means[t]))
        smoothed_cov.insert(0, covs[t] + J @ (smoothed_cov[0] - pred_covs[t]) @ J.T)
    return np.array(smoothed), np.array(smoothed_cov), loglik


def lds_model(M=2, N=3, seed=0):
    return random_model(M, N, seed=seed, nonlinearity="identity", sigma=0.5, gamma=0.3)


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------


def test_U0_scalar_pattern():
    a = 0.7
    latent = PlrnnParams(
        mu0=[0.0], A=[[a]], W=[[0.0]], C=np.zeros((1, 0)), h=[0.0], Sigma=[[1.0]]
    )
    model = ModelBundle(latent, ObsParamsLinear(B=[[1.0]], Gamma=[[1.0]]))
    system = assemble_system(model, np.zeros((2, 1)))
    assert_allclose(system.U0.toarray(), [[1 + a**2, -a], [-a, 1.0]])


def test_v2_reduces_to_stacked_data():
    model = ModelBundle(random_latent(2), ObsParamsLinear(B=np.eye(2), Gamma=np.eye(2)))
    X = np.random.default_rng(0).normal(size=(5, 2))
    assert_allclose(assemble_system(model, X).v2, X.reshape(-1))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_region_value_equals_log_joint(seed):
    """Q_d(z) with d = I(z > 0) is the log joint evaluated from residuals."""
    model = random_model(M=3, N=2, K=1, seed=seed)
    rng = np.random.default_rng(seed)
    X, S = rng.normal(size=(7, 2)), rng.normal(size=(7, 1))
    Z = rng.normal(size=(7, 3))
    system = assemble_system(model, X, S)
    assert system.value(Z.reshape(-1)) == pytest.approx(log_joint(model, Z, X, S), rel=1e-10)


def test_bold_region_value_equals_log_joint():
    rng = np.random.default_rng(5)
    M, N, T = 2, 2, 8
    obs = ObsParamsBold(
        B=rng.normal(size=(N, M)), J=rng.normal(size=(N, 1)), Gamma=0.5 * np.eye(N),
        kernel=HrfKernel(taps=[0.2, 0.6, 1.0], tr=1.0),
    )
    model = ModelBundle(random_latent(M, seed=5), obs)
    X, R, Z = rng.normal(size=(T, N)), rng.normal(size=(T, 1)), rng.normal(size=(T, M))
    system = assemble_system(model, X, R=R)
    assert system.value(Z.reshape(-1)) == pytest.approx(log_joint(model, Z, X, R=R), rel=1e-10)


def bold_model(seed, M=2, N=3):
    rng = np.random.default_rng(seed)
    obs = ObsParamsBold(
        B=rng.normal(size=(N, M)), J=rng.normal(size=(N, 1)), Gamma=0.5 * np.eye(N),
        kernel=HrfKernel(taps=[0.2, 0.6, 1.0], tr=1.0),
    )
    return ModelBundle(random_latent(M, seed=seed), obs)


@pytest.mark.parametrize("head", ["linear", "bold"])
def test_gradient_matches_finite_differences(head):
    rng = np.random.default_rng(3)
    X = rng.normal(size=(6, 3))
    if head == "linear":
        system = assemble_system(random_model(M=2, N=3, seed=3), X)
    else:
        system = assemble_system(bold_model(3), X, R=rng.normal(size=(6, 1)))
    z = rng.normal(size=12)
    d = z > 0
    grad = system.gradient(z, d)
    eps = 1e-6
    numeric = np.array(
        [(system.value(z + eps * e, d) - system.value(z - eps * e, d)) / (2 * eps)
         for e in np.eye(12)]
    )
    assert_allclose(grad, numeric, rtol=1e-4, atol=1e-6)


def test_prepare_data_checks_shapes(small_model):
    with pytest.raises(DimensionError, match="X"):
        assemble_system(small_model, np.zeros((5, 2)))
    with pytest.raises(ParameterError, match="Gamma"):
        bad = small_model.replace(
            observation=ObsParamsLinear(B=small_model.observation.B, Gamma=np.zeros((3, 3)))
        )
        assemble_system(bad, np.zeros((5, 3)))


# ---------------------------------------------------------------------------
# E-step
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_map_matches_rts_smoother(seed):
    model = lds_model(seed=seed)
    _, observed = simulate(model, 50, seed=seed)
    X = observed.values
    post = estep(model, X)
    smoothed, smoothed_cov, _ = kalman_smoother(model, X)
    assert post.converged
    assert np.max(np.abs(post.z_map - smoothed)) < 1e-6
    assert_allclose(post.V.diag_blocks(), smoothed_cov, atol=1e-6)


def test_laplace_evidence_is_exact_for_lds():
    model = lds_model(seed=7)
    _, observed = simulate(model, 30, seed=7)
    post = estep(model, observed.values)
    _, _, loglik = kalman_smoother(model, observed.values)
    assert laplace_log_evidence(model, post, observed.values) == pytest.approx(loglik, rel=1e-8)


def test_map_tracks_precise_observations():
    latent = random_latent(2, seed=4, nonlinearity="identity")
    model = ModelBundle(latent, ObsParamsLinear(B=np.eye(2), Gamma=1e-8 * np.eye(2)))
    X = np.random.default_rng(4).normal(size=(20, 2))
    post = estep_map(model, X)
    assert np.max(np.abs(post.z_map - X)) < 1e-3


@pytest.mark.parametrize("seed", range(4))
def test_exhaustive_small_problem(seed):
    """For M=1, T=3 the MAP value beats every region-restricted optimum."""
    model = random_model(M=1, N=1, seed=seed)
    X = np.random.default_rng(seed).normal(size=(3, 1))
    system = assemble_system(model, X)
    post = estep_map(model, X, system=system)
    for bits in itertools.product((False, True), repeat=3):
        z = system.solve(np.array(bits))
        assert post.Q_value >= system.value(z) - 1e-10
    assert post.Q_value == pytest.approx(log_joint(model, post.z_map, X))


def test_newton_search_never_worse_than_start():
    model = random_model(M=3, N=3, seed=6)
    _, observed = simulate(model, 40, seed=6)
    X = observed.values
    z0 = np.random.default_rng(6).normal(size=(40, 3))
    config = EstepConfig(exhaustive_max_dim=0)
    post = estep_map(model, X, z_init=z0, config=config, seed=1)
    assert post.Q_value >= log_joint(model, z0, X) - 1e-9


def test_qp_polish_does_not_lower_q():
    model = random_model(M=2, N=2, seed=8)
    _, observed = simulate(model, 30, seed=8)
    plain = estep_map(model, observed.values, config=EstepConfig(exhaustive_max_dim=0), seed=0)
    polished = estep_map(
        model, observed.values, config=EstepConfig(exhaustive_max_dim=0, qp_polish=True), seed=0
    )
    assert polished.Q_value >= plain.Q_value - 1e-12


def test_covariance_identity_without_coupling():
    latent = PlrnnParams(
        mu0=np.zeros(2), A=np.zeros((2, 2)), W=np.zeros((2, 2)), C=np.zeros((2, 0)),
        h=np.zeros(2), Sigma=np.eye(2),
    )
    model = ModelBundle(latent, ObsParamsLinear(B=np.zeros((1, 2)), Gamma=np.eye(1)))
    system = assemble_system(model, np.zeros((4, 1)))
    cov, logdet = estep_covariance(system, np.ones(8, dtype=bool))
    assert_allclose(cov.to_dense(), np.eye(8), atol=1e-12)
    assert logdet == pytest.approx(0.0, abs=1e-12)


def test_covariance_matches_dense_inverse():
    model = random_model(M=2, N=3, seed=9)
    _, observed = simulate(model, 20, seed=9)
    system = assemble_system(model, observed.values)
    d = np.random.default_rng(9).random(40) > 0.5
    cov, _ = estep_covariance(system, d)
    inverse = np.linalg.inv(system.hessian(d).toarray())
    band = np.abs(np.subtract.outer(np.arange(40), np.arange(40))) <= cov.bandwidth
    assert_allclose(cov.to_dense()[band], inverse[band], atol=1e-8)


# ---------------------------------------------------------------------------
# M-steps and Q
# ---------------------------------------------------------------------------


def _noise_free_path(latent, T, seed):
    S = np.random.default_rng(seed).normal(size=(T, latent.K))
    return generate_latent(latent, T, inputs=S, deterministic=True).values, S


def test_latent_mstep_recovers_parameters():
    truth = random_latent(3, K=2, seed=10)
    Z, S = _noise_free_path(truth, 300, 10)
    model = ModelBundle(truth, ObsParamsLinear(B=np.eye(3), Gamma=np.eye(3)))
    moments = compute_moments(model, Z, None, np.maximum(Z, 0.0), S)
    start = random_latent(3, K=2, seed=99)
    fitted = mstep_latent(moments, start)
    for name in ("A", "W", "h", "C", "mu0"):
        assert_allclose(getattr(fitted, name), getattr(truth, name), atol=1e-6)
    assert_allclose(np.diag(fitted.Sigma), 1e-6)
    assert np.all(np.diag(fitted.W) == 0.0)
    assert np.all(fitted.A - np.diag(np.diag(fitted.A)) == 0.0)


def test_latent_mstep_without_inputs_matches_zero_inputs():
    truth = random_latent(2, seed=11)
    Z = generate_latent(truth, 100, seed=11).values
    model = ModelBundle(truth, ObsParamsLinear(B=np.eye(2), Gamma=np.eye(2)))
    X = np.maximum(Z, 0.0)
    without = mstep_latent(compute_moments(model, Z, None, X), truth)
    padded_truth = truth.replace(C=np.zeros((2, 1)))
    padded_model = ModelBundle(padded_truth, ObsParamsLinear(B=np.eye(2), Gamma=np.eye(2)))
    padded = mstep_latent(
        compute_moments(padded_model, Z, None, X, np.zeros((100, 1))), padded_truth,
        freeze={"C"},
    )
    for name in ("A", "W", "h", "Sigma"):
        assert_allclose(getattr(without, name), getattr(padded, name), atol=1e-8)


def test_frozen_groups_keep_their_values():
    truth = random_latent(2, seed=12)
    Z = generate_latent(truth, 80, seed=12).values
    model = ModelBundle(truth, ObsParamsLinear(B=np.eye(2), Gamma=np.eye(2)))
    start = random_latent(2, seed=13)
    fitted = mstep_latent(
        compute_moments(model, Z, None, np.maximum(Z, 0.0)), start, freeze={"Sigma", "W"}
    )
    assert_allclose(fitted.Sigma, start.Sigma)
    assert_allclose(fitted.W, start.W)


def test_observation_mstep_recovers_loading():
    truth = random_model(M=2, N=4, seed=14)
    Z = generate_latent(truth.latent, 200, seed=14).values
    X = np.maximum(Z, 0.0) @ truth.observation.B.T
    moments = compute_moments(truth, Z, None, X)
    fitted = mstep_observation(moments, ObsParamsLinear(B=np.ones((4, 2)), Gamma=np.eye(4)))
    assert_allclose(fitted.B, truth.observation.B, atol=1e-6)
    assert np.all(np.diag(fitted.Gamma) >= 0.0)
    assert_allclose(
        fitted.B,
        moments.H1 @ np.linalg.inv(moments.H3),
        atol=1e-8,
    )


def test_bold_observation_mstep_recovers_B_and_J():
    rng = np.random.default_rng(15)
    kernel = HrfKernel(taps=[0.3, 0.7, 1.0], tr=1.0)
    truth = ObsParamsBold(
        B=rng.normal(size=(3, 2)), J=rng.normal(size=(3, 2)), Gamma=np.eye(3), kernel=kernel
    )
    model = ModelBundle(random_latent(2, seed=15), truth)
    T = 150
    Z, R = rng.normal(size=(T, 2)), rng.normal(size=(T, 2))
    from hrf import observe_bold

    X = observe_bold(truth, Z, nuisance=R, noise=False).values
    moments = compute_moments(model, Z, None, X, R=R)
    start = truth.replace(B=np.zeros((3, 2)), J=np.zeros((3, 2)))
    fitted = mstep_observation(moments, start)
    assert_allclose(fitted.B, truth.B, atol=1e-6)
    assert_allclose(fitted.J, truth.J, atol=1e-6)


def test_observation_mstep_singular_gram():
    model = random_model(M=2, N=2, seed=16)
    Z = -np.ones((10, 2))
    moments = compute_moments(model, Z, None, np.zeros((10, 2)))
    with pytest.raises(SingularSystemError):
        mstep_observation(moments, model.observation)


def test_diagonal_loading_keeps_B_diagonal():
    truth = random_model(M=2, N=2, seed=17)
    Z = generate_latent(truth.latent, 100, seed=17).values
    moments = compute_moments(truth, Z, None, np.random.default_rng(0).normal(size=(100, 2)))
    fitted = mstep_observation(moments, truth.observation, diagonal_loading=True)
    assert fitted.B[0, 1] == 0.0 and fitted.B[1, 0] == 0.0


def test_q_zero_for_perfect_unit_model():
    """Sigma = Gamma = I and zero residuals give Q = 0."""
    latent = PlrnnParams(
        mu0=np.zeros(1), A=[[0.5]], W=[[0.0]], C=np.zeros((1, 0)), h=[0.0], Sigma=[[1.0]]
    )
    model = ModelBundle(latent, ObsParamsLinear(B=[[1.0]], Gamma=[[1.0]]))
    Z = np.zeros((5, 1))
    assert expected_joint_loglik(model, compute_moments(model, Z, None, Z)) == pytest.approx(0.0)


def test_q_point_mass_equals_log_joint():
    model = random_model(M=2, N=3, K=1, seed=18)
    rng = np.random.default_rng(18)
    Z, X, S = rng.normal(size=(9, 2)), rng.normal(size=(9, 3)), rng.normal(size=(9, 1))
    q = expected_joint_loglik(model, compute_moments(model, Z, None, X, S))
    assert q == pytest.approx(log_joint(model, Z, X, S), rel=1e-10)


def test_q_matches_monte_carlo_under_gaussian_posterior():
    model = random_model(M=2, N=2, seed=19)
    _, observed = simulate(model, 12, seed=19)
    X = observed.values
    post = estep(model, X)
    q = expected_joint_loglik(model, post.moments)
    dense = np.linalg.inv(assemble_system(model, X).hessian(post.d_omega).toarray())
    rng = np.random.default_rng(0)
    samples = rng.multivariate_normal(post.z_map.reshape(-1), dense, size=20_000)
    values = np.array([log_joint(model, z, X) for z in samples])
    se = values.std() / np.sqrt(values.size)
    assert abs(q - values.mean()) < 3 * se + 1e-2


def test_mstep_does_not_decrease_q():
    model = random_model(M=2, N=3, seed=20)
    _, observed = simulate(model, 60, seed=20)
    start = random_model(M=2, N=3, seed=21)
    post = estep(start, observed.values)
    updated = mstep(start, post.moments, EmConfig())
    before = expected_joint_loglik(start, post.moments)
    after = expected_joint_loglik(updated, post.moments)
    assert after >= before - 1e-8 * abs(before)


# ---------------------------------------------------------------------------
# EM
# ---------------------------------------------------------------------------


def test_em_lds_elbo_non_decreasing():
    """With the exact E-step of the LDS, the ELBO increases monotonically."""
    truth = lds_model(seed=22)
    _, observed = simulate(truth, 100, seed=22)
    start = lds_model(seed=23)
    result = em_fit(start, observed.values, config=EmConfig(max_iter=15, tol=1e-10))
    trace = np.array(result.elbo_trace)
    assert np.all(np.diff(trace) >= -1e-6 * np.abs(trace[:-1]))
    assert len(result.elbo_trace) == len(result.q_trace)


@pytest.mark.parametrize("seed", range(20))
def test_em_relu_q_trace_non_decreasing(seed):
    truth = random_model(M=2, N=3, seed=40 + seed, sigma=0.5, gamma=0.3)
    _, observed = simulate(truth, 30, seed=seed)
    start = random_model(M=2, N=3, seed=80 + seed)
    result = em_fit(start, observed.values, config=EmConfig(max_iter=8, seed=seed))
    trace = np.array(result.q_trace)
    assert trace.size >= 1
    assert np.all(np.diff(trace) >= -1e-6 * np.abs(trace[:-1]))


def test_em_rejects_step_that_lowers_q(monkeypatch):
    truth = random_model(M=2, N=3, seed=30)
    _, observed = simulate(truth, 20, seed=30)
    values = iter([-50.0, -40.0, -45.0, -30.0])
    monkeypatch.setattr("inference.expected_joint_loglik", lambda model, moments: next(values))
    result = em_fit(
        random_model(M=2, N=3, seed=31), observed.values, config=EmConfig(max_iter=10, seed=1)
    )
    assert result.q_trace == [-50.0, -40.0]
    assert result.n_iter == 3
    assert not result.converged


def test_em_respects_frozen_sigma():
    truth = random_model(M=2, N=3, seed=24)
    _, observed = simulate(truth, 60, seed=24)
    start = random_model(M=2, N=3, seed=25)
    result = em_fit(
        start, observed.values, config=EmConfig(max_iter=5, freeze={"Sigma"}, seed=1)
    )
    assert_allclose(result.model.latent.Sigma, start.latent.Sigma)
    assert result.posterior.moments is not None


def test_em_config_rejects_unknown_freeze_name():
    with pytest.raises(ParameterError, match="freeze"):
        EmConfig(freeze={"Lambda"})
