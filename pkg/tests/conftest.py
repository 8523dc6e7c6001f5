"""Shared fixtures: small random models and the limit-cycle test system."""

import numpy as np
import pytest

from plrnn import ModelBundle, ObsParamsLinear, PlrnnParams


def random_latent(M, K=0, seed=0, nonlinearity="relu", sigma=1.0, scale=0.4):
    rng = np.random.default_rng(seed)
    W = rng.normal(0.0, scale / np.sqrt(M), size=(M, M))
    np.fill_diagonal(W, 0.0)
    return PlrnnParams(
        mu0=rng.normal(size=M),
        A=np.diag(rng.uniform(0.2, 0.7, size=M)),
        W=W,
        C=rng.normal(size=(M, K)),
        h=rng.normal(0.0, 0.3, size=M),
        Sigma=sigma * np.eye(M),
        nonlinearity=nonlinearity,
    )


def random_model(M, N, K=0, seed=0, nonlinearity="relu", sigma=1.0, gamma=1.0):
    rng = np.random.default_rng(seed + 100)
    latent = random_latent(M, K, seed, nonlinearity, sigma)
    observation = ObsParamsLinear(B=rng.normal(size=(N, M)), Gamma=gamma * np.eye(N))
    return ModelBundle(latent=latent, observation=observation)


@pytest.fixture
def limit_cycle_params():
    """Period-2 orbit between (1, -0.5) and (-0.5, 1); one unstable fixed point."""
    return PlrnnParams(
        mu0=np.array([1.0, -0.5]),
        A=np.diag([-0.9, -0.9]),
        W=np.array([[0.0, 0.15], [0.15, 0.0]]),
        C=np.zeros((2, 0)),
        h=np.array([0.4, 0.4]),
        Sigma=np.eye(2),
    )


@pytest.fixture
def small_model():
    return random_model(M=2, N=3, seed=1)


@pytest.fixture(autouse=True)
def isolated_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("PLRNN_SSM_OUTPUT_DIR", str(tmp_path / "out"))
    monkeypatch.setenv("PLRNN_SSM_ENVIRONMENT", "production")
