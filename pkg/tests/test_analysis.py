"""Tests for fixed-point enumeration and attractor detection."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from analysis import AttractorConfig, analyze_dynamics, detect_attractors, enumerate_fixed_points
from conftest import random_latent
from errors import ParameterError
from plrnn import PlrnnParams, latent_step

QUICK = AttractorConfig(n_init=20, T=400, seed=3)


def scalar_params(a, h):
    return PlrnnParams(
        mu0=np.zeros(1), A=np.array([[a]]), W=np.zeros((1, 1)), C=np.zeros((1, 0)),
        h=np.array([h]), Sigma=np.eye(1),
    )


def test_scalar_fixed_point():
    """z = 0.5 z + 1 has its only consistent solution at z = 2."""
    points = enumerate_fixed_points(scalar_params(0.5, 1.0), only_consistent=True)
    assert len(points) == 1
    assert_allclose(points[0].z_star, [2.0])
    assert points[0].stable
    assert points[0].spectral_radius == pytest.approx(0.5)


def test_enumeration_covers_every_region():
    params = random_latent(3, seed=2)
    points = enumerate_fixed_points(params)
    assert len(points) == 8
    regions = {tuple(p.region.astype(int)) for p in points}
    assert len(regions) == 8


def test_consistent_fixed_points_are_true_fixed_points():
    for seed in range(10):
        params = random_latent(4, seed=seed, scale=1.5)
        for fp in enumerate_fixed_points(params, only_consistent=True):
            assert np.max(np.abs(latent_step(params, fp.z_star) - fp.z_star)) < 1e-10
            assert np.array_equal(fp.z_star > 0, fp.region)


def test_identity_nonlinearity_has_single_region():
    params = random_latent(3, seed=1, nonlinearity="identity")
    points = enumerate_fixed_points(params)
    assert len(points) == 1
    assert points[0].consistent


def test_enumeration_cap():
    with pytest.raises(ParameterError, match="M"):
        enumerate_fixed_points(random_latent(5, seed=0), max_dim=4)


def test_limit_cycle_fixture_fixed_points(limit_cycle_params):
    points = enumerate_fixed_points(limit_cycle_params, only_consistent=True)
    assert len(points) == 1
    assert_allclose(points[0].z_star, [0.4 / 1.75, 0.4 / 1.75])
    assert not points[0].stable


def test_detects_single_limit_cycle(limit_cycle_params):
    result = detect_attractors(limit_cycle_params, QUICK)
    assert result.count("limit_cycle") == 1
    assert result.count("fixed_point") == 0
    assert result.count("chaotic") == 0
    assert result.n_unstable_fixed_points == 1
    assert result.n_unbounded == 0
    cycle = result.attractors[0]
    assert cycle.hits == QUICK.n_init
    orbit = {tuple(np.round(z, 6)) for z in cycle.representative[-2:]}
    assert orbit == {(1.0, -0.5), (-0.5, 1.0)}


def test_detects_stable_fixed_point():
    result = detect_attractors(scalar_params(0.5, 1.0), QUICK)
    assert result.n_stable == 1
    attractor = result.attractors[0]
    assert attractor.kind == "fixed_point"
    assert_allclose(attractor.representative, [2.0], atol=1e-8)
    assert result.n_unstable_fixed_points == 0


def test_unbounded_runs_are_counted():
    """z -> -1.5 z + 1 oscillates outwards from its unstable fixed point at 0.4."""
    result = detect_attractors(scalar_params(-1.5, 1.0), QUICK)
    assert result.n_unbounded == QUICK.n_init
    assert result.n_stable == 0
    assert result.n_unstable_fixed_points == 1


def test_attractor_config_validation():
    with pytest.raises(ParameterError):
        AttractorConfig(n_init=0)
    with pytest.raises(ParameterError):
        AttractorConfig(transient_fraction=1.0)


def test_analyze_dynamics_report(limit_cycle_params):
    report = analyze_dynamics(limit_cycle_params, QUICK).to_dict()
    assert len(report["fixed_points"]) == 1
    assert report["attractors"]["n_limit_cycles"] == 1
    assert report["attractors"]["fixed_points_enumerated"]
