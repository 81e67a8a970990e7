import math

import pytest

from src.analysis.bounds import (
    DdpmBoundInputs,
    brownian_confinement_check,
    confinement_bound,
    ddpm_terminal_bound,
    estimate_drift_bounds,
    terminal_midpoint_probability,
)
from src.diffusion.samplers import ExactScore
from src.utils.errors import ConfigError


def test_confinement_bound():
    assert confinement_bound(1.0, 1.0) == pytest.approx(4.0 / math.pi * math.exp(-(math.pi**2) / 8.0))


def test_brownian_confinement_matches_the_series():
    # P(sup |B| < 1 on [0, 1]); the leading series term dominates
    exact = 4.0 / math.pi * math.exp(-(math.pi**2) / 8.0) - 4.0 / (3.0 * math.pi) * math.exp(-9.0 * math.pi**2 / 8.0)
    check = brownian_confinement_check(1.0, 1.0, n_paths=2000, n_substeps=200, seed=5)
    assert abs(check.empirical - exact) < 4.0 * check.se + 0.01
    assert check.ok
    assert check.bound_capped <= 1.0


def test_bridge_correction_removes_the_monitoring_bias():
    coarse = brownian_confinement_check(1.0, 1.0, n_paths=2000, n_substeps=10, seed=5, bridge=False)
    bridged = brownian_confinement_check(1.0, 1.0, n_paths=2000, n_substeps=10, seed=5)
    assert bridged.empirical < coarse.empirical


def test_confinement_rejects_bad_arguments():
    with pytest.raises(ConfigError):
        brownian_confinement_check(0.0, 1.0, n_paths=10, n_substeps=10)


def test_terminal_bound_edge_cases():
    inputs = DdpmBoundInputs(eta_max=0.01, eta_integral=0.05, K=[0.0], times=[1], lambda_rep=0.0, theta=0.1)
    assert ddpm_terminal_bound(inputs) == 1.0
    inputs.lambda_rep = 1.0
    assert ddpm_terminal_bound(inputs, theta=0.0) == 1.0
    assert 0.0 < ddpm_terminal_bound(inputs) <= 1.0


def test_drift_bounds_of_a_linear_drift(schedule, corner_pair):
    inputs = estimate_drift_bounds(corner_pair, schedule, None, 10, theta=0.15, drift=lambda a, t, z: -0.3 * a)
    assert inputs.K == pytest.approx([0.3] * 10)
    assert inputs.lambda_rep == pytest.approx(0.3)
    assert inputs.repulsion_ok
    assert inputs.eta_integral == pytest.approx(0.5 * sum(schedule.beta(t) for t in range(1, 11)))
    assert inputs.eta_max == pytest.approx(0.5 * schedule.beta(10))
    assert inputs.theta == pytest.approx(0.15 * corner_pair.ell)
    assert inputs.tau3_span == 10

    attracting = estimate_drift_bounds(corner_pair, schedule, None, 10, drift=lambda a, t, z: 0.3 * a)
    assert not attracting.repulsion_ok


def test_drift_bounds_need_a_source(schedule, corner_pair):
    with pytest.raises(ConfigError):
        estimate_drift_bounds(corner_pair, schedule, None, 10)
    with pytest.raises(ConfigError):
        estimate_drift_bounds(corner_pair, schedule, None, 10, theta=0.3, a_star=0.28, drift=lambda a, t, z: a)


def test_exact_score_repels_from_the_midpoint(grid25, schedule, corner_pair):
    score = ExactScore(grid25, schedule)
    inputs = estimate_drift_bounds(corner_pair, schedule, score, 20, n_samples=40, z_bound=0.01, seed=1)
    assert inputs.repulsion_ok
    lengths = [0.05 * corner_pair.ell, 0.3 * corner_pair.ell]
    rows = terminal_midpoint_probability(corner_pair, schedule, score, inputs, lengths, n_paths=500, seed=1)
    assert [r.theta for r in rows] == lengths
    assert rows[0].probability <= rows[1].probability
    assert all(0.0 <= r.bound <= 1.0 for r in rows)
