import math

import numpy as np
import pytest
import torch
from scipy.integrate import solve_ivp
from scipy.special import expit

from src.analysis.equilibria import (
    drift_from_score,
    find_interior_saddle,
    find_mode_equilibria,
    integrate_parallel_flow,
    midpoint_eigenvalues,
    midpoint_lambda,
    pair_drift,
    pair_saddle,
    trapping_spec,
    trapping_window_check,
)
from src.diffusion.geometry import segment_frame
from src.diffusion.mixture import build_grid_mixture
from src.diffusion.samplers import ExactScore
from src.diffusion.schedule import build_grid, build_linear_schedule
from src.utils.errors import ConfigError

T_EARLY = 20


def test_pair_saddle():
    assert pair_saddle(1.0, 0.01) == 0.5
    assert pair_saddle(1.0, 0.5) is None
    xi = pair_saddle(1.0, 0.01, weights=(0.3, 0.7))
    assert xi is not None and xi < 0.5
    assert abs(float(pair_drift(1.0, 0.01, xi, weights=(0.3, 0.7)))) < 1e-10


def test_interior_saddle_of_the_full_mixture(grid25, schedule, corner_pair):
    s2 = schedule.sigma_tilde_sq(T_EARLY)
    saddle = find_interior_saddle(corner_pair, s2, gmm=grid25, kappa=7.0)
    assert saddle.present
    assert saddle.xi_pair == 0.5
    assert saddle.slope_pair == pytest.approx(corner_pair.ell**2 / (4.0 * s2) - 1.0)
    assert saddle.interval_shrunk
    lo, hi = saddle.interval
    assert lo < 0.5 < hi and hi - lo < 0.2
    assert saddle.slope_floor >= 0.5 * saddle.slope_pair
    assert saddle.displacement <= saddle.displacement_bound


def test_pair_only_saddle_skips_the_full_search(corner_pair):
    saddle = find_interior_saddle(corner_pair, 0.01)
    assert saddle.present and saddle.xi_full is None and saddle.displacement is None
    assert not find_interior_saddle(corner_pair, 10.0).present


def test_mode_equilibria_are_stable(grid25, schedule, corner_pair):
    eq = find_mode_equilibria(corner_pair, schedule.sigma_tilde_sq(T_EARLY), grid25)
    assert eq.xi_i == pytest.approx(0.0, abs=1e-6)
    assert eq.xi_j == pytest.approx(1.0, abs=1e-6)
    assert eq.stable and eq.regime_ok
    with pytest.raises(ConfigError):
        find_mode_equilibria(corner_pair, 0.0, grid25)


def test_midpoint_spectrum_matches_the_analytic_eigenvalue(grid25, schedule, corner_pair):
    spectrum = midpoint_eigenvalues(corner_pair, schedule, T_EARLY, grid25)
    assert spectrum.n_positive == 1
    assert spectrum.relative_error < 1e-6
    assert spectrum.eigenvalues[0] == pytest.approx(midpoint_lambda(corner_pair.ell, schedule.sigma_tilde_sq(T_EARLY)))
    assert spectrum.eigenvalues[1] == pytest.approx(-1.0, abs=1e-5)
    assert spectrum.regime_ok


def test_drift_from_exact_score_is_the_rescaled_drift(grid25, schedule, corner_pair):
    score = ExactScore(grid25, schedule)
    spectrum = midpoint_eigenvalues(corner_pair, schedule, T_EARLY, grid25, drift=drift_from_score(score, T_EARLY))
    assert spectrum.relative_error < 1e-5


def test_trapping_spec(schedule, corner_pair):
    grid = build_grid(schedule, "ddim_quadratic", 50)
    spec = trapping_spec(corner_pair, schedule, 0.15, tau3=3, grid=grid)
    assert spec.tau3_time == 6
    assert spec.lambda_min <= spec.lambda_max < spec.Lambda_plus
    assert spec.u_span == pytest.approx(float(schedule.u_all[0] - schedule.u_all[6]))
    assert 0.0 <= spec.entry_window < spec.theta
    assert trapping_window_check(spec, corner_pair.ell, schedule, window=spec.theta) > 0
    with pytest.raises(ConfigError):
        trapping_spec(corner_pair, schedule, 0.15)
    with pytest.raises(ConfigError):
        trapping_spec(corner_pair, schedule, 0.0, tau3_time=6)


def test_parallel_flow_leaves_an_offset_midpoint(schedule, corner_pair):
    times, path = integrate_parallel_flow(corner_pair.ell, schedule, [0.5, 0.501, 0.499], 6)
    assert list(times) == [6, 5, 4, 3, 2, 1, 0]
    assert path[-1, 0] == 0.5
    assert path[-1, 1] > 0.7 and path[-1, 2] < 0.3
    assert np.isfinite(path).all()


def test_parallel_flow_matches_adaptive_integrator(schedule, corner_pair):
    """One step of the RK4 flow against DOP853 with the same linear interpolation of ℓ²/σ̃²."""
    times, path = integrate_parallel_flow(corner_pair.ell, schedule, [0.5001], 6, substeps=256)
    u = schedule.u_all.numpy()
    s2 = schedule.sigma_tilde_sq_all.numpy()
    a0, a1 = corner_pair.ell**2 / s2[6], corner_pair.ell**2 / s2[5]
    span = u[5] - u[6]

    def rhs(s, x):
        a = a0 + (a1 - a0) * s / span
        return expit(a * (x - 0.5)) - x

    oracle = solve_ivp(rhs, (0.0, span), [0.5001], method="DOP853", rtol=1e-12, atol=1e-14)
    assert times[1] == 5
    assert path[1, 0] == pytest.approx(oracle.y[0, -1], abs=1e-6)


def test_collapsed_entry_window_is_refused(schedule, corner_pair):
    spec = trapping_spec(corner_pair, schedule, 0.15, tau3_time=6)
    assert spec.Lambda_plus * spec.u_span > 745.0
    assert spec.entry_window == 0.0
    with pytest.raises(ConfigError):
        trapping_window_check(spec, corner_pair.ell, schedule)
    with pytest.raises(ConfigError):
        trapping_window_check(spec, corner_pair.ell, schedule, window=0.0)


def test_entry_window_holds_for_a_wide_pair():
    gmm = build_grid_mixture(side=2, sigma=0.7, normalize=False)
    schedule = build_linear_schedule(sigma_data=gmm.sigma)
    pair = segment_frame(gmm, 0, 1)
    spec = trapping_spec(pair, schedule, 0.05, tau3_time=6)
    assert spec.admissible
    assert 0.0 < spec.entry_window < spec.theta
    assert trapping_window_check(spec, pair.ell, schedule) == 0
