import math

import numpy as np
import pytest
import torch

from src.diffusion.schedule import (
    StepGrid,
    build_grid,
    build_linear_schedule,
    ddim_quadratic_grid,
    ddim_uniform_grid,
    u_time,
)
from src.utils.errors import ConfigError


def test_linear_schedule_endpoints(schedule):
    assert schedule.T == 1000
    assert schedule.alpha_bar(0) == 1.0
    assert schedule.beta(1) == pytest.approx(1e-4)
    assert schedule.beta(1000) == pytest.approx(0.02)
    assert torch.all(torch.diff(schedule.alpha_bars) < 0)
    assert 0.0 < schedule.terminal_gamma < 1e-3


def test_component_variance(schedule):
    sigma = schedule.sigma_data
    assert schedule.sigma_t_sq(0) == pytest.approx(sigma**2)
    abar = schedule.alpha_bar(500)
    assert schedule.sigma_t_sq(500) == pytest.approx(sigma**2 * abar + 1.0 - abar)
    assert schedule.sigma_tilde_sq(500) == pytest.approx(schedule.sigma_t_sq(500) / abar)


def test_u_time_is_a_decreasing_tail_sum(schedule):
    u = schedule.u_all.numpy()
    assert u[-1] == 0.0
    assert np.all(np.diff(u) < 0)
    expected = sum(schedule.beta(s) / (2.0 * schedule.sigma_t_sq(s)) for s in range(991, 1001))
    assert u_time(schedule, 990) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize(
    "kwargs",
    [dict(T=1), dict(beta_min=0.0), dict(beta_min=0.03, beta_max=0.02), dict(sigma_data=0.0)],
)
def test_invalid_schedule(kwargs):
    with pytest.raises(ConfigError):
        build_linear_schedule(**kwargs)


def test_check_index(schedule):
    assert schedule.check_index(0) == 0
    with pytest.raises(ConfigError):
        schedule.check_index(1001)


def test_quadratic_grid(schedule):
    grid = ddim_quadratic_grid(schedule, 50)
    assert grid.indices[0] == 1000 and grid.indices[-1] == 0
    assert all(a > b for a, b in zip(grid.indices, grid.indices[1:]))
    # the k = 1 entry rounds to 0 and merges with the endpoint
    assert grid.n_steps == 49
    assert grid.time_at_remaining(0) == 0
    assert grid.time_at_remaining(1) == 2
    assert grid.time_at_remaining(3) == 6
    assert grid.time_at_remaining(grid.n_steps) == 1000


def test_uniform_grid():
    schedule = build_linear_schedule(T=100)
    assert ddim_uniform_grid(schedule, 4).indices == (100, 75, 50, 25, 0)


def test_grid_tail(schedule):
    grid = build_grid(schedule, "ddim_uniform", 10)
    assert grid.tail(300) == (300, 200, 100, 0)
    with pytest.raises(ConfigError):
        grid.tail(250)


@pytest.mark.parametrize("n_steps", [1, 1001])
def test_grid_size_out_of_range(schedule, n_steps):
    with pytest.raises(ConfigError):
        build_grid(schedule, "ddim_quadratic", n_steps)


def test_invalid_grids(schedule):
    with pytest.raises(ConfigError):
        build_grid(schedule, "ddim_cubic", 10)
    with pytest.raises(ConfigError):
        StepGrid("ddim_uniform", (10, 10, 0))
    with pytest.raises(ConfigError):
        StepGrid("ddim_uniform", (10, 5))


def test_ddpm_grid_is_every_index(schedule):
    grid = build_grid(schedule, "ddpm_full")
    assert grid.n_steps == 1000
    assert grid.indices[:3] == (1000, 999, 998)
    assert math.isclose(sum(grid.indices), 1000 * 1001 / 2)
