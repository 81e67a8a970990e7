import math

import numpy as np
import pytest
import torch

from src.analysis.convergence import (
    MIN_TRAJECTORIES,
    DistanceMoments,
    distance_moments,
    fit_from_moments,
    fit_log_linear,
    initial_distance_check,
    pair_distances,
    tube_distances,
)
from src.diffusion.geometry import segment_frame
from src.diffusion.samplers import ExactScore, SamplerConfig, sample_batch
from src.diffusion.schedule import build_grid
from src.utils.errors import ConfigError


def test_exponential_decay_has_unit_slope():
    u = np.linspace(0.0, 10.0, 101)
    fit = fit_log_linear(u, np.exp(-u))
    assert fit.fittable
    assert fit.slope == pytest.approx(-1.0, abs=1e-8)
    assert fit.plateau == pytest.approx(math.exp(-10.0))
    start, stop = fit.region
    assert u[start] > math.log(2.0) and start < stop


def test_flat_curve_is_not_fittable():
    fit = fit_log_linear(np.linspace(0.0, 1.0, 20), np.ones(20))
    assert not fit.fittable
    assert fit.slope is None


def test_fit_needs_enough_trajectories(schedule):
    times = np.array([10, 5, 0])
    moments = DistanceMoments(times, np.ones(3), np.ones(3), np.full(3, MIN_TRAJECTORIES - 1.0))
    with pytest.raises(ConfigError):
        fit_from_moments(moments, schedule)


def test_moments_merge():
    times = np.array([2, 1, 0])
    a = DistanceMoments(times, np.ones(3), np.ones(3), np.full(3, 2.0))
    merged = a.merge(a)
    np.testing.assert_allclose(merged.total, 2.0)
    np.testing.assert_allclose(merged.count, 4.0)
    with pytest.raises(ConfigError):
        a.merge(DistanceMoments(np.array([3, 1, 0]), np.ones(3), np.ones(3), np.ones(3)))


def test_pair_distances(grid25, corner_pair):
    y = torch.stack([corner_pair.point(0.3), corner_pair.point(1.5)])
    i = torch.tensor([0, 0])
    j = torch.tensor([1, 1])
    dist = pair_distances(grid25, i, j, y, 0.1)
    assert float(dist[0]) == pytest.approx(0.0, abs=1e-15)
    assert float(dist[1]) == pytest.approx(0.4 * corner_pair.ell)
    length = pair_distances(grid25, i, j, y, 0.1, convention="length")
    assert float(length[1]) == pytest.approx(0.5 * corner_pair.ell - 0.1)


def test_distances_shrink_along_ddim_runs(grid25, schedule):
    score = ExactScore(grid25, schedule)
    config = SamplerConfig("ddim", build_grid(schedule, "ddim_quadratic", 50))
    batch = sample_batch(config, score, schedule, np.arange(128), 2)
    dist = tube_distances(batch, grid25, schedule, eps=0.01)
    assert dist.shape == (len(batch.times), 128)
    assert float(dist[-1].mean()) < 0.1 * float(dist[0].mean())
    in_x = tube_distances(batch, grid25, schedule, eps=0.01, frame="x")
    torch.testing.assert_close(in_x[-1], dist[-1])
    with pytest.raises(ConfigError):
        tube_distances(batch, grid25, schedule, eps=0.01, frame="polar")

    moments = distance_moments(batch, grid25, schedule, eps=0.01)
    fit = fit_from_moments(moments, schedule)
    assert fit.halfwidth.shape == fit.mean.shape
    assert fit.plateau == pytest.approx(float(dist[-1].mean()))


def test_initial_distance_check(grid25, schedule):
    score = ExactScore(grid25, schedule)
    config = SamplerConfig("ddim", build_grid(schedule, "ddim_uniform", 2))
    batch = sample_batch(config, score, schedule, np.arange(256), 2)
    check = initial_distance_check(batch, grid25, schedule, phi=4.0)
    assert check.n == 256
    assert check.threshold == pytest.approx(math.sqrt(2.0 * 5.0))
    assert check.guarantee == pytest.approx(1.0 - 2.0 * math.exp(-2.0 * 16.0 / 8.0))
    assert check.fraction >= check.guarantee
    with pytest.raises(ConfigError):
        initial_distance_check(batch, grid25, schedule, phi=0.0)
