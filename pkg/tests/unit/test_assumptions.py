import math

import numpy as np
import pytest
import torch

from src.analysis.assumptions import detect_tau1, detect_tau1_batch, detect_tau2, tau1_from_ratios
from src.diffusion.samplers import ExactScore, SamplerConfig, TrajectoryRecord, sample_batch
from src.diffusion.schedule import build_grid
from src.utils.errors import ConfigError


def test_tau1_from_ratios():
    times = np.array([10, 5, 0])
    ratios = np.array([[1.0], [8.0], [9.0]])
    tau1 = tau1_from_ratios(times, ratios, [0.5, 7.0, 8.5, 10.0])
    assert tau1[:, 0].tolist() == [10, 5, 0, -1]


def test_tau1_uses_the_running_minimum():
    # dominance must hold on the whole stretch down to t = 0
    times = np.array([3, 2, 1, 0])
    ratios = np.array([[9.0], [9.0], [1.0], [9.0]])
    assert tau1_from_ratios(times, ratios, [7.0])[0, 0] == 0


def test_single_trajectory_detection(grid25, schedule):
    times = np.array([20, 0])
    states = np.stack([math.sqrt(schedule.alpha_bar(20)) * grid25.modes[12].numpy(), grid25.modes[12].numpy()])
    report = detect_tau1(TrajectoryRecord(times=times, states=states, seed=0, traj_id=0), grid25, schedule, 7.0)
    assert report.tau1 == 20
    assert report.margins.shape == (2,)
    assert report.sigma_tilde_sq_dim[0] == pytest.approx(2.0 * schedule.sigma_tilde_sq(20))
    with pytest.raises(ConfigError):
        detect_tau1(TrajectoryRecord(times=times, states=states, seed=0, traj_id=0), grid25, schedule, 0.0)


def test_tau1_shrinks_as_kappa_grows(grid25, schedule):
    score = ExactScore(grid25, schedule)
    config = SamplerConfig("ddim", build_grid(schedule, "ddim_quadratic", 50))
    batch = sample_batch(config, score, schedule, np.arange(64), 2)
    tau1 = detect_tau1_batch(batch, grid25, schedule, [1.0, 5.0, 20.0])
    assert tau1.shape == (3, 64)
    assert np.all(tau1[0] >= tau1[1]) and np.all(tau1[1] >= tau1[2])


def test_tau2(schedule):
    assert detect_tau2(100.0, schedule, 7.0, 2) == schedule.T
    assert detect_tau2(1e-4, schedule, 7.0, 2) is None
    ell = 1.0 / math.sqrt(2.0)
    tau2 = [detect_tau2(ell, schedule, k, 2) for k in (1.0, 7.0, 20.0)]
    assert tau2[0] >= tau2[1] >= tau2[2]
    t = tau2[1]
    assert ell**2 >= 4.0 * 7.0 * 2 * schedule.sigma_tilde_sq(t)
    assert ell**2 < 4.0 * 7.0 * 2 * schedule.sigma_tilde_sq(t + 1)
    with pytest.raises(ConfigError):
        detect_tau2(0.0, schedule, 7.0, 2)


def test_tau2_on_recorded_times(schedule):
    ell = 1.0 / math.sqrt(2.0)
    coarse = detect_tau2(ell, schedule, 7.0, 2, times=[0, 5, 10, 1000])
    assert coarse in (0, 5, 10)
    assert coarse <= detect_tau2(ell, schedule, 7.0, 2)
