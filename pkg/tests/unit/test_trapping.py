import math

import numpy as np
import pytest
import torch

from src.analysis.hallucination import INTERPOLATION, TRUE_MODE
from src.analysis.trapping import (
    MidpointCounts,
    entered_midpoint,
    midpoint_event_decomposition,
    restart_points,
    signed_offsets,
    trapping_experiment,
)
from src.diffusion.samplers import ExactScore, SamplerConfig, TrajectoryBatch
from src.diffusion.schedule import build_grid


def test_signed_offsets():
    offsets = signed_offsets(5, 0.2)
    np.testing.assert_allclose(offsets, [0.0, -0.05, 0.1, -0.15, 0.2])


def test_restart_points_sit_on_the_diffused_segment(schedule, corner_pair):
    x = restart_points(corner_pair, schedule, 6, [0.0])
    torch.testing.assert_close(x[0], math.sqrt(schedule.alpha_bar(6)) * corner_pair.midpoint)


def test_midpoint_restart_is_trapped_and_offset_escapes(grid25, schedule, corner_pair):
    grid = build_grid(schedule, "ddim_quadratic", 50)
    config = SamplerConfig("ddim", grid)
    score = ExactScore(grid25, schedule)
    result = trapping_experiment(6, 0.3, config, corner_pair, grid25, score, n_trials=2)
    np.testing.assert_allclose(result.offsets, [0.0, -0.3])
    assert result.stuck.tolist() == [True, False]
    assert result.n_stuck == 1 and result.n_escaped == 1
    assert result.stuck_rate == 0.5 and result.escape_rate == 0.5
    assert result.terminal_xi[0] == pytest.approx(0.5, abs=1e-6)
    assert result.terminal_xi[1] < 0.1


def test_midpoint_counts_table():
    row = MidpointCounts(n=10, n_h=4, n_m=5, n_hm=3).table()
    assert row["p_h"] == pytest.approx(0.4)
    assert row["p_m"] == pytest.approx(0.5)
    assert row["p_h_given_m"] == pytest.approx(0.6)
    assert row["p_h_given_not_m"] == pytest.approx(0.2)
    assert row["p_h_given_m_times_p_m"] + row["p_h_given_not_m_times_p_not_m"] == pytest.approx(row["p_h"])


def test_midpoint_counts_merge_and_empty_condition():
    merged = MidpointCounts(4, 1, 0, 0).merge(MidpointCounts(6, 2, 0, 0))
    assert (merged.n, merged.n_h, merged.n_m) == (10, 3, 0)
    row = merged.table()
    assert row["p_h_given_m"] is None
    assert row["p_h_given_m_times_p_m"] is None


def test_entered_midpoint_and_decomposition(grid25, schedule, corner_pair):
    root = math.sqrt(schedule.alpha_bar(6))
    early = torch.stack([root * corner_pair.midpoint, root * grid25.modes[12]])
    late = torch.stack([corner_pair.midpoint, grid25.modes[12]])
    batch = TrajectoryBatch(times=np.array([6, 0]), states=torch.stack([early, late]), traj_ids=np.arange(2), seed=0)
    assert entered_midpoint(batch, grid25, schedule, 0.15, 6).tolist() == [True, False]
    # the window only counts 0 < t <= t(τ₃)
    assert entered_midpoint(batch, grid25, schedule, 0.15, 5).tolist() == [False, False]
    counts = midpoint_event_decomposition(batch, grid25, schedule, 0.15, 6)
    assert (counts.n, counts.n_h, counts.n_m, counts.n_hm) == (2, 1, 1, 1)
    codes = np.array([TRUE_MODE, INTERPOLATION])
    assert midpoint_event_decomposition(batch, grid25, schedule, 0.15, 6, codes=codes).n_hm == 0
