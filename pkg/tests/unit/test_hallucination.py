import math

import numpy as np
import pytest
import torch

from src.analysis.hallucination import (
    INTERPOLATION,
    INVALID,
    TRUE_MODE,
    DiagonalReport,
    classification_threshold,
    classify_sample,
    classify_samples,
    diagonal_avoidance_check,
    diagonal_pairs,
    hallucination_rates,
)
from src.diffusion.geometry import segment_frame
from src.diffusion.mixture import build_mixture
from src.diffusion.samplers import TrajectoryBatch
from src.utils.errors import ConfigError


def test_threshold_switches_with_dimension():
    low = build_mixture([[0.0] * 10, [1.0] * 10], sigma=0.1)
    high = build_mixture([[0.0] * 16, [1.0] * 16], sigma=0.1)
    assert classification_threshold(low) == pytest.approx(0.5)
    assert classification_threshold(high) == pytest.approx(0.1 * (4.0 + 4.0))


def test_classify_samples(grid25):
    points = torch.stack(
        [
            grid25.modes[7] + 0.5 * grid25.sigma,
            segment_frame(grid25, 12, 13).point(0.4),
            torch.tensor([10.0, 10.0], dtype=torch.float64),
        ]
    )
    labels = classify_samples(grid25, points)
    assert labels.codes.tolist() == [TRUE_MODE, INTERPOLATION, INVALID]
    assert labels.i.tolist() == [7, 12, -1]
    assert labels.j.tolist() == [-1, 13, -1]
    assert classify_sample(grid25, points[1]).kind == "interpolation"
    assert classify_sample(grid25, points[0]).i == 7


def test_shortest_segment_wins_a_tie():
    gmm = build_mixture([[0.0], [1.0], [2.0]], sigma=0.01)
    # 0.5 lies on segments (0, 1) and (0, 2)
    labels = classify_samples(gmm, torch.tensor([[0.5]], dtype=torch.float64))
    assert (labels.i[0], labels.j[0]) == (0, 1)


def test_classify_sample_rejects_nan(grid25):
    with pytest.raises(ConfigError):
        classify_sample(grid25, torch.tensor([math.nan, 0.0]))


def test_hallucination_rates():
    row = hallucination_rates([TRUE_MODE, INTERPOLATION, INTERPOLATION, INVALID])
    assert row["n"] == 4 and row["n_invalid"] == 1 and row["n_true_mode"] == 1
    assert row["rate_inclusive"] == pytest.approx(0.5)
    assert row["rate_exclusive"] == pytest.approx(2.0 / 3.0)
    assert row["rate_inclusive_low"] < 0.5 < row["rate_inclusive_high"]


def test_rates_without_valid_samples_are_undefined():
    row = hallucination_rates([INVALID, INVALID])
    assert row["rate_inclusive"] == 0.0
    assert row["rate_exclusive"] is None


def test_diagonal_pairs(grid25):
    mask = diagonal_pairs(grid25)
    assert int(mask.sum()) == 2 * 32
    assert bool(mask[0, 6]) and bool(mask[1, 5])
    assert not bool(mask[0, 1]) and not bool(mask[0, 12])
    with pytest.raises(ConfigError):
        diagonal_pairs(build_mixture([[0.0], [1.0]]))


def test_diagonal_report_merge():
    a = DiagonalReport(7.0, 1e-3, n_states=2, max_min_responsibility=1e-5, violations=0, n_interpolations=1)
    b = DiagonalReport(7.0, 1e-3, n_states=3, max_min_responsibility=None, violations=1, n_diagonal_interpolations=1)
    merged = a.merge(b)
    assert merged.n_states == 5
    assert merged.max_min_responsibility == 1e-5
    assert merged.violations == 1
    assert merged.n_interpolations == 1 and merged.n_diagonal_interpolations == 1


def test_diagonal_check_counts_diagonal_interpolations(grid25, schedule):
    centre = segment_frame(grid25, 0, 6).midpoint
    states = torch.stack([grid25.modes[[3, 8]], torch.stack([centre, grid25.modes[20]])])
    batch = TrajectoryBatch(times=np.array([1, 0]), states=states, traj_ids=np.arange(2), seed=0)
    report = diagonal_avoidance_check(batch, grid25, schedule, kappa=7.0)
    assert report.threshold == pytest.approx(math.exp(-7.0))
    assert report.n_interpolations == 1
    assert report.n_diagonal_interpolations == 1
