import math

import pytest
import torch

from src.diffusion.geometry import (
    adjacent_pairs,
    decompose,
    epsilon_from_kappa,
    in_tube,
    nearest_pair,
    perp_distance,
    segment_frame,
)
from src.utils.errors import ConfigError


def test_segment_frame_orders_the_pair(grid25):
    segment = segment_frame(grid25, 5, 0)
    assert (segment.i, segment.j) == (0, 5)
    assert segment.ell == pytest.approx(grid25.lattice_spacing)
    assert float(torch.linalg.norm(segment.u)) == pytest.approx(1.0)
    with pytest.raises(ConfigError):
        segment_frame(grid25, 3, 3)


def test_adjacent_pairs_of_the_lattice(grid25):
    pairs = adjacent_pairs(grid25)
    assert len(pairs) == 40
    assert (0, 1) in pairs and (0, 5) in pairs
    assert (0, 6) not in pairs


def test_decompose(corner_pair):
    coords = decompose(corner_pair, corner_pair.midpoint)
    assert float(coords.xi) == pytest.approx(0.5)
    assert float(coords.A) == pytest.approx(0.0, abs=1e-15)
    assert float(torch.linalg.norm(coords.w)) == pytest.approx(0.0, abs=1e-15)
    coords = decompose(corner_pair, corner_pair.mode_j)
    assert float(coords.xi) == pytest.approx(1.0)
    assert float(coords.A) == pytest.approx(0.5 * corner_pair.ell)


def test_frame_at_time(corner_pair, schedule):
    t = 400
    moved = corner_pair.at_time(schedule, t)
    assert moved.ell == pytest.approx(math.sqrt(schedule.alpha_bar(t)) * corner_pair.ell)
    # at_time always starts from the static frame
    assert moved.at_time(schedule, 0).ell == pytest.approx(corner_pair.ell)


def test_perp_distance_conventions(corner_pair):
    ell = corner_pair.ell
    normal = torch.tensor([-corner_pair.u[1], corner_pair.u[0]], dtype=torch.float64)
    beside = corner_pair.midpoint + 0.3 * normal
    assert float(perp_distance(corner_pair, 0.0, beside)) == pytest.approx(0.3)

    beyond = corner_pair.point(1.2)
    assert float(perp_distance(corner_pair, 0.1, beyond)) == pytest.approx(0.1 * ell)
    assert float(perp_distance(corner_pair, 0.1, beyond, convention="length")) == pytest.approx(0.2 * ell - 0.1)
    assert float(perp_distance(corner_pair, 0.5, beyond)) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ConfigError):
        perp_distance(corner_pair, 0.1, beyond, convention="radians")
    with pytest.raises(ConfigError):
        perp_distance(corner_pair, -0.1, beyond)


def test_in_tube(corner_pair):
    normal = torch.tensor([-corner_pair.u[1], corner_pair.u[0]], dtype=torch.float64)
    points = torch.stack([corner_pair.midpoint + 0.01 * normal, corner_pair.midpoint + 0.05 * normal])
    assert in_tube(corner_pair, 0.02, points).tolist() == [True, False]


def test_nearest_pair_batch(grid25, schedule):
    t = 50
    root = math.sqrt(schedule.alpha_bar(t))
    x = root * torch.stack([segment_frame(grid25, 0, 1).midpoint, segment_frame(grid25, 12, 17).point(0.3)])
    i, j, margin = nearest_pair(grid25, schedule, x, t)
    assert i.tolist() == [0, 12]
    assert j.tolist() == [1, 17]
    assert torch.all(margin > 0)


def test_nearest_pair_single_state(grid25, schedule):
    x = grid25.modes[24] + 0.001
    i, j, _ = nearest_pair(grid25, schedule, x, 0)
    assert int(j) == 24 and int(i) in (19, 23)


def test_epsilon_from_kappa():
    assert epsilon_from_kappa(25, 7.0) == pytest.approx(25.0 * math.exp(-7.0))
    with pytest.raises(ConfigError):
        epsilon_from_kappa(25, 0.0)
