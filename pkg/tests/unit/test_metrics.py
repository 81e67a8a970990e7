import math

import numpy as np
import pytest

from src.utils.metrics import halfwidth_from_moments, normal_halfwidth, standard_error, wilson_interval


def test_wilson_interval():
    p = wilson_interval(5, 100)
    assert p.rate == 0.05
    assert 0.0 < p.low < 0.05 < p.high < 0.12
    assert p.se == pytest.approx(math.sqrt(0.05 * 0.95 / 100))


def test_wilson_interval_edges():
    zero = wilson_interval(0, 50)
    assert zero.rate == 0.0 and zero.low == pytest.approx(0.0, abs=1e-12) and zero.high > 0.0
    full = wilson_interval(50, 50)
    assert full.high == pytest.approx(1.0) and full.low < 1.0


def test_empty_denominator_is_undefined():
    p = wilson_interval(0, 0)
    assert p.rate is None and p.low is None and p.high is None and p.se is None
    row = p.as_row("rate")
    assert row["rate"] is None and row["rate_total"] == 0


def test_standard_error():
    assert math.isnan(standard_error([1.0]))
    assert standard_error([1.0, 3.0]) == pytest.approx(1.0)


def test_halfwidths_agree():
    values = [[1.0, 2.0], [2.0, 4.0], [3.0, 9.0], [6.0, 1.0]]
    direct = normal_halfwidth(values)
    columns = list(zip(*values))
    total = [sum(c) for c in columns]
    total_sq = [sum(v * v for v in c) for c in columns]
    mean, half = halfwidth_from_moments(np.asarray(total), np.asarray(total_sq), [4, 4])
    assert list(mean) == pytest.approx([3.0, 4.0])
    assert list(half) == pytest.approx(list(direct))
