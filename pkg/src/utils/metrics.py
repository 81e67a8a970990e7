from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import stats


@dataclass(frozen=True)
class Proportion:
    count: int
    total: int
    rate: Optional[float]
    low: Optional[float]
    high: Optional[float]

    @property
    def se(self) -> Optional[float]:
        if not self.total:
            return None
        return float(np.sqrt(self.rate * (1.0 - self.rate) / self.total))

    def as_row(self, prefix: str) -> dict:
        return {
            f"{prefix}_count": self.count,
            f"{prefix}_total": self.total,
            prefix: self.rate,
            f"{prefix}_se": self.se,
            f"{prefix}_low": self.low,
            f"{prefix}_high": self.high,
        }


def wilson_interval(count: int, total: int, alpha: float = 0.05) -> Proportion:
    """Binomial rate with a Wilson interval; an empty denominator is undefined, not zero."""
    count, total = int(count), int(total)
    if total == 0:
        return Proportion(count, total, None, None, None)
    interval = stats.binomtest(count, total).proportion_ci(confidence_level=1.0 - alpha, method="wilson")
    return Proportion(count, total, count / total, float(interval.low), float(interval.high))


def standard_error(values: Sequence[float]) -> float:
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return float("nan")
    return float(values.std(ddof=1) / np.sqrt(values.size))


def normal_halfwidth(values, axis: int = 0, level: float = 0.95) -> np.ndarray:
    """Half-width of the normal-approximation interval of the mean along ``axis``."""
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[axis]
    z = stats.norm.ppf(0.5 + level / 2.0)
    return z * values.std(axis=axis, ddof=1) / np.sqrt(n)


def halfwidth_from_moments(total: np.ndarray, total_sq: np.ndarray, count: np.ndarray, level: float = 0.95):
    """Mean and interval half-width from running sums, for block-wise reductions."""
    count = np.asarray(count, dtype=np.float64)
    mean = total / count
    var = np.maximum(total_sq / count - mean**2, 0.0) * count / np.maximum(count - 1.0, 1.0)
    z = stats.norm.ppf(0.5 + level / 2.0)
    return mean, z * np.sqrt(var / count)
