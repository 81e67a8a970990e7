"""Orthogonal-distance convergence to the dominant segment, fitted against u-time."""
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from scipy import stats

from src.diffusion.geometry import EXTENSION_CONVENTIONS, nearest_pair
from src.diffusion.mixture import GaussianMixture
from src.diffusion.schedule import NoiseSchedule
from src.utils.errors import ConfigError
from src.utils.metrics import halfwidth_from_moments

DISTANCE_FRAMES = ("rescaled", "x")
MIN_FIT_POINTS = 5
MIN_TRAJECTORIES = 100


@dataclass
class ConvergenceFit:
    slope: Optional[float]
    intercept: Optional[float]
    plateau: float
    fittable: bool
    region: tuple = (None, None)
    r_value: Optional[float] = None
    times: np.ndarray = field(default=None, repr=False)
    u: np.ndarray = field(default=None, repr=False)
    mean: np.ndarray = field(default=None, repr=False)
    halfwidth: np.ndarray = field(default=None, repr=False)


@dataclass
class DistanceMoments:
    """Per-time sums of d⊥ over trajectories, mergeable across blocks."""

    times: np.ndarray
    total: np.ndarray
    total_sq: np.ndarray
    count: np.ndarray

    def merge(self, other: "DistanceMoments") -> "DistanceMoments":
        if not np.array_equal(self.times, other.times):
            raise ConfigError("cannot merge distance moments recorded on different grids")
        return DistanceMoments(
            self.times, self.total + other.total, self.total_sq + other.total_sq, self.count + other.count
        )


def pair_distances(gmm: GaussianMixture, i, j, y, eps: float, convention: str = "fraction") -> torch.Tensor:
    """Batched distance of y[b] to the ε-extended segment (i[b], j[b]) of the static modes."""
    if eps < 0:
        raise ConfigError(f"tube extension must be nonnegative, got {eps}")
    if convention not in EXTENSION_CONVENTIONS:
        raise ConfigError(f"extension convention must be one of {EXTENSION_CONVENTIONS}, got {convention}")
    start, stop = gmm.modes[i], gmm.modes[j]
    span = stop - start
    ell_sq = (span * span).sum(-1)
    # per-row extension: ε in ξ units, or ε/ℓ for length units
    ext = torch.full_like(ell_sq, eps) if convention == "fraction" else eps / ell_sq.sqrt()
    xi = ((y - start) * span).sum(-1) / ell_sq
    xi = torch.maximum(torch.minimum(xi, 1.0 + ext), -ext)
    return torch.linalg.norm(y - start - xi.unsqueeze(-1) * span, dim=-1)


def tube_distances(
    batch, gmm: GaussianMixture, schedule: NoiseSchedule, eps: float, frame: str = "rescaled", convention: str = "fraction"
):
    """d⊥ / √ϖ to the instantaneous dominant pair, shape (K, B).

    ``rescaled`` measures y = x/√ᾱ_t against static modes; ``x`` measures x against diffused modes.
    """
    if frame not in DISTANCE_FRAMES:
        raise ConfigError(f"distance frame must be one of {DISTANCE_FRAMES}, got {frame}")
    out = torch.empty(len(batch.times), batch.states.shape[1], dtype=torch.float64)
    for k, t in enumerate(batch.times):
        t = int(t)
        x = batch.states[k]
        i, j, _ = nearest_pair(gmm, schedule, x, t)
        scale = math.sqrt(schedule.alpha_bar(t))
        dist = pair_distances(gmm, i, j, x / scale, eps, convention)
        out[k] = dist if frame == "rescaled" else dist * scale
    return out / math.sqrt(gmm.dim)


def distance_moments(
    batch, gmm: GaussianMixture, schedule: NoiseSchedule, eps: float, frame: str = "rescaled", convention: str = "fraction"
):
    dist = tube_distances(batch, gmm, schedule, eps, frame, convention).numpy()
    return DistanceMoments(
        times=np.asarray(batch.times),
        total=dist.sum(axis=1),
        total_sq=(dist * dist).sum(axis=1),
        count=np.full(len(batch.times), dist.shape[1], dtype=np.float64),
    )


def fit_region(mean: np.ndarray):
    """Start at the first point below half the initial distance, stop at the first point within 2× plateau."""
    plateau = mean[-1]
    below = np.flatnonzero(mean < 0.5 * mean[0])
    if below.size == 0:
        return None, None
    start = int(below[0])
    near = np.flatnonzero(mean[start:] <= 2.0 * plateau)
    stop = start + int(near[0]) if near.size else len(mean) - 1
    return start, stop


def fit_log_linear(u, mean) -> ConvergenceFit:
    """Least-squares fit of log d⊥ against u over the deterministic fit region."""
    u = np.asarray(u, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    plateau = float(mean[-1])
    start, stop = fit_region(mean)
    if start is None or stop - start + 1 < MIN_FIT_POINTS:
        return ConvergenceFit(None, None, plateau, False, (start, stop), u=u, mean=mean)
    sel = slice(start, stop + 1)
    fit = stats.linregress(u[sel], np.log(np.maximum(mean[sel], 1e-300)))
    return ConvergenceFit(
        slope=float(fit.slope),
        intercept=float(fit.intercept),
        plateau=plateau,
        fittable=True,
        region=(start, stop),
        r_value=float(fit.rvalue),
        u=u,
        mean=mean,
    )


def fit_from_moments(moments: DistanceMoments, schedule: NoiseSchedule) -> ConvergenceFit:
    if moments.count.min() < MIN_TRAJECTORIES:
        raise ConfigError(f"convergence fit needs at least {MIN_TRAJECTORIES} trajectories, got {int(moments.count.min())}")
    mean, halfwidth = halfwidth_from_moments(moments.total, moments.total_sq, moments.count)
    u = schedule.u_all.numpy()[moments.times]
    result = fit_log_linear(u, mean)
    result.times = moments.times
    result.halfwidth = halfwidth
    return result


def fit_tube_convergence(batch, gmm: GaussianMixture, schedule: NoiseSchedule, eps: float, frame: str = "rescaled"):
    return fit_from_moments(distance_moments(batch, gmm, schedule, eps, frame), schedule)


@dataclass(frozen=True)
class InitialDistanceCheck:
    phi: float
    threshold: float
    fraction: float
    guarantee: float
    n: int


def initial_distance_check(batch, gmm: GaussianMixture, schedule: NoiseSchedule, phi: float) -> InitialDistanceCheck:
    """Fraction of x_T with d⊥(x_T, L_T) ≤ √(ϖ(1+φ)) against the guarantee 1 − 2exp(−ϖφ²/8)."""
    if not phi > 0:
        raise ConfigError(f"phi must be positive, got {phi}")
    t = int(batch.times[0])
    x = batch.states[0]
    i, j, _ = nearest_pair(gmm, schedule, x, t)
    scale = math.sqrt(schedule.alpha_bar(t))
    dist = pair_distances(gmm, i, j, x / scale, 0.0) * scale
    threshold = math.sqrt(gmm.dim * (1.0 + phi))
    return InitialDistanceCheck(
        phi=phi,
        threshold=threshold,
        fraction=float((dist <= threshold).double().mean()),
        guarantee=max(0.0, 1.0 - 2.0 * math.exp(-gmm.dim * phi**2 / 8.0)),
        n=int(x.shape[0]),
    )
