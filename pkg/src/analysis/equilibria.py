"""Equilibria of the parallel dynamics along a segment, the midpoint saddle and its spectrum.

On a segment (w = 0) the rescaled ODE restricted to ξ reads dξ/du = F(ξ) with
F(ξ) = ⟨μ̂(y(ξ)) − y(ξ), u⟩ / ℓ. With only the pair present F reduces to
F_ij(ξ) = ς(log(π_j/π_i) + a(ξ − ½)) − ξ with a = ℓ²/σ̃².
"""
import math
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
import torch
from scipy import optimize
from scipy.special import expit, logit

from src.diffusion.geometry import SegmentFrame, epsilon_from_kappa
from src.diffusion.mixture import GaussianMixture, rescaled_drift
from src.diffusion.schedule import NoiseSchedule, StepGrid
from src.utils import get_logger
from src.utils.errors import ConfigError

log = get_logger(__name__)

XTOL = 1e-12
ROOT_BRACKET = 0.25
SADDLE_HALF_WIDTH = 0.1


def parallel_drift(gmm: GaussianMixture, segment: SegmentFrame, sigma_tilde_sq: float, xi) -> np.ndarray:
    """Full N-mode F(ξ) on the segment."""
    xi = torch.as_tensor(np.atleast_1d(xi), dtype=torch.float64)
    drift = rescaled_drift(gmm, segment.point(xi), sigma_tilde_sq)
    return (drift @ segment.u / segment.ell).numpy()


def pair_drift(ell: float, sigma_tilde_sq: float, xi, weights=(0.5, 0.5)):
    a = ell**2 / sigma_tilde_sq
    return expit(math.log(weights[1] / weights[0]) + a * (np.asarray(xi) - 0.5)) - np.asarray(xi)


def pair_drift_slope(ell: float, sigma_tilde_sq: float, xi, weights=(0.5, 0.5)):
    a = ell**2 / sigma_tilde_sq
    gamma = expit(math.log(weights[1] / weights[0]) + a * (np.asarray(xi) - 0.5))
    return a * gamma * (1.0 - gamma) - 1.0


def central_slope(f: Callable[[float], float], x: float, h: float = 1e-7) -> float:
    return (f(x + h) - f(x - h)) / (2.0 * h)


def bisect_root(f: Callable[[float], float], lo: float, hi: float) -> Optional[float]:
    f_lo, f_hi = f(lo), f(hi)
    if f_lo == 0.0:
        return lo
    if f_hi == 0.0:
        return hi
    if f_lo * f_hi > 0:
        return None
    return optimize.bisect(f, lo, hi, xtol=XTOL, rtol=4 * np.finfo(float).eps)


@dataclass(frozen=True)
class ModeEquilibria:
    xi_i: Optional[float]
    xi_j: Optional[float]
    slope_i: Optional[float]
    slope_j: Optional[float]
    regime_ok: bool

    @property
    def stable(self) -> bool:
        slopes = (self.slope_i, self.slope_j)
        return all(s is not None and s < 0 for s in slopes)


def find_mode_equilibria(
    segment: SegmentFrame, sigma_tilde_sq: float, gmm: GaussianMixture, kappa: float = 7.0, bracket: float = ROOT_BRACKET
) -> ModeEquilibria:
    """Roots of the full parallel drift in [−a, a] and [1 − a, 1 + a]."""
    if not sigma_tilde_sq > 0:
        raise ConfigError(f"sigma_tilde_sq must be positive, got {sigma_tilde_sq}")

    def f(xi: float) -> float:
        return float(parallel_drift(gmm, segment, sigma_tilde_sq, xi)[0])

    roots, slopes = [], []
    for lo, hi in ((-bracket, bracket), (1.0 - bracket, 1.0 + bracket)):
        root = bisect_root(f, lo, hi)
        roots.append(root)
        slopes.append(None if root is None else central_slope(f, root))
    regime_ok = segment.ell**2 / sigma_tilde_sq >= 4.0 * kappa * gmm.dim
    return ModeEquilibria(roots[0], roots[1], slopes[0], slopes[1], regime_ok)


@dataclass(frozen=True)
class InteriorSaddle:
    present: bool
    xi_pair: Optional[float] = None
    slope_pair: Optional[float] = None
    xi_full: Optional[float] = None
    slope_floor: Optional[float] = None
    displacement_bound: Optional[float] = None
    interval: Tuple[float, float] = (None, None)
    interval_shrunk: bool = False

    @property
    def displacement(self) -> Optional[float]:
        if self.xi_full is None or self.xi_pair is None:
            return None
        return abs(self.xi_full - self.xi_pair)


def pair_saddle(ell: float, sigma_tilde_sq: float, weights=(0.5, 0.5)) -> Optional[float]:
    """Interior root of F_ij, bracketed by the ξ range where F_ij is increasing."""
    a = ell**2 / sigma_tilde_sq
    if a <= 4.0:
        return None
    if weights[0] == weights[1]:
        return 0.5
    bias = math.log(weights[1] / weights[0])
    half = math.sqrt(0.25 - 1.0 / a)
    lo = 0.5 + (logit(0.5 - half) - bias) / a
    hi = 0.5 + (logit(0.5 + half) - bias) / a
    return bisect_root(lambda xi: float(pair_drift(ell, sigma_tilde_sq, xi, weights)), lo, hi)


def find_interior_saddle(
    segment: SegmentFrame,
    sigma_tilde_sq: float,
    weights=(0.5, 0.5),
    gmm: Optional[GaussianMixture] = None,
    kappa: float = 7.0,
    half_width: float = SADDLE_HALF_WIDTH,
) -> InteriorSaddle:
    """Pair saddle from the log-odds fixed point; with ``gmm`` also the full-N saddle and the ε/m bound."""
    ell = segment.ell
    xi_pair = pair_saddle(ell, sigma_tilde_sq, weights)
    if xi_pair is None:
        return InteriorSaddle(present=False)
    slope_pair = float(pair_drift_slope(ell, sigma_tilde_sq, xi_pair, weights))
    if gmm is None:
        return InteriorSaddle(present=True, xi_pair=xi_pair, slope_pair=slope_pair)

    grid = np.linspace(xi_pair - half_width, xi_pair + half_width, 401)
    slopes = pair_drift_slope(ell, sigma_tilde_sq, grid, weights)
    shrunk = bool(slopes.min() <= 0.0)
    if shrunk:
        keep = slopes >= 0.5 * slope_pair
        centre = int(np.argmin(np.abs(grid - xi_pair)))
        lo_idx = centre
        while lo_idx > 0 and keep[lo_idx - 1]:
            lo_idx -= 1
        hi_idx = centre
        while hi_idx < len(grid) - 1 and keep[hi_idx + 1]:
            hi_idx += 1
        grid, slopes = grid[lo_idx : hi_idx + 1], slopes[lo_idx : hi_idx + 1]
    floor = float(slopes.min())
    interval = (float(grid[0]), float(grid[-1]))
    xi_full = bisect_root(lambda xi: float(parallel_drift(gmm, segment, sigma_tilde_sq, xi)[0]), *interval)
    return InteriorSaddle(
        present=True,
        xi_pair=xi_pair,
        slope_pair=slope_pair,
        xi_full=xi_full,
        slope_floor=floor,
        displacement_bound=epsilon_from_kappa(gmm.n_modes, kappa) / floor if floor > 0 else None,
        interval=interval,
        interval_shrunk=shrunk,
    )


def midpoint_lambda(ell: float, sigma_tilde_sq: float) -> float:
    return ell**2 / (4.0 * sigma_tilde_sq) - 1.0


@dataclass(frozen=True)
class MidpointSpectrum:
    t: int
    lambda_analytic: float
    eigenvalues: np.ndarray
    regime_ok: bool

    @property
    def n_positive(self) -> int:
        return int((self.eigenvalues > 0).sum())

    @property
    def relative_error(self) -> float:
        return abs(float(self.eigenvalues.max()) - self.lambda_analytic) / max(abs(self.lambda_analytic), 1e-300)


def numeric_jacobian(drift: Callable[[torch.Tensor], torch.Tensor], point: torch.Tensor, h: float) -> torch.Tensor:
    """Central-difference Jacobian, all 2ϖ probes evaluated as one batch."""
    dim = point.shape[0]
    offsets = h * torch.eye(dim, dtype=torch.float64)
    probes = torch.cat([point + offsets, point - offsets])
    values = drift(probes)
    return ((values[:dim] - values[dim:]) / (2.0 * h)).T


def midpoint_eigenvalues(
    segment: SegmentFrame,
    schedule: NoiseSchedule,
    t: int,
    gmm: GaussianMixture,
    drift: Optional[Callable[[torch.Tensor], torch.Tensor]] = None,
    kappa: float = 7.0,
    h_rel: float = 1e-6,
) -> MidpointSpectrum:
    """Analytic λ_t against the numeric spectrum of the rescaled drift at the midpoint."""
    s2 = schedule.sigma_tilde_sq(t)
    if drift is None:

        def drift(y):
            return rescaled_drift(gmm, y, s2)

    jac = numeric_jacobian(drift, segment.midpoint, h_rel * segment.ell)
    eigenvalues = torch.linalg.eigvals(jac).real.numpy()
    return MidpointSpectrum(
        t=int(t),
        lambda_analytic=midpoint_lambda(segment.ell, s2),
        eigenvalues=np.sort(eigenvalues)[::-1],
        regime_ok=segment.ell**2 >= 4.0 * kappa * s2 * gmm.dim,
    )


def drift_from_score(score_source, t: int) -> Callable[[torch.Tensor], torch.Tensor]:
    """Rescaled drift implied by any score source: dy/du = (σ_t²/√ᾱ_t) s(√ᾱ_t y)."""
    schedule = score_source.schedule
    root = math.sqrt(schedule.alpha_bar(t))
    factor = schedule.sigma_t_sq(t) / root

    def drift(y):
        return factor * score_source.score(root * y, t)

    return drift


@dataclass(frozen=True)
class TrappingSpec:
    tau3: Optional[int]
    tau3_time: int
    theta: float
    lambda_min: float
    lambda_max: float
    Lambda_plus: float
    u_span: float
    entry_window: float
    admissible: bool


def trapping_spec(
    segment: SegmentFrame,
    schedule: NoiseSchedule,
    theta: float,
    tau3: Optional[int] = None,
    grid: Optional[StepGrid] = None,
    tau3_time: Optional[int] = None,
) -> TrappingSpec:
    """Window ϑ·exp(−Λ₊Δu) from which the deterministic flow cannot leave the ϑ-neighbourhood.

    The span is given either as ``tau3`` steps of ``grid`` or directly as a time index.
    """
    if tau3_time is None:
        if tau3 is None or grid is None:
            raise ConfigError("trapping_spec needs tau3 with a grid, or tau3_time")
        tau3_time = grid.time_at_remaining(tau3)
    if not 0.0 < theta:
        raise ConfigError(f"theta must be positive, got {theta}")
    s2 = schedule.sigma_tilde_sq_all.numpy()[: tau3_time + 1]
    lambdas = segment.ell**2 / (4.0 * s2) - 1.0
    lam_min, lam_max = float(lambdas.min()), float(lambdas.max())
    big_lambda = lam_max + 2.0 * (1.0 + lam_max) ** 2 * theta
    u_span = float(schedule.u_all[0] - schedule.u_all[tau3_time])
    admissible = theta <= 0.5 and theta < lam_min / (2.0 * (1.0 + lam_max) ** 2)
    return TrappingSpec(
        tau3=tau3,
        tau3_time=int(tau3_time),
        theta=theta,
        lambda_min=lam_min,
        lambda_max=lam_max,
        Lambda_plus=big_lambda,
        u_span=u_span,
        entry_window=theta * math.exp(-big_lambda * u_span),
        admissible=admissible,
    )


def integrate_parallel_flow(
    ell: float, schedule: NoiseSchedule, xi0, t_start: int, weights=(0.5, 0.5), substeps: int = 8
) -> Tuple[np.ndarray, np.ndarray]:
    """RK4 of dξ/du = F_ij(ξ) from t_start to 0; a = ℓ²/σ̃² is interpolated linearly within each step."""
    xi = np.array(xi0, dtype=np.float64, ndmin=1)
    u = schedule.u_all.numpy()
    s2 = schedule.sigma_tilde_sq_all.numpy()
    bias = math.log(weights[1] / weights[0])
    times, path = [t_start], [xi.copy()]

    def rhs(x, a):
        return expit(bias + a * (x - 0.5)) - x

    for t in range(t_start, 0, -1):
        a0, a1 = ell**2 / s2[t], ell**2 / s2[t - 1]
        h = (u[t - 1] - u[t]) / substeps
        for k in range(substeps):
            start, mid, end = (a0 + (a1 - a0) * (k + f) / substeps for f in (0.0, 0.5, 1.0))
            k1 = rhs(xi, start)
            k2 = rhs(xi + 0.5 * h * k1, mid)
            k3 = rhs(xi + 0.5 * h * k2, mid)
            k4 = rhs(xi + h * k3, end)
            xi = xi + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        times.append(t - 1)
        path.append(xi.copy())
    return np.asarray(times), np.stack(path)


def trapping_window_check(
    spec: TrappingSpec, ell: float, schedule: NoiseSchedule, n_grid: int = 100, window: Optional[float] = None
) -> int:
    """Initial points strictly inside ±window that leave |ξ − ½| < ϑ during the span.

    ``window`` defaults to the entry window; a window that underflowed to zero is refused.
    """
    window = spec.entry_window if window is None else float(window)
    if not window > 0.0:
        raise ConfigError(f"window check needs a positive half-width, got {window}")
    offsets = np.linspace(-window, window, n_grid + 2)[1:-1]
    _, path = integrate_parallel_flow(ell, schedule, 0.5 + offsets, spec.tau3_time)
    escaped = (np.abs(path - 0.5) >= spec.theta).any(axis=0)
    return int(escaped.sum())
