"""Effect of a score error field ψ on the midpoint saddle and on DDPM escape."""
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from src.analysis.equilibria import bisect_root, central_slope, pair_drift, pair_drift_slope, pair_saddle
from src.diffusion.geometry import SegmentFrame
from src.diffusion.samplers import orthogonal_offsets
from src.diffusion.schedule import NoiseSchedule
from src.utils import seeding
from src.utils.errors import ConfigError

ErrorField = Callable[[torch.Tensor, int], torch.Tensor]


@dataclass
class ScoreErrorSpec:
    """Sampled size and Lipschitz constant of ψ on the tube, per time index."""

    psi: ErrorField = field(repr=False)
    kind: str
    times: np.ndarray
    rho: np.ndarray
    rho_bar: np.ndarray
    lipschitz: np.ndarray

    def at(self, values: np.ndarray, t: int) -> float:
        """Value at the recorded time nearest to t."""
        return float(values[int(np.argmin(np.abs(self.times - t)))])


def tube_samples(segment: SegmentFrame, schedule: NoiseSchedule, t: int, eps: float, stream: seeding.NoiseStream):
    """Points √ᾱ_t(μ_i + ξℓu) + r·n with ξ ∈ [−ε, 1+ε] and |r| ≤ ε·ℓ_t, n ⟂ u."""
    xi = stream.uniform(t, seeding.PURPOSE_OFFSET, -eps, 1.0 + eps)
    seg_t = segment.at_time(schedule, t)
    radii = stream.uniform(t, seeding.PURPOSE_RADIUS, -eps * seg_t.ell, eps * seg_t.ell)
    return seg_t.point(xi) + orthogonal_offsets(seg_t.u, stream.normal(t, seeding.PURPOSE_ORTH), radii)


def estimate_error_spec(
    psi: ErrorField,
    segment: SegmentFrame,
    schedule: NoiseSchedule,
    times: Sequence[int],
    eps: float,
    n_samples: int = 1000,
    seed: int = 0,
    kind: Optional[str] = None,
) -> ScoreErrorSpec:
    """ϱ(t) = max ‖ψ‖ over tube samples, ϱ̄ = σ_t²ϱ/√ᾱ_t, and a Lipschitz estimate from nearby pairs."""
    if n_samples < 2:
        raise ConfigError(f"n_samples must be at least 2, got {n_samples}")
    times = np.asarray(times, dtype=np.int64)
    stream = seeding.NoiseStream(seed, np.arange(n_samples), segment.mode_i.shape[0])
    rho, lipschitz = np.empty(len(times)), np.empty(len(times))
    for k, t in enumerate(times):
        t = int(t)
        x = tube_samples(segment, schedule, t, eps, stream)
        step = 1e-3 * segment.ell * math.sqrt(schedule.alpha_bar(t)) * stream.normal(t, seeding.PURPOSE_STEP)
        values = psi(x, t)
        shifted = psi(x + step, t)
        rho[k] = float(torch.linalg.norm(values, dim=-1).max())
        ratio = torch.linalg.norm(shifted - values, dim=-1) / torch.linalg.norm(step, dim=-1).clamp_min(1e-300)
        lipschitz[k] = float(ratio.max())
    factor = schedule.sigma_t_sq_all.numpy()[times] / np.sqrt(schedule.alpha_bars.numpy()[times])
    return ScoreErrorSpec(
        psi=psi,
        kind=kind or getattr(psi, "kind", "custom"),
        times=times,
        rho=rho,
        rho_bar=factor * rho,
        lipschitz=lipschitz,
    )


@dataclass
class PerturbationResult:
    t: int
    xi_saddle: Optional[float]
    xi_perturbed: Optional[float]
    destroyed: bool
    lambda_t: Optional[float]
    rho_bar: float
    shift: Optional[float] = None
    shift_bound: Optional[float] = None
    slope_perturbed: Optional[float] = None
    eigen_shift: Optional[float] = None
    directional: Optional[float] = None
    slope_predicted: Optional[float] = None
    r_a_max: Optional[float] = None
    escape_ok: Optional[bool] = None
    lambda_rep_reduced: Optional[float] = None

    @property
    def stabilized(self) -> bool:
        return self.slope_perturbed is not None and self.slope_perturbed < 0


def parallel_error(psi: ErrorField, segment: SegmentFrame, schedule: NoiseSchedule, t: int, xi) -> np.ndarray:
    """e_t(ξ) = ⟨σ_t²ψ(√ᾱ_t y(ξ))/√ᾱ_t, u⟩ / ℓ, the error term of the parallel drift."""
    root = math.sqrt(schedule.alpha_bar(t))
    xi = torch.as_tensor(np.atleast_1d(xi), dtype=torch.float64)
    x = root * segment.point(xi)
    values = psi(x, t) @ segment.u
    return (schedule.sigma_t_sq(t) / root * values / segment.ell).numpy()


def perturbation_analysis(
    spec: ScoreErrorSpec,
    segment: SegmentFrame,
    schedule: NoiseSchedule,
    t: int,
    weights=(0.5, 0.5),
    theta: float = 0.15,
    lambda_rep: Optional[float] = None,
    span_start: Optional[int] = None,
    h: float = 1e-6,
) -> PerturbationResult:
    """Perturbed saddle, its slope, and the escape-margin check under ψ.

    ``theta`` is dimensionless; the escape check uses the length ϑℓ. With ``lambda_rep`` and
    ``span_start`` given, r_A(t) = β_tϱ(t) is evaluated on span_start..1.
    """
    ell = segment.ell
    s2 = schedule.sigma_tilde_sq(t)
    rho_bar = spec.at(spec.rho_bar, t)
    xi_star = pair_saddle(ell, s2, weights)
    if xi_star is None:
        return PerturbationResult(t, None, None, True, None, rho_bar)
    lambda_t = float(pair_drift_slope(ell, s2, xi_star, weights))

    def base(xi):
        return float(pair_drift(ell, s2, xi, weights))

    def perturbed(xi):
        return base(xi) + float(parallel_error(spec.psi, segment, schedule, t, xi)[0])

    a = ell**2 / s2
    half = 0.9 * (0.5 + math.sqrt(0.25 - 1.0 / a) - xi_star) if weights[0] == weights[1] else 0.1
    half = min(0.1, half)
    xi_new = xi_star if perturbed(xi_star) == 0.0 else bisect_root(perturbed, xi_star - half, xi_star + half)
    result = PerturbationResult(t, xi_star, xi_new, xi_new is None, lambda_t, rho_bar)
    if xi_new is not None:
        root = math.sqrt(schedule.alpha_bar(t))
        x = root * segment.point(torch.tensor([xi_new], dtype=torch.float64))
        step = h * ell * root
        probes = torch.cat([x + step * segment.u, x - step * segment.u])
        values = spec.psi(probes, t) @ segment.u
        grad_uu = float(values[0] - values[1]) / (2.0 * step)
        result.shift = abs(xi_new - xi_star)
        result.shift_bound = 2.0 * rho_bar / (ell * lambda_t)
        result.slope_perturbed = central_slope(perturbed, xi_new, h)
        result.eigen_shift = result.slope_perturbed - central_slope(base, xi_new, h)
        result.directional = schedule.sigma_t_sq(t) * grad_uu
        result.slope_predicted = lambda_t + result.directional

    if lambda_rep is not None and span_start is not None:
        span = np.arange(span_start, 0, -1)
        r_a = schedule.betas.numpy()[span - 1] * np.array([spec.at(spec.rho, int(s)) for s in span])
        result.r_a_max = float(r_a.max())
        theta_len = theta * ell
        result.escape_ok = result.r_a_max < lambda_rep * theta_len
        result.lambda_rep_reduced = lambda_rep - result.r_a_max / theta_len
    return result
