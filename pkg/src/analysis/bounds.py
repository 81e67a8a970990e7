"""Terminal midpoint bound for DDPM and the Brownian confinement estimate it rests on."""
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from src.diffusion.geometry import SegmentFrame
from src.diffusion.samplers import ScoreSource, bisector_drift, bisector_sde_paths, orthogonal_offsets
from src.diffusion.schedule import NoiseSchedule
from src.utils import get_logger, seeding
from src.utils.errors import ConfigError
from src.utils.metrics import standard_error

log = get_logger(__name__)

DEFAULT_A_STAR = 0.280
N_INTERVALS = 50


@dataclass
class DdpmBoundInputs:
    """Drift constants on the span t_start → 0, in bisector units (unit time steps).

    ``theta`` is a length at t = 0; ``K`` is indexed like ``times``.
    """

    eta_max: float
    eta_integral: float
    K: np.ndarray = field(repr=False)
    times: np.ndarray = field(repr=False)
    lambda_rep: float = 0.0
    theta: float = 0.0
    tau3_span: int = 0

    @property
    def K_integral(self) -> float:
        return float(np.sum(self.K))

    @property
    def repulsion_ok(self) -> bool:
        return self.lambda_rep > 0


def ddpm_terminal_bound(inputs: DdpmBoundInputs, theta: Optional[float] = None) -> float:
    """(4/π)exp(−π²∫η / (16(1+∫K)²ϑ²)) + 2exp(−λ_rep ϑ²/(2η_max)), capped at 1."""
    theta = inputs.theta if theta is None else theta
    if theta <= 0:
        return 1.0
    confinement = 4.0 / math.pi * math.exp(
        -(math.pi**2) * inputs.eta_integral / (16.0 * (1.0 + inputs.K_integral) ** 2 * theta**2)
    )
    if inputs.lambda_rep <= 0:
        return 1.0
    exit_term = 2.0 * math.exp(-inputs.lambda_rep * theta**2 / (2.0 * inputs.eta_max))
    return min(1.0, confinement + exit_term)


DriftFn = Callable[[torch.Tensor, int, Optional[torch.Tensor]], torch.Tensor]


def estimate_drift_bounds(
    segment: SegmentFrame,
    schedule: NoiseSchedule,
    score_source: Optional[ScoreSource],
    t_start: int,
    n_samples: int = 1000,
    theta: float = 0.15,
    a_star: float = DEFAULT_A_STAR,
    z_bound: float = 0.0,
    seed: int = 0,
    drift: Optional[DriftFn] = None,
    n_intervals: int = N_INTERVALS,
) -> DdpmBoundInputs:
    """K(t) and λ_rep from sampled b(a, t) on the span t_start..1.

    ``theta`` and ``a_star`` are dimensionless (fractions of ℓ_t). K(t) scans |a| ≤ 2ϑℓ_t and
    λ_rep scans ϑℓ_t ≤ |a| ≤ a*ℓ_t, both with ``n_intervals`` points per side. ``n_samples``
    orthogonal offsets are spread evenly over the span, each reused on every a point of its step.
    """
    if n_samples < 1:
        raise ConfigError(f"n_samples must be positive, got {n_samples}")
    if not 0 < theta < a_star:
        raise ConfigError(f"need 0 < theta < a_star, got theta={theta}, a_star={a_star}")
    if drift is None:
        if score_source is None:
            raise ConfigError("estimate_drift_bounds needs a score source or a drift override")

        def drift(a, t, z):
            return bisector_drift(segment, schedule, score_source, a, t, z)

    times = np.arange(t_start, 0, -1)
    per_step = max(1, math.ceil(n_samples / len(times))) if z_bound > 0 else 1
    stream = seeding.NoiseStream(seed, np.arange(per_step), segment.mode_i.shape[0])
    K = np.empty(len(times))
    lambda_rep = math.inf
    for k, t in enumerate(times):
        ell_t = segment.ell * math.sqrt(schedule.alpha_bar(int(t)))
        near = torch.linspace(2.0 * theta * ell_t / n_intervals, 2.0 * theta * ell_t, n_intervals, dtype=torch.float64)
        far = torch.linspace(theta * ell_t, a_star * ell_t, n_intervals, dtype=torch.float64)
        a = torch.cat([near, -near, far, -far])
        z = None
        if z_bound > 0:
            radii = stream.uniform(int(t), seeding.PURPOSE_RADIUS, -z_bound, z_bound)
            z = orthogonal_offsets(segment.u, stream.normal(int(t), seeding.PURPOSE_ORTH), radii)
            z = z.unsqueeze(1).expand(-1, a.shape[0], -1)
        grid = a.unsqueeze(0).expand(per_step, -1)
        b = drift(grid, int(t), z)
        n_near = 2 * n_intervals
        K[k] = float((b[:, :n_near].abs() / grid[:, :n_near].abs()).max())
        lambda_rep = min(lambda_rep, float((-b[:, n_near:] / grid[:, n_near:]).min()))
    eta = 0.5 * schedule.betas.numpy()[times - 1]
    inputs = DdpmBoundInputs(
        eta_max=float(eta.max()),
        eta_integral=float(eta.sum()),
        K=K,
        times=times,
        lambda_rep=lambda_rep,
        theta=theta * segment.ell,
        tau3_span=int(t_start),
    )
    if not inputs.repulsion_ok:
        log.warning(f"repulsion check failed on segment ({segment.i}, {segment.j}): lambda_rep={lambda_rep:.3e}")
    return inputs


@dataclass(frozen=True)
class MidpointProbability:
    theta: float
    probability: float
    se: float
    bound: float

    @property
    def ok(self) -> bool:
        return self.probability <= self.bound + 3.0 * self.se


def terminal_midpoint_probability(
    segment: SegmentFrame,
    schedule: NoiseSchedule,
    score_source: ScoreSource,
    inputs: DdpmBoundInputs,
    thetas,
    n_paths: int = 10_000,
    a_init: float = 0.0,
    z_bound: float = 0.0,
    seed: int = 0,
) -> list:
    """Monte Carlo P(|A_0| ≤ ϑ) from the bisector SDE, one row per length ϑ."""
    _, paths = bisector_sde_paths(segment, schedule, score_source, inputs.tau3_span, a_init, z_bound, n_paths, seed)
    terminal = paths[-1].abs().numpy()
    rows = []
    for theta in thetas:
        hits = (terminal <= theta).astype(np.float64)
        rows.append(MidpointProbability(float(theta), float(hits.mean()), standard_error(hits), ddpm_terminal_bound(inputs, theta)))
    return rows


@dataclass(frozen=True)
class ConfinementResult:
    variance: float
    half_width: float
    empirical: float
    se: float
    bound: float

    @property
    def bound_capped(self) -> float:
        return min(1.0, self.bound)

    @property
    def ok(self) -> bool:
        return self.empirical <= self.bound + 3.0 * self.se


def confinement_bound(variance: float, half_width: float) -> float:
    return 4.0 / math.pi * math.exp(-(math.pi**2) * variance / (8.0 * half_width**2))


def brownian_confinement_check(
    variance: float,
    half_width: float,
    n_paths: int = 10_000,
    n_substeps: int = 1000,
    seed: int = 0,
    bridge: bool = True,
) -> ConfinementResult:
    """P(sup|B| ≤ a) for Brownian motion with total variance V, against (4/π)exp(−π²V/(8a²)).

    With ``bridge`` each substep is weighted by the probability that the Brownian bridge between
    its endpoints stays inside, which removes the discrete-monitoring bias.
    """
    if not (variance > 0 and half_width > 0):
        raise ConfigError(f"variance and half_width must be positive, got {variance}, {half_width}")
    dt_var = variance / n_substeps
    survival_all = []
    for _, ids in seeding.blocks_for(n_paths):
        stream = seeding.NoiseStream(seed, ids, 1)
        b = torch.zeros(len(ids), dtype=torch.float64)
        survival = torch.ones(len(ids), dtype=torch.float64)
        for k in range(n_substeps):
            nxt = b + math.sqrt(dt_var) * stream.normal(k)[:, 0]
            inside = nxt.abs() < half_width
            if bridge:
                up = torch.exp(-2.0 * (half_width - b) * (half_width - nxt) / dt_var).clamp(max=1.0)
                down = torch.exp(-2.0 * (half_width + b) * (half_width + nxt) / dt_var).clamp(max=1.0)
                survival = survival * (1.0 - up) * (1.0 - down)
            survival = torch.where(inside, survival, torch.zeros_like(survival))
            b = nxt
        survival_all.append(survival.clamp_min(0.0).numpy())
    values = np.concatenate(survival_all)
    return ConfinementResult(
        variance=variance,
        half_width=half_width,
        empirical=float(values.mean()),
        se=standard_error(values),
        bound=confinement_bound(variance, half_width),
    )
