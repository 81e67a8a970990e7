"""Reverse-process samplers generic over a score source.

DDPM uses the ancestral update, DDIM the deterministic/η update, and the hybrid switches from DDIM to
a few ancestral steps. Trajectories are simulated in batches; every random draw comes from a
:class:`~src.utils.seeding.NoiseStream` so a trajectory's path depends only on its id and the seed.
"""
import abc
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from src.diffusion.geometry import SegmentFrame
from src.diffusion.mixture import GaussianMixture, score_exact
from src.diffusion.schedule import NoiseSchedule, StepGrid
from src.utils import get_logger, seeding
from src.utils.errors import ConfigError, NumericFailure

log = get_logger(__name__)

SAMPLER_KINDS = ("ddpm", "ddim", "hybrid")
SCORE_CONVENTIONS = ("alpha", "sigma")


class ScoreSource(abc.ABC):
    kind: str = "abstract"

    def __init__(self, schedule: NoiseSchedule):
        self.schedule = schedule

    @abc.abstractmethod
    def score(self, x: torch.Tensor, t: int) -> torch.Tensor:
        ...

    def eps(self, x: torch.Tensor, t: int) -> torch.Tensor:
        return -math.sqrt(1.0 - self.schedule.alpha_bar(t)) * self.score(x, t)


class ExactScore(ScoreSource):
    kind = "exact"

    def __init__(self, gmm: GaussianMixture, schedule: NoiseSchedule):
        super().__init__(schedule)
        self.gmm = gmm

    def score(self, x, t):
        return score_exact(self.gmm, self.schedule, x, t)


def noise_scale(schedule: NoiseSchedule, t: int, convention: str = "alpha") -> float:
    """Divisor turning a noise prediction into a score."""
    if convention == "alpha":
        return math.sqrt(1.0 - schedule.alpha_bar(t))
    if convention == "sigma":
        return math.sqrt(schedule.sigma_t_sq(t))
    raise ConfigError(f"score.convention must be one of {SCORE_CONVENTIONS}, got {convention}")


def eps_to_score(schedule: NoiseSchedule, eps: torch.Tensor, t: int, convention: str = "alpha") -> torch.Tensor:
    return -eps / noise_scale(schedule, t, convention)


def score_to_eps(schedule: NoiseSchedule, score: torch.Tensor, t: int, convention: str = "alpha") -> torch.Tensor:
    return -noise_scale(schedule, t, convention) * score


class LearnedScore(ScoreSource):
    """Adapter around a noise-prediction network ``model(x, t_batch) -> eps``."""

    kind = "learned"

    def __init__(self, model: torch.nn.Module, schedule: NoiseSchedule, convention: str = "alpha"):
        super().__init__(schedule)
        noise_scale(schedule, 1, convention)
        self.model = model.eval()
        self.convention = convention

    @torch.no_grad()
    def predict_eps(self, x: torch.Tensor, t: int) -> torch.Tensor:
        x = torch.as_tensor(x, dtype=torch.float64)
        batch = x.reshape(-1, x.shape[-1])
        dtype = next(self.model.parameters()).dtype
        steps = torch.full((batch.shape[0],), int(t), dtype=torch.long)
        eps = self.model(batch.to(dtype), steps).to(torch.float64)
        return eps.reshape(x.shape)

    def score(self, x, t):
        return eps_to_score(self.schedule, self.predict_eps(x, t), t, self.convention)


class PerturbedScore(ScoreSource):
    """Base score plus an injected error field ψ(x, t)."""

    kind = "perturbed"

    def __init__(self, base: ScoreSource, psi: Callable[[torch.Tensor, int], torch.Tensor]):
        super().__init__(base.schedule)
        self.base = base
        self.psi = psi

    def score(self, x, t):
        x = torch.as_tensor(x, dtype=torch.float64)
        return self.base.score(x, t) + self.psi(x, t)


class ConstantErrorField:
    kind = "constant"

    def __init__(self, vector):
        self.vector = torch.as_tensor(vector, dtype=torch.float64)

    def __call__(self, x, t):
        return self.vector.expand_as(torch.as_tensor(x, dtype=torch.float64))


class LinearErrorField:
    """ψ(x) = M (x − √ᾱ_t c) with a fixed matrix M and static centre c."""

    kind = "linear"

    def __init__(self, matrix, center, schedule: NoiseSchedule):
        self.matrix = torch.as_tensor(matrix, dtype=torch.float64)
        self.center = torch.as_tensor(center, dtype=torch.float64)
        self.schedule = schedule

    def __call__(self, x, t):
        x = torch.as_tensor(x, dtype=torch.float64)
        return (x - math.sqrt(self.schedule.alpha_bar(t)) * self.center) @ self.matrix.T


class ResidualErrorField:
    """ψ = s_θ − ∇log p_t for a learned source against the exact one."""

    kind = "trained-residual"

    def __init__(self, learned: ScoreSource, exact: ScoreSource):
        self.learned = learned
        self.exact = exact

    def __call__(self, x, t):
        return self.learned.score(x, t) - self.exact.score(x, t)


@dataclass(frozen=True)
class SamplerConfig:
    kind: str
    grid: StepGrid
    eta: float = 0.0
    z_extra: int = 0
    # DDIM steps remaining at the switch to ancestral steps
    tau3_index: Optional[int] = None
    seed: int = 0
    block_size: int = seeding.DEFAULT_BLOCK_SIZE

    def __post_init__(self):
        problems = []
        if self.kind not in SAMPLER_KINDS:
            problems.append(f"sampler.kind must be one of {SAMPLER_KINDS}, got {self.kind}")
        if not 0.0 <= self.eta <= 1.0:
            problems.append(f"sampler.eta must lie in [0, 1], got {self.eta}")
        if self.kind == "hybrid":
            if self.tau3_index is None or not 1 <= self.tau3_index <= self.grid.n_steps:
                problems.append(f"sampler.tau3_index must lie in [1, {self.grid.n_steps}] for hybrid, got {self.tau3_index}")
            if self.z_extra < 1:
                problems.append(f"sampler.z_extra must be >= 1 for hybrid, got {self.z_extra}")
        if self.block_size < 1:
            problems.append(f"block_size must be positive, got {self.block_size}")
        if problems:
            raise ConfigError(problems)

    def to_dict(self):
        record = asdict(self)
        record["grid"] = {"kind": self.grid.kind, "indices": list(self.grid.indices)}
        return record


@dataclass(frozen=True)
class Step:
    t: int
    t_next: int
    mode: str
    eta: float = 0.0


def ancestral_indices(start_t: int, z: int) -> Tuple[int, ...]:
    """z ancestral steps spread uniformly over start_t..0 in DDPM index."""
    raw = np.floor(np.linspace(start_t, 0, z + 1) + 0.5).astype(int)
    out = [int(start_t)]
    for t in raw[1:]:
        if t < out[-1]:
            out.append(int(t))
    if out[-1] != 0:
        out.append(0)
    return tuple(out)


def _chain(indices: Sequence[int], mode: str, eta: float = 0.0) -> List[Step]:
    return [Step(a, b, mode, eta) for a, b in zip(indices[:-1], indices[1:])]


def plan_steps(config: SamplerConfig, start_t: Optional[int] = None) -> List[Step]:
    """Sequence of (t → t') transitions for a run starting at ``start_t`` (default T)."""
    grid = config.grid
    start_t = grid.T if start_t is None else int(start_t)
    if config.kind == "ddpm":
        return _chain(tuple(range(start_t, -1, -1)), "ddpm")
    if config.kind == "ddim":
        return _chain(grid.tail(start_t), "ddim", config.eta)
    switch_t = grid.time_at_remaining(config.tau3_index)
    if start_t <= switch_t:
        return _chain(ancestral_indices(start_t, config.z_extra), "ddpm")
    head = grid.tail(start_t)
    head = head[: head.index(switch_t) + 1]
    return _chain(head, "ddim", config.eta) + _chain(ancestral_indices(switch_t, config.z_extra), "ddpm")


def ddpm_step(score_source: ScoreSource, schedule: NoiseSchedule, x, t: int, t_next: int = None, noise=None):
    """Ancestral step t → t_next with β_eff = 1 − ᾱ_t/ᾱ_{t_next}; noiseless when landing on 0.

    Any other step takes its ``noise`` from the caller's stream.
    """
    t_next = t - 1 if t_next is None else t_next
    if not 0 <= t_next < t:
        raise ConfigError(f"ddpm step needs t > t_next >= 0, got {t} -> {t_next}")
    x = torch.as_tensor(x, dtype=torch.float64)
    beta = 1.0 - schedule.alpha_bar(t) / schedule.alpha_bar(t_next)
    out = (x + beta * score_source.score(x, t)) / math.sqrt(1.0 - beta)
    if t_next > 0:
        if noise is None:
            raise ConfigError(f"ddpm step {t} -> {t_next} is stochastic and needs stream noise")
        out = out + math.sqrt(beta) * noise
    return out


def ddim_sigma(schedule: NoiseSchedule, t: int, t_next: int, eta: float) -> float:
    a, a_next = schedule.alpha_bar(t), schedule.alpha_bar(t_next)
    return eta * math.sqrt(max((1.0 - a_next) / (1.0 - a) * (1.0 - a / a_next), 0.0))


def ddim_step(score_source: ScoreSource, schedule: NoiseSchedule, x, t: int, t_next: int, eta: float = 0.0, noise=None):
    x = torch.as_tensor(x, dtype=torch.float64)
    if t_next == t:
        return x.clone()
    if not 0 <= t_next < t:
        raise ConfigError(f"ddim step needs t > t_next >= 0, got {t} -> {t_next}")
    a, a_next = schedule.alpha_bar(t), schedule.alpha_bar(t_next)
    eps = -math.sqrt(1.0 - a) * score_source.score(x, t)
    x0 = (x - math.sqrt(1.0 - a) * eps) / math.sqrt(a)
    sigma = ddim_sigma(schedule, t, t_next, eta)
    out = math.sqrt(a_next) * x0 + math.sqrt(max(1.0 - a_next - sigma**2, 0.0)) * eps
    if sigma > 0:
        if noise is None:
            raise ConfigError(f"ddim step {t} -> {t_next} with eta={eta} is stochastic and needs stream noise")
        out = out + sigma * noise
    return out


def _needs_noise(step: Step) -> bool:
    if step.mode == "ddpm":
        return step.t_next > 0
    return step.eta > 0 and step.t_next > 0


@dataclass(frozen=True)
class TrajectoryRecord:
    times: np.ndarray
    states: np.ndarray
    seed: int
    traj_id: int
    config_hash: str = ""
    failed_at: Optional[int] = None


@dataclass
class TrajectoryBatch:
    """States of a batch over recorded times: ``states[k, b]`` is trajectory b at ``times[k]``."""

    times: np.ndarray
    states: torch.Tensor
    traj_ids: np.ndarray
    seed: int
    config_hash: str = ""
    failed_at: torch.Tensor = field(default=None)

    @property
    def terminal(self) -> torch.Tensor:
        return self.states[-1]

    def __len__(self) -> int:
        return len(self.traj_ids)

    def record(self, b: int) -> TrajectoryRecord:
        failed = int(self.failed_at[b]) if self.failed_at is not None and self.failed_at[b] >= 0 else None
        return TrajectoryRecord(
            times=np.asarray(self.times),
            states=self.states[:, b].numpy(),
            seed=self.seed,
            traj_id=int(self.traj_ids[b]),
            config_hash=self.config_hash,
            failed_at=failed,
        )


def run_plan(
    plan: Sequence[Step],
    score_source: ScoreSource,
    schedule: NoiseSchedule,
    x: torch.Tensor,
    stream: seeding.NoiseStream,
    start_t: int,
    record_times: Optional[set] = None,
) -> Tuple[np.ndarray, torch.Tensor, torch.Tensor]:
    """Applies the plan to a batch, freezing any trajectory at its last finite state."""
    x = x.clone()
    failed_at = torch.full((x.shape[0],), -1, dtype=torch.long)
    times, states = [start_t], [x.clone()]
    for step in plan:
        active = failed_at < 0
        proposal = x.clone()
        if bool(active.any()):
            noise = stream.normal(step.t)[active] if _needs_noise(step) else None
            if step.mode == "ddpm":
                proposal[active] = ddpm_step(score_source, schedule, x[active], step.t, step.t_next, noise)
            else:
                proposal[active] = ddim_step(score_source, schedule, x[active], step.t, step.t_next, step.eta, noise)
        bad = active & ~torch.isfinite(proposal).all(-1)
        if bool(bad.any()):
            log.warning(f"{int(bad.sum())} trajectories became non-finite at t={step.t}")
            proposal[bad] = x[bad]
            failed_at[bad] = step.t
        x = proposal
        if record_times is None or step.t_next in record_times or step.t_next == 0:
            times.append(step.t_next)
            states.append(x.clone())
    return np.asarray(times, dtype=np.int64), torch.stack(states), failed_at


def sample_batch(
    config: SamplerConfig,
    score_source: ScoreSource,
    schedule: NoiseSchedule,
    traj_ids: Sequence[int],
    dim: int,
    x_init: Optional[torch.Tensor] = None,
    start_t: Optional[int] = None,
    config_hash: str = "",
    record_times: Optional[set] = None,
) -> TrajectoryBatch:
    """Simulates the trajectories ``traj_ids``; x_T is drawn from their streams unless given."""
    stream = seeding.NoiseStream(config.seed, traj_ids, dim, config.block_size)
    start_t = config.grid.T if start_t is None else int(start_t)
    if x_init is None:
        x_init = stream.normal(0, seeding.PURPOSE_INIT)
    x_init = torch.as_tensor(x_init, dtype=torch.float64).reshape(len(stream), dim)
    if not torch.isfinite(x_init).all():
        raise NumericFailure("initial states must be finite")
    plan = plan_steps(config, start_t)
    times, states, failed_at = run_plan(plan, score_source, schedule, x_init, stream, start_t, record_times)
    return TrajectoryBatch(
        times=times,
        states=states,
        traj_ids=np.asarray(traj_ids, dtype=np.int64),
        seed=config.seed,
        config_hash=config_hash,
        failed_at=failed_at,
    )


def sample_trajectory(
    config: SamplerConfig,
    score_source: ScoreSource,
    gmm: GaussianMixture,
    schedule: NoiseSchedule,
    traj_id: int = 0,
    config_hash: str = "",
) -> TrajectoryRecord:
    batch = sample_batch(config, score_source, schedule, [traj_id], gmm.dim, config_hash=config_hash)
    return batch.record(0)


def restart_batch(
    x0,
    start_index: int,
    config: SamplerConfig,
    score_source: ScoreSource,
    traj_ids: Sequence[int],
    config_hash: str = "",
) -> TrajectoryBatch:
    x0 = torch.as_tensor(x0, dtype=torch.float64)
    x0 = x0.reshape(len(traj_ids), -1)
    return sample_batch(
        config,
        score_source,
        score_source.schedule,
        traj_ids,
        x0.shape[-1],
        x_init=x0,
        start_t=start_index,
        config_hash=config_hash,
    )


def restart_from_point(
    x0, start_index: int, config: SamplerConfig, score_source: ScoreSource, traj_id: int = 0, config_hash: str = ""
) -> TrajectoryRecord:
    """Runs the remaining reverse steps from ``x0`` at time index ``start_index``."""
    return restart_batch(x0, start_index, config, score_source, [traj_id], config_hash).record(0)


def orthogonal_offsets(u: torch.Tensor, normals: torch.Tensor, radii: torch.Tensor) -> torch.Tensor:
    """Random vectors orthogonal to u with signed length ``radii``."""
    if u.shape[0] == 1:
        return torch.zeros_like(normals)
    direction = normals - (normals @ u).unsqueeze(-1) * u
    norm = torch.linalg.norm(direction, dim=-1, keepdim=True).clamp_min(1e-300)
    return radii.unsqueeze(-1) * direction / norm


def bisector_drift(segment: SegmentFrame, schedule: NoiseSchedule, score_source: ScoreSource, a, t: int, z=None):
    """b(a, t) = −½β_t a − β_t ⟨∇log p_t(x), u⟩ at x = √ᾱ_t m + a u + z.

    ``segment`` is the static frame; A is measured from the diffused midpoint.
    """
    a = torch.as_tensor(a, dtype=torch.float64)
    seg_t = segment.at_time(schedule, t)
    x = seg_t.midpoint + a.unsqueeze(-1) * seg_t.u
    if z is not None:
        x = x + z
    beta = schedule.beta(t)
    return -0.5 * beta * a - beta * (score_source.score(x, t) @ seg_t.u)


def bisector_sde_paths(
    segment: SegmentFrame,
    schedule: NoiseSchedule,
    score_source: ScoreSource,
    t_start: int,
    a_init,
    z_orth_bound: float,
    n_paths: int,
    seed: int = 0,
    noise: bool = True,
    first_id: int = 0,
    block_size: int = seeding.DEFAULT_BLOCK_SIZE,
) -> Tuple[np.ndarray, torch.Tensor]:
    """Euler–Maruyama of dA = b dt + √β_t dB on unit steps t_start → 0.

    The orthogonal offset z is redrawn every step, uniform in length on [−z_orth_bound, z_orth_bound].
    Returns the times and paths of shape (len(times), n_paths).
    """
    a = torch.as_tensor(a_init, dtype=torch.float64).expand(n_paths).clone()
    limit = 0.5 * (segment.ell * math.sqrt(schedule.alpha_bar(t_start)) + z_orth_bound)
    if float(a.abs().max()) > limit + 1e-12:
        raise ConfigError(f"initial bisector offset exceeds (ell + eps)/2 = {limit}")
    stream = seeding.NoiseStream(seed, np.arange(first_id, first_id + n_paths), segment.mode_i.shape[0], block_size)
    u = segment.u
    times, path = [t_start], [a.clone()]
    for t in range(t_start, 0, -1):
        z = None
        if z_orth_bound > 0:
            radii = stream.uniform(t, seeding.PURPOSE_RADIUS, -z_orth_bound, z_orth_bound)
            z = orthogonal_offsets(u, stream.normal(t, seeding.PURPOSE_ORTH), radii)
        a = a - bisector_drift(segment, schedule, score_source, a, t, z)
        if noise:
            a = a + math.sqrt(schedule.beta(t)) * stream.normal(t, seeding.PURPOSE_STEP, dim=1)[:, 0]
        times.append(t - 1)
        path.append(a.clone())
    return np.asarray(times, dtype=np.int64), torch.stack(path)


def bisector_sde_trajectory(
    segment: SegmentFrame,
    schedule: NoiseSchedule,
    score_source: ScoreSource,
    tau3_span: int,
    a_init: float,
    z_orth_bound: float = 0.0,
    seed: int = 0,
    traj_id: int = 0,
    noise: bool = True,
) -> Tuple[np.ndarray, torch.Tensor]:
    times, paths = bisector_sde_paths(
        segment, schedule, score_source, tau3_span, a_init, z_orth_bound, 1, seed, noise, first_id=traj_id
    )
    return times, paths[:, 0]
