from dataclasses import dataclass
from functools import cached_property
from typing import Dict, Tuple

import numpy as np
import torch

from src.utils.errors import ConfigError

GRID_KINDS = ("ddpm_full", "ddim_quadratic", "ddim_uniform")


@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete variance-preserving schedule.

    ``betas[k - 1]`` is β_k for k = 1..T and ``alpha_bars[t]`` is ᾱ_t for t = 0..T with ᾱ_0 = 1.
    ``sigma_data`` is the per-component σ of the target mixture, so the diffused component
    variance is σ_t² = σ²ᾱ_t + 1 − ᾱ_t.
    """

    betas: torch.Tensor
    alpha_bars: torch.Tensor
    sigma_data: float
    beta_min: float
    beta_max: float

    @property
    def T(self) -> int:
        return int(self.betas.shape[0])

    @property
    def terminal_gamma(self) -> float:
        return float(self.alpha_bars[-1])

    def beta(self, t: int) -> float:
        return float(self.betas[t - 1])

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[t])

    def sigma_t_sq(self, t: int) -> float:
        return float(self.sigma_t_sq_all[t])

    def sigma_tilde_sq(self, t: int) -> float:
        return float(self.sigma_tilde_sq_all[t])

    @cached_property
    def sigma_t_sq_all(self) -> torch.Tensor:
        return self.sigma_data**2 * self.alpha_bars + (1.0 - self.alpha_bars)

    @cached_property
    def sigma_tilde_sq_all(self) -> torch.Tensor:
        return self.sigma_t_sq_all / self.alpha_bars

    @cached_property
    def u_all(self) -> torch.Tensor:
        """u(t) for t = 0..T, left-Riemann sum of β_s / (2σ_s²) over s = t+1..T."""
        rate = self.betas / (2.0 * self.sigma_t_sq_all[1:])
        tail = torch.flip(torch.cumsum(torch.flip(rate, dims=(0,)), dim=0), dims=(0,))
        return torch.cat([tail, torch.zeros(1, dtype=tail.dtype)])

    def check_index(self, t: int) -> int:
        if not 0 <= int(t) <= self.T:
            raise ConfigError(f"time index {t} outside [0, {self.T}]")
        return int(t)

    def to_dict(self) -> Dict:
        return {"T": self.T, "beta_min": self.beta_min, "beta_max": self.beta_max, "family": "linear"}


def build_linear_schedule(
    T: int = 1000, beta_min: float = 1e-4, beta_max: float = 0.02, sigma_data: float = 0.02
) -> NoiseSchedule:
    problems = []
    if int(T) < 2:
        problems.append(f"schedule.T must be >= 2, got {T}")
    if not 0.0 < beta_min <= beta_max < 1.0:
        problems.append(f"schedule betas need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
    if not sigma_data > 0.0:
        problems.append(f"mixture.sigma must be positive, got {sigma_data}")
    if problems:
        raise ConfigError(problems)

    betas = torch.linspace(beta_min, beta_max, int(T), dtype=torch.float64)
    alpha_bars = torch.cat([torch.ones(1, dtype=torch.float64), torch.cumprod(1.0 - betas, dim=0)])
    return NoiseSchedule(
        betas=betas,
        alpha_bars=alpha_bars,
        sigma_data=float(sigma_data),
        beta_min=float(beta_min),
        beta_max=float(beta_max),
    )


def schedule_from_dict(record: Dict, sigma_data: float) -> NoiseSchedule:
    if record.get("family", "linear") != "linear":
        raise ConfigError(f"schedule.family must be 'linear', got {record.get('family')}")
    return build_linear_schedule(record["T"], record["beta_min"], record["beta_max"], sigma_data)


def u_time(schedule: NoiseSchedule, t: int) -> float:
    return float(schedule.u_all[schedule.check_index(t)])


@dataclass(frozen=True)
class StepGrid:
    kind: str
    indices: Tuple[int, ...]

    def __post_init__(self):
        if self.kind not in GRID_KINDS:
            raise ConfigError(f"grid kind must be one of {GRID_KINDS}, got {self.kind}")
        steps = np.diff(self.indices)
        if len(self.indices) < 2 or self.indices[-1] != 0 or np.any(steps >= 0):
            raise ConfigError(f"grid must decrease strictly from T to 0, got {self.indices}")

    @property
    def n_steps(self) -> int:
        return len(self.indices) - 1

    @property
    def T(self) -> int:
        return self.indices[0]

    def time_at_remaining(self, remaining: int) -> int:
        """Time index with ``remaining`` grid steps left before t = 0."""
        if not 0 <= remaining <= self.n_steps:
            raise ConfigError(f"remaining steps {remaining} outside [0, {self.n_steps}]")
        return self.indices[self.n_steps - remaining]

    def tail(self, start_t: int) -> Tuple[int, ...]:
        if start_t not in self.indices:
            raise ConfigError(f"start index {start_t} is not on the {self.kind} grid")
        return self.indices[self.indices.index(start_t):]


def ddpm_full_grid(schedule: NoiseSchedule) -> StepGrid:
    return StepGrid("ddpm_full", tuple(range(schedule.T, -1, -1)))


def _dedup_grid(kind: str, T: int, raw) -> StepGrid:
    indices = [T]
    for t in raw:
        t = int(min(max(t, 0), T))
        if t < indices[-1]:
            indices.append(t)
    if indices[-1] != 0:
        indices.append(0)
    return StepGrid(kind, tuple(indices))


def ddim_quadratic_grid(schedule: NoiseSchedule, n_steps: int) -> StepGrid:
    """t_k = round(T (k/n)^2), k = n..0, deduplicated, endpoints forced to {T, 0}."""
    T = schedule.T
    if not 2 <= n_steps <= T:
        raise ConfigError(f"sampler.n_steps must lie in [2, {T}], got {n_steps}")
    k = np.arange(n_steps, -1, -1, dtype=np.float64)
    raw = np.floor(T * (k / n_steps) ** 2 + 0.5)
    return _dedup_grid("ddim_quadratic", T, raw[1:])


def ddim_uniform_grid(schedule: NoiseSchedule, n_steps: int) -> StepGrid:
    T = schedule.T
    if not 2 <= n_steps <= T:
        raise ConfigError(f"sampler.n_steps must lie in [2, {T}], got {n_steps}")
    raw = np.floor(np.linspace(T, 0, n_steps + 1) + 0.5)
    return _dedup_grid("ddim_uniform", T, raw[1:])


def build_grid(schedule: NoiseSchedule, kind: str, n_steps: int = None) -> StepGrid:
    if kind == "ddpm_full":
        return ddpm_full_grid(schedule)
    if kind == "ddim_quadratic":
        return ddim_quadratic_grid(schedule, n_steps)
    if kind == "ddim_uniform":
        return ddim_uniform_grid(schedule, n_steps)
    raise ConfigError(f"sampler.grid must be one of {GRID_KINDS}, got {kind}")
