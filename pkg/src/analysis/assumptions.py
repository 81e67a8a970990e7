"""Critical times of the two-mode regime.

τ₁(κ) is read off trajectories: the dominant pair must beat every other mode by a margin
Δ_t ≥ 2σ_t²κ from t = 0 up to τ₁. τ₂(κ) is trajectory-free: ℓ² ≥ 4κσ̃_t²ϖ.
"""
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from src.diffusion.geometry import nearest_pair
from src.diffusion.mixture import GaussianMixture
from src.diffusion.schedule import NoiseSchedule
from src.utils.errors import ConfigError


@dataclass
class AssumptionReport:
    kappa: float
    tau1: Optional[int] = None
    tau2: Optional[int] = None
    times: np.ndarray = field(default=None, repr=False)
    margins: np.ndarray = field(default=None, repr=False)
    sigma_tilde_sq_dim: np.ndarray = field(default=None, repr=False)


def dominance_ratios(batch, gmm: GaussianMixture, schedule: NoiseSchedule) -> np.ndarray:
    """Δ_t / (2σ_t²) for every recorded state, shape (K, B)."""
    out = np.empty((len(batch.times), batch.states.shape[1]), dtype=np.float64)
    for k, t in enumerate(batch.times):
        _, _, margin = nearest_pair(gmm, schedule, batch.states[k], int(t))
        out[k] = (margin / (2.0 * schedule.sigma_t_sq(int(t)))).numpy()
    return out


def tau1_from_ratios(times, ratios: np.ndarray, kappas: Sequence[float]) -> np.ndarray:
    """τ₁ per (κ, trajectory); -1 where dominance already fails at the last recorded time.

    ``times`` decrease, so the running minimum is taken from the end of the record.
    """
    times = np.asarray(times)
    ratios = np.asarray(ratios, dtype=np.float64).reshape(len(times), -1)
    backward = np.minimum.accumulate(ratios[::-1], axis=0)
    kappas = np.asarray(kappas, dtype=np.float64)
    held = (backward[None, :, :] >= kappas[:, None, None]).sum(axis=1)
    rev_times = times[::-1]
    return np.where(held > 0, rev_times[np.maximum(held - 1, 0)], -1)


def detect_tau1_batch(batch, gmm: GaussianMixture, schedule: NoiseSchedule, kappas: Sequence[float]) -> np.ndarray:
    return tau1_from_ratios(batch.times, dominance_ratios(batch, gmm, schedule), kappas)


def detect_tau1(trajectory, gmm: GaussianMixture, schedule: NoiseSchedule, kappa: float) -> AssumptionReport:
    """τ₁ for a single recorded trajectory, with its margin series."""
    if not kappa > 0:
        raise ConfigError(f"kappa must be positive, got {kappa}")
    times = np.asarray(trajectory.times)
    states = torch.as_tensor(trajectory.states, dtype=torch.float64)
    margins = np.empty(len(times))
    ratios = np.empty(len(times))
    for k, t in enumerate(times):
        _, _, margin = nearest_pair(gmm, schedule, states[k], int(t))
        margins[k] = float(margin)
        ratios[k] = margins[k] / (2.0 * schedule.sigma_t_sq(int(t)))
    tau1 = int(tau1_from_ratios(times, ratios, [kappa])[0, 0])
    s2_dim = np.array([schedule.sigma_tilde_sq(int(t)) * gmm.dim for t in times])
    return AssumptionReport(
        kappa=kappa,
        tau1=None if tau1 < 0 else tau1,
        times=times,
        margins=margins,
        sigma_tilde_sq_dim=s2_dim,
    )


def detect_tau2(ell: float, schedule: NoiseSchedule, kappa: float, dim: int, times=None) -> Optional[int]:
    """Largest t with ℓ² ≥ 4κσ̃²ϖ at every t' ≤ t (over ``times`` if given, else 0..T)."""
    if not ell > 0:
        raise ConfigError(f"segment length must be positive, got {ell}")
    times = np.arange(schedule.T + 1) if times is None else np.sort(np.asarray(times, dtype=np.int64))
    s2 = schedule.sigma_tilde_sq_all.numpy()[times]
    ok = ell**2 >= 4.0 * kappa * s2 * dim
    if not ok[0]:
        return None
    held = int(np.argmin(ok)) if not ok.all() else len(ok)
    return int(times[held - 1])
