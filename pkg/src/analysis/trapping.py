"""Midpoint restarts and the hallucination / midpoint-entry decomposition."""
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from src.analysis.hallucination import INTERPOLATION, TRUE_MODE, classify_samples
from src.diffusion.geometry import SegmentFrame, decompose, nearest_pair
from src.diffusion.mixture import GaussianMixture
from src.diffusion.samplers import SamplerConfig, ScoreSource, restart_batch
from src.diffusion.schedule import NoiseSchedule
from src.utils.metrics import wilson_interval


def signed_offsets(n_trials: int, theta: float) -> np.ndarray:
    """Offsets spanning [0, ϑ] in magnitude, alternating in sign."""
    magnitude = np.linspace(0.0, theta, n_trials)
    sign = np.where(np.arange(n_trials) % 2 == 0, 1.0, -1.0)
    return sign * magnitude


def restart_points(segment: SegmentFrame, schedule: NoiseSchedule, t: int, offsets) -> torch.Tensor:
    """x = √ᾱ_t (μ_i + (½ + δ)ℓu) for every offset δ (ξ units)."""
    xi = 0.5 + torch.as_tensor(offsets, dtype=torch.float64)
    return math.sqrt(schedule.alpha_bar(t)) * segment.point(xi)


@dataclass
class TrappingResult:
    sampler: str
    n_trials: int
    n_stuck: int
    n_escaped: int
    offsets: np.ndarray = field(repr=False)
    terminal_xi: np.ndarray = field(repr=False)
    stuck: np.ndarray = field(repr=False)

    @property
    def stuck_rate(self) -> float:
        return self.n_stuck / self.n_trials

    @property
    def escape_rate(self) -> float:
        return self.n_escaped / self.n_trials


def trapping_experiment(
    tau3_time: int,
    theta: float,
    config: SamplerConfig,
    segment: SegmentFrame,
    gmm: GaussianMixture,
    score_source: ScoreSource,
    n_trials: int,
    first_id: int = 0,
    offsets=None,
) -> TrappingResult:
    """Restarts on the segment at t(τ₃); stuck means the terminal sample interpolates the same pair.

    ``theta`` is the window half-width in ξ units; ``offsets`` overrides the default spread.
    """
    offsets = signed_offsets(n_trials, theta) if offsets is None else np.asarray(offsets, dtype=np.float64)
    x = restart_points(segment, score_source.schedule, tau3_time, offsets)
    ids = np.arange(first_id, first_id + len(offsets))
    batch = restart_batch(x, tau3_time, config, score_source, ids)
    labels = classify_samples(gmm, batch.terminal)
    stuck = (labels.codes == INTERPOLATION) & (labels.i == segment.i) & (labels.j == segment.j)
    return TrappingResult(
        sampler=config.kind,
        n_trials=len(offsets),
        n_stuck=int(stuck.sum()),
        n_escaped=int((labels.codes == TRUE_MODE).sum()),
        offsets=offsets,
        terminal_xi=decompose(segment, batch.terminal).xi.numpy(),
        stuck=stuck,
    )


@dataclass
class MidpointCounts:
    """Counts for H (terminal interpolation) and M (entered the ϑ-midpoint neighbourhood)."""

    n: int = 0
    n_h: int = 0
    n_m: int = 0
    n_hm: int = 0

    @property
    def n_h_not_m(self) -> int:
        return self.n_h - self.n_hm

    def merge(self, other: "MidpointCounts") -> "MidpointCounts":
        return MidpointCounts(self.n + other.n, self.n_h + other.n_h, self.n_m + other.n_m, self.n_hm + other.n_hm)

    def table(self) -> dict:
        row = {"n": self.n}
        row.update(wilson_interval(self.n_h, self.n).as_row("p_h"))
        row.update(wilson_interval(self.n_m, self.n).as_row("p_m"))
        row.update(wilson_interval(self.n_hm, self.n_m).as_row("p_h_given_m"))
        row.update(wilson_interval(self.n_h_not_m, self.n - self.n_m).as_row("p_h_given_not_m"))
        p_hm = row["p_h_given_m"]
        p_hnm = row["p_h_given_not_m"]
        row["p_h_given_m_times_p_m"] = None if p_hm is None else p_hm * row["p_m"]
        row["p_h_given_not_m_times_p_not_m"] = None if p_hnm is None else p_hnm * (1.0 - row["p_m"])
        return row


def entered_midpoint(batch, gmm: GaussianMixture, schedule: NoiseSchedule, theta: float, tau3_time: int) -> np.ndarray:
    """Per trajectory: ‖y − m‖ ≤ ϑℓ for the nearest pair at some recorded 0 < t ≤ t(τ₃)."""
    entered = torch.zeros(batch.states.shape[1], dtype=torch.bool)
    for k, t in enumerate(batch.times):
        t = int(t)
        if not 0 < t <= tau3_time:
            continue
        y = batch.states[k] / math.sqrt(schedule.alpha_bar(t))
        i, j, _ = nearest_pair(gmm, schedule, batch.states[k], t)
        mid = 0.5 * (gmm.modes[i] + gmm.modes[j])
        ell = torch.linalg.norm(gmm.modes[j] - gmm.modes[i], dim=-1)
        entered |= torch.linalg.norm(y - mid, dim=-1) <= theta * ell
    return entered.numpy()


def midpoint_event_decomposition(
    batch, gmm: GaussianMixture, schedule: NoiseSchedule, theta: float, tau3_time: int, codes: Optional[np.ndarray] = None
) -> MidpointCounts:
    if codes is None:
        codes = classify_samples(gmm, batch.terminal).codes
    h = np.asarray(codes) == INTERPOLATION
    m = entered_midpoint(batch, gmm, schedule, theta, tau3_time)
    return MidpointCounts(n=int(h.size), n_h=int(h.sum()), n_m=int(m.sum()), n_hm=int((h & m).sum()))
