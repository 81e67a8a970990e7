"""Terminal-sample classification and the grid diagonal-avoidance diagnostic."""
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from src.diffusion.geometry import nearest_pair
from src.diffusion.mixture import GaussianMixture, rescaled_responsibilities
from src.diffusion.schedule import NoiseSchedule
from src.utils.errors import ConfigError
from src.utils.metrics import wilson_interval

TRUE_MODE, INTERPOLATION, INVALID = 0, 1, 2
LABEL_NAMES = {TRUE_MODE: "true_mode", INTERPOLATION: "interpolation", INVALID: "invalid"}


@dataclass(frozen=True)
class SampleLabel:
    kind: str
    i: Optional[int] = None
    j: Optional[int] = None


@dataclass(frozen=True)
class ClassifiedBatch:
    codes: np.ndarray
    i: np.ndarray
    j: np.ndarray

    def label(self, b: int) -> SampleLabel:
        code = int(self.codes[b])
        if code == TRUE_MODE:
            return SampleLabel("true_mode", int(self.i[b]))
        if code == INTERPOLATION:
            return SampleLabel("interpolation", int(self.i[b]), int(self.j[b]))
        return SampleLabel("invalid")


def classification_threshold(gmm: GaussianMixture) -> float:
    if gmm.dim <= 10:
        return 5.0 * gmm.sigma
    return gmm.sigma * (math.sqrt(gmm.dim) + 4.0)


def _pair_index(n_modes: int):
    first, second = torch.triu_indices(n_modes, n_modes, offset=1)
    return first, second


def classify_samples(gmm: GaussianMixture, x0) -> ClassifiedBatch:
    """Mode check first, then the closest segment over all pairs, else invalid.

    Among segments at the same distance the shortest wins, then the lowest pair index.
    """
    x0 = torch.as_tensor(x0, dtype=torch.float64).reshape(-1, gmm.dim)
    threshold = classification_threshold(gmm)
    n = x0.shape[0]
    codes = np.full(n, INVALID, dtype=np.int64)
    out_i = np.full(n, -1, dtype=np.int64)
    out_j = np.full(n, -1, dtype=np.int64)

    mode_dist = torch.cdist(x0, gmm.modes)
    nearest = mode_dist.min(dim=1)
    at_mode = (nearest.values <= threshold).numpy()
    codes[at_mode] = TRUE_MODE
    out_i[at_mode] = nearest.indices.numpy()[at_mode]

    rest = np.flatnonzero(~at_mode)
    if rest.size and gmm.n_modes > 1:
        first, second = _pair_index(gmm.n_modes)
        start, stop = gmm.modes[first], gmm.modes[second]
        span = stop - start
        ell_sq = (span * span).sum(-1)
        rel = x0[rest].unsqueeze(1) - start
        xi = ((rel * span).sum(-1) / ell_sq).clamp(0.0, 1.0)
        dist = torch.linalg.norm(rel - xi.unsqueeze(-1) * span, dim=-1)
        best = dist.min(dim=1, keepdim=True).values
        close = dist <= best + 1e-12 * max(1.0, float(ell_sq.max().sqrt()))
        choice = torch.argmin(torch.where(close, ell_sq.expand_as(dist), torch.full_like(dist, math.inf)), dim=1)
        hit = (best[:, 0] <= threshold).numpy()
        rows = rest[hit]
        codes[rows] = INTERPOLATION
        out_i[rows] = first[choice].numpy()[hit]
        out_j[rows] = second[choice].numpy()[hit]
    return ClassifiedBatch(codes=codes, i=out_i, j=out_j)


def classify_sample(gmm: GaussianMixture, x0) -> SampleLabel:
    x0 = torch.as_tensor(x0, dtype=torch.float64)
    if not torch.isfinite(x0).all():
        raise ConfigError("classify_sample needs a finite sample")
    return classify_samples(gmm, x0).label(0)


def hallucination_rates(codes) -> dict:
    """Interpolation rate including and excluding invalid samples, each with a Wilson interval."""
    codes = np.asarray(codes)
    n_interp = int((codes == INTERPOLATION).sum())
    n_invalid = int((codes == INVALID).sum())
    row = {"n": int(codes.size), "n_true_mode": int((codes == TRUE_MODE).sum()), "n_invalid": n_invalid}
    row.update(wilson_interval(n_interp, codes.size).as_row("rate_inclusive"))
    row.update(wilson_interval(n_interp, codes.size - n_invalid).as_row("rate_exclusive"))
    return row


def diagonal_pairs(gmm: GaussianMixture, tol: float = 1e-9) -> torch.Tensor:
    """N×N mask of pairs that are opposite corners of one lattice cell."""
    if gmm.lattice_spacing is None:
        raise ConfigError("diagonal check needs a lattice mixture (lattice_spacing unset)")
    step = gmm.lattice_spacing
    gap = (gmm.modes.unsqueeze(1) - gmm.modes.unsqueeze(0)).abs()
    one_step = (gap - step).abs() <= tol * step
    zero = gap <= tol * step
    return (one_step.sum(-1) == 2) & ((one_step | zero).all(-1))


@dataclass
class DiagonalReport:
    kappa: float
    threshold: float
    n_states: int = 0
    max_min_responsibility: Optional[float] = None
    violations: int = 0
    n_interpolations: int = 0
    n_diagonal_interpolations: int = 0

    def merge(self, other: "DiagonalReport") -> "DiagonalReport":
        values = [v for v in (self.max_min_responsibility, other.max_min_responsibility) if v is not None]
        return DiagonalReport(
            kappa=self.kappa,
            threshold=self.threshold,
            n_states=self.n_states + other.n_states,
            max_min_responsibility=max(values) if values else None,
            violations=self.violations + other.violations,
            n_interpolations=self.n_interpolations + other.n_interpolations,
            n_diagonal_interpolations=self.n_diagonal_interpolations + other.n_diagonal_interpolations,
        )


def diagonal_avoidance_check(batch, gmm: GaussianMixture, schedule: NoiseSchedule, kappa: float) -> DiagonalReport:
    """Largest min(γ̃_i, γ̃_j) over recorded states whose dominant pair is a cell diagonal."""
    diagonal = diagonal_pairs(gmm)
    report = DiagonalReport(kappa=kappa, threshold=math.exp(-kappa))
    for k, t in enumerate(batch.times):
        t = int(t)
        x = batch.states[k]
        i, j, margin = nearest_pair(gmm, schedule, x, t)
        selected = (margin >= 2.0 * schedule.sigma_t_sq(t) * kappa) & diagonal[i, j]
        if not bool(selected.any()):
            continue
        y = x[selected] / math.sqrt(schedule.alpha_bar(t))
        gamma = rescaled_responsibilities(gmm, y, schedule.sigma_tilde_sq(t))
        rows = torch.arange(y.shape[0])
        pair_min = torch.minimum(gamma[rows, i[selected]], gamma[rows, j[selected]])
        worst = float(pair_min.max())
        report.n_states += int(selected.sum())
        report.violations += int((pair_min > report.threshold).sum())
        if report.max_min_responsibility is None or worst > report.max_min_responsibility:
            report.max_min_responsibility = worst

    labels = classify_samples(gmm, batch.terminal)
    interp = labels.codes == INTERPOLATION
    report.n_interpolations = int(interp.sum())
    if report.n_interpolations:
        report.n_diagonal_interpolations = int(diagonal[torch.from_numpy(labels.i[interp]), torch.from_numpy(labels.j[interp])].sum())
    return report
