from typing import Sequence

import numpy as np

from src.analysis.perturbation import ScoreErrorSpec, estimate_error_spec
from src.diffusion.geometry import SegmentFrame
from src.diffusion.mixture import GaussianMixture
from src.diffusion.samplers import ExactScore, ResidualErrorField, ScoreSource
from src.diffusion.schedule import NoiseSchedule
from src.utils import get_logger

log = get_logger(__name__)


def score_error_field(
    source: ScoreSource,
    gmm: GaussianMixture,
    schedule: NoiseSchedule,
    segment: SegmentFrame,
    times: Sequence[int],
    eps: float,
    n_samples: int = 1000,
    seed: int = 0,
) -> ScoreErrorSpec:
    """ψ = s_θ − ∇log p_t sampled over the ε-tube around ``segment``."""
    psi = ResidualErrorField(source, ExactScore(gmm, schedule))
    spec = estimate_error_spec(psi, segment, schedule, times, eps, n_samples, seed)
    if not (np.isfinite(spec.rho_bar).all() and np.isfinite(spec.lipschitz).all()):
        log.warning(f"score error estimate for pair ({segment.i}, {segment.j}) contains non-finite values")
    return spec


def relative_score_error(source: ScoreSource, gmm: GaussianMixture, schedule: NoiseSchedule, x, t: int) -> np.ndarray:
    """‖s_θ − ∇log p_t‖ / ‖∇log p_t‖ at the points ``x``."""
    exact = ExactScore(gmm, schedule).score(x, t)
    diff = source.score(x, t) - exact
    return (diff.norm(dim=-1) / exact.norm(dim=-1).clamp_min(1e-300)).numpy()
