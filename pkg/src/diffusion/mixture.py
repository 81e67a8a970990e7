"""Isotropic Gaussian mixture target and its exact diffused marginals.

The diffused marginal at time index t is p_t(x) = Σ_k π_k N(x; √ᾱ_t μ_k, σ_t² I), so responsibilities,
score and log-density have closed forms. All arithmetic is float64 and in log-space.
"""
import itertools
import json
import math
from dataclasses import dataclass
from typing import Dict, Optional, Union

import numpy as np
import torch

from src.diffusion.schedule import NoiseSchedule
from src.utils import seeding
from src.utils.errors import ConfigError, NumericFailure

MAX_CANDIDATES = 500_000
RESPONSIBILITY_FLOOR = 1e-300

Vector = Union[torch.Tensor, np.ndarray]


@dataclass(frozen=True)
class GaussianMixture:
    modes: torch.Tensor
    weights: torch.Tensor
    sigma: float
    # pre-normalization σ and the divisor applied to modes and σ
    sigma_raw: Optional[float] = None
    scale: float = 1.0
    lattice_spacing: Optional[float] = None

    def __post_init__(self):
        problems = []
        if self.modes.ndim != 2 or self.modes.shape[0] < 1:
            problems.append(f"mixture.modes must be an (N, dim) array, got shape {tuple(self.modes.shape)}")
        elif self.weights.shape != (self.modes.shape[0],):
            problems.append("mixture.weights must have one entry per mode")
        else:
            if torch.any(self.weights <= 0):
                problems.append("mixture.weights must be strictly positive")
            if abs(float(self.weights.sum()) - 1.0) > 1e-12:
                problems.append(f"mixture.weights must sum to 1, got {float(self.weights.sum())!r}")
            if self.modes.shape[0] > 1:
                gaps = torch.cdist(self.modes, self.modes)
                gaps.fill_diagonal_(math.inf)
                if float(gaps.min()) <= 0:
                    problems.append("mixture.modes must be pairwise distinct")
        if not self.sigma > 0:
            problems.append(f"mixture.sigma must be positive, got {self.sigma}")
        if problems:
            raise ConfigError(problems)

    @property
    def n_modes(self) -> int:
        return int(self.modes.shape[0])

    @property
    def dim(self) -> int:
        return int(self.modes.shape[1])

    @property
    def log_weights(self) -> torch.Tensor:
        return torch.log(self.weights)

    def to_dict(self) -> Dict:
        return {
            "n_modes": self.n_modes,
            "dim": self.dim,
            "sigma": self.sigma,
            "weights": self.weights.tolist(),
            "modes": self.modes.tolist(),
            "sigma_raw": self.sigma_raw,
            "scale": self.scale,
            "lattice_spacing": self.lattice_spacing,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def mixture_from_dict(record: Dict) -> GaussianMixture:
    modes = torch.tensor(record["modes"], dtype=torch.float64)
    gmm = GaussianMixture(
        modes=modes,
        weights=torch.tensor(record["weights"], dtype=torch.float64),
        sigma=float(record["sigma"]),
        sigma_raw=record.get("sigma_raw"),
        scale=float(record.get("scale", 1.0)),
        lattice_spacing=record.get("lattice_spacing"),
    )
    if gmm.n_modes != record.get("n_modes", gmm.n_modes) or gmm.dim != record.get("dim", gmm.dim):
        raise ConfigError("mixture record n_modes/dim disagree with modes[][]")
    return gmm


def build_mixture(modes, weights=None, sigma: float = 0.02) -> GaussianMixture:
    modes = torch.as_tensor(np.asarray(modes, dtype=np.float64))
    if modes.ndim == 1:
        modes = modes[:, None]
    if weights is None:
        weights = torch.full((modes.shape[0],), 1.0 / modes.shape[0], dtype=torch.float64)
    return GaussianMixture(modes=modes, weights=torch.as_tensor(np.asarray(weights, dtype=np.float64)), sigma=sigma)


def lattice_axis(side: int, separation: float) -> np.ndarray:
    return (np.arange(side) - (side - 1) // 2) * float(separation)


def farthest_point_sampling(candidates: torch.Tensor, n_keep: int) -> torch.Tensor:
    """Greedy max-min selection starting at candidate 0; ties go to the lowest index."""
    picked = [0]
    min_dist = torch.linalg.norm(candidates - candidates[0], dim=1)
    for _ in range(1, n_keep):
        # torch.argmax returns the first maximal index
        nxt = int(torch.argmax(min_dist))
        picked.append(nxt)
        min_dist = torch.minimum(min_dist, torch.linalg.norm(candidates - candidates[nxt], dim=1))
    return torch.tensor(picked, dtype=torch.long)


def build_grid_mixture(
    side: int = 5,
    separation: float = 2.0,
    sigma: float = 0.02,
    dim: int = 2,
    n_keep: Optional[int] = None,
    normalize: bool = True,
    max_candidates: int = MAX_CANDIDATES,
    seed: int = 0,
) -> GaussianMixture:
    """Equal-weight mixture on an axis-aligned lattice.

    The full lattice is returned when ``n_keep`` is None or covers it; otherwise ``n_keep`` modes
    are chosen by farthest-point sampling. With ``normalize`` the modes and σ are divided by 2√dim.
    """
    problems = []
    if side < 2:
        problems.append(f"mixture.side must be >= 2, got {side}")
    if not separation > 0:
        problems.append(f"mixture.separation must be positive, got {separation}")
    if not sigma > 0:
        problems.append(f"mixture.sigma must be positive, got {sigma}")
    if dim < 1:
        problems.append(f"mixture.dim must be >= 1, got {dim}")
    if problems:
        raise ConfigError(problems)

    size = side**dim
    if n_keep is not None and not 1 <= n_keep <= size:
        raise ConfigError(f"mixture.n_keep must lie in [1, {size}], got {n_keep}")

    axis = lattice_axis(side, separation)
    if n_keep is None or n_keep == size:
        points = np.array(list(itertools.product(axis, repeat=dim)), dtype=np.float64)
    else:
        if size <= max_candidates:
            candidates = np.array(list(itertools.product(axis, repeat=dim)), dtype=np.float64)
        else:
            rng = seeding.generator(seed, purpose=seeding.PURPOSE_CANDIDATES)
            candidates = axis[rng.integers(0, side, size=(max_candidates, dim))]
            # keep the diameter pair of the full lattice among the candidates
            candidates[0], candidates[1] = axis[0], axis[-1]
        picked = farthest_point_sampling(torch.from_numpy(candidates), n_keep)
        points = candidates[picked.numpy()]

    divisor = 2.0 * math.sqrt(dim) if normalize else 1.0
    modes = torch.from_numpy(points / divisor)
    weights = torch.full((modes.shape[0],), 1.0 / modes.shape[0], dtype=torch.float64)
    return GaussianMixture(
        modes=modes,
        weights=weights,
        sigma=sigma / divisor,
        sigma_raw=float(sigma),
        scale=divisor,
        lattice_spacing=float(separation) / divisor,
    )


def _as_batch(x: Vector) -> torch.Tensor:
    x = torch.as_tensor(x, dtype=torch.float64)
    if not torch.isfinite(x).all():
        raise NumericFailure("non-finite state passed to a density operation", position=x)
    return x


def component_log_terms(gmm: GaussianMixture, x: torch.Tensor, centers: torch.Tensor, var: float) -> torch.Tensor:
    """log π_k − ‖x − c_k‖² / (2 var) for every component, shape (..., N)."""
    diff = x.unsqueeze(-2) - centers
    return gmm.log_weights - (diff * diff).sum(-1) / (2.0 * var)


def normalize_log_terms(logits: torch.Tensor) -> torch.Tensor:
    logits = logits - logits.amax(dim=-1, keepdim=True)
    gamma = torch.exp(logits)
    gamma = gamma / gamma.sum(-1, keepdim=True)
    return torch.where(gamma < RESPONSIBILITY_FLOOR, torch.zeros_like(gamma), gamma)


def diffused_modes(gmm: GaussianMixture, schedule: NoiseSchedule, t: int) -> torch.Tensor:
    return math.sqrt(schedule.alpha_bar(t)) * gmm.modes


def responsibilities(gmm: GaussianMixture, schedule: NoiseSchedule, x: Vector, t: int) -> torch.Tensor:
    x = _as_batch(x)
    logits = component_log_terms(gmm, x, diffused_modes(gmm, schedule, t), schedule.sigma_t_sq(t))
    return normalize_log_terms(logits)


def posterior_mean(gmm: GaussianMixture, schedule: NoiseSchedule, x: Vector, t: int) -> torch.Tensor:
    """Σ_k γ_k √ᾱ_t μ_k."""
    return responsibilities(gmm, schedule, x, t) @ diffused_modes(gmm, schedule, t)


def score_exact(gmm: GaussianMixture, schedule: NoiseSchedule, x: Vector, t: int) -> torch.Tensor:
    x = _as_batch(x)
    return -(x - posterior_mean(gmm, schedule, x, t)) / schedule.sigma_t_sq(t)


def log_marginal_density(gmm: GaussianMixture, schedule: NoiseSchedule, x: Vector, t: int) -> torch.Tensor:
    x = _as_batch(x)
    var = schedule.sigma_t_sq(t)
    logits = component_log_terms(gmm, x, diffused_modes(gmm, schedule, t), var)
    return torch.logsumexp(logits, dim=-1) - 0.5 * gmm.dim * math.log(2.0 * math.pi * var)


@dataclass(frozen=True)
class MarginalState:
    x: torch.Tensor
    t: int
    gamma: torch.Tensor


def marginal_state(gmm: GaussianMixture, schedule: NoiseSchedule, x: Vector, t: int) -> MarginalState:
    x = _as_batch(x)
    return MarginalState(x=x, t=int(t), gamma=responsibilities(gmm, schedule, x, t))


@dataclass(frozen=True)
class RescaledState:
    y: torch.Tensor
    gamma_tilde: torch.Tensor
    sigma_tilde_sq: float


def rescaled_responsibilities(gmm: GaussianMixture, y: Vector, sigma_tilde_sq: float) -> torch.Tensor:
    """Responsibilities of the static modes under variance σ̃²."""
    y = _as_batch(y)
    return normalize_log_terms(component_log_terms(gmm, y, gmm.modes, sigma_tilde_sq))


def rescale(gmm: GaussianMixture, schedule: NoiseSchedule, x: Vector, t: int) -> RescaledState:
    abar = schedule.alpha_bar(t)
    if abar <= 0:
        raise ConfigError(f"cannot rescale at t={t}: alpha_bar is 0")
    y = _as_batch(x) / math.sqrt(abar)
    s2 = schedule.sigma_tilde_sq(t)
    return RescaledState(y=y, gamma_tilde=rescaled_responsibilities(gmm, y, s2), sigma_tilde_sq=s2)


def posterior_mean_rescaled(gmm: GaussianMixture, y: Vector, sigma_tilde_sq: float) -> torch.Tensor:
    """μ̂(y) = Σ_k γ̃_k μ_k."""
    return rescaled_responsibilities(gmm, y, sigma_tilde_sq) @ gmm.modes


def rescaled_drift(gmm: GaussianMixture, y: Vector, sigma_tilde_sq: float) -> torch.Tensor:
    """Right-hand side of dy/du = μ̂(y) − y."""
    y = _as_batch(y)
    return posterior_mean_rescaled(gmm, y, sigma_tilde_sq) - y


def two_mode_responsibility(segment, sigma_tilde_sq: float, xi, weights=(0.5, 0.5)):
    """γ̃_j of the isolated pair at parallel coordinate ξ: sigmoid(log(π_j/π_i) + (ℓ²/σ̃²)(ξ − ½))."""
    pi_i, pi_j = float(weights[0]), float(weights[1])
    logit = math.log(pi_j / pi_i) + segment.ell**2 / sigma_tilde_sq * (torch.as_tensor(xi, dtype=torch.float64) - 0.5)
    return torch.sigmoid(logit)


def sample_mixture(gmm: GaussianMixture, n: int, seed: int = 0, block: int = 0) -> torch.Tensor:
    """n draws from p_data: a component by weight, then isotropic σ noise."""
    rng = seeding.generator(seed, block=block, purpose=seeding.PURPOSE_DATA)
    labels = rng.choice(gmm.n_modes, size=n, p=gmm.weights.numpy())
    noise = rng.standard_normal((n, gmm.dim))
    return gmm.modes[torch.from_numpy(labels)] + gmm.sigma * torch.from_numpy(noise)
