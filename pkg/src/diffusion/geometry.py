import math
from dataclasses import dataclass, replace
from typing import Tuple

import torch

from src.diffusion.mixture import GaussianMixture
from src.diffusion.schedule import NoiseSchedule
from src.utils.errors import ConfigError

EXTENSION_CONVENTIONS = ("fraction", "length")


@dataclass(frozen=True)
class SegmentFrame:
    """Mode pair (i, j) with i < j. ``scale`` is √ᾱ_t when the frame lives in x-space."""

    i: int
    j: int
    mode_i: torch.Tensor
    mode_j: torch.Tensor
    scale: float = 1.0

    @property
    def ell(self) -> float:
        return float(torch.linalg.norm(self.mode_j - self.mode_i))

    @property
    def u(self) -> torch.Tensor:
        return (self.mode_j - self.mode_i) / self.ell

    @property
    def midpoint(self) -> torch.Tensor:
        return 0.5 * (self.mode_i + self.mode_j)

    def scaled(self, factor: float) -> "SegmentFrame":
        return replace(self, mode_i=self.mode_i * factor, mode_j=self.mode_j * factor, scale=self.scale * factor)

    def at_time(self, schedule: NoiseSchedule, t: int) -> "SegmentFrame":
        """x-space frame with modes √ᾱ_t μ; call on a static frame."""
        return self.scaled(math.sqrt(schedule.alpha_bar(t)) / self.scale)

    def point(self, xi) -> torch.Tensor:
        xi = torch.as_tensor(xi, dtype=torch.float64)
        return self.mode_i + xi.unsqueeze(-1) * (self.mode_j - self.mode_i)


@dataclass(frozen=True)
class SegmentCoordinates:
    xi: torch.Tensor
    w: torch.Tensor
    A: torch.Tensor


def segment_frame(gmm: GaussianMixture, i: int, j: int) -> SegmentFrame:
    if i == j:
        raise ConfigError(f"segment needs two distinct modes, got ({i}, {j})")
    i, j = sorted((int(i), int(j)))
    return SegmentFrame(i=i, j=j, mode_i=gmm.modes[i], mode_j=gmm.modes[j])


def adjacent_pairs(gmm: GaussianMixture, tol: float = 1e-9) -> Tuple[Tuple[int, int], ...]:
    """Pairs at the minimum inter-mode distance (the axis neighbours on a lattice)."""
    dist = torch.cdist(gmm.modes, gmm.modes)
    dist.fill_diagonal_(math.inf)
    nearest = float(dist.min())
    close = torch.nonzero(torch.triu(dist <= nearest * (1 + tol), diagonal=1))
    return tuple((int(a), int(b)) for a, b in close)


def nearest_pair(gmm: GaussianMixture, schedule: NoiseSchedule, x, t: int):
    """Two closest diffused modes and the margin (third − first smallest squared distance).

    Works on a single state or a batch; returns (i, j, margin) tensors with i < j.
    """
    if gmm.n_modes < 2:
        raise ConfigError("nearest_pair needs at least two modes")
    x = torch.as_tensor(x, dtype=torch.float64)
    centers = math.sqrt(schedule.alpha_bar(t)) * gmm.modes
    sq = ((x.unsqueeze(-2) - centers) ** 2).sum(-1)
    # stable sort keeps the lowest index first among ties
    order = torch.sort(sq, dim=-1, stable=True)
    first, second = order.indices[..., 0], order.indices[..., 1]
    if gmm.n_modes > 2:
        margin = order.values[..., 2] - order.values[..., 0]
    else:
        margin = torch.full_like(order.values[..., 0], math.inf)
    return torch.minimum(first, second), torch.maximum(first, second), margin


def decompose(segment: SegmentFrame, y) -> SegmentCoordinates:
    y = torch.as_tensor(y, dtype=torch.float64)
    rel = y - segment.mode_i
    along = rel @ segment.u
    xi = along / segment.ell
    w = rel - along.unsqueeze(-1) * segment.u
    A = (y - segment.midpoint) @ segment.u
    return SegmentCoordinates(xi=xi, w=w, A=A)


def _extension_bounds(segment: SegmentFrame, eps: float, convention: str):
    if eps < 0:
        raise ConfigError(f"tube extension must be nonnegative, got {eps}")
    if convention == "fraction":
        return -eps, 1.0 + eps
    if convention == "length":
        return -eps / segment.ell, 1.0 + eps / segment.ell
    raise ConfigError(f"extension convention must be one of {EXTENSION_CONVENTIONS}, got {convention}")


def perp_distance(segment: SegmentFrame, eps: float, y, convention: str = "fraction") -> torch.Tensor:
    """Distance from y to the ε-extended segment.

    ``fraction``: ξ clamped to [−ε, 1+ε] (extension by εℓ). ``length``: extension by ε in length units.
    """
    lo, hi = _extension_bounds(segment, eps, convention)
    y = torch.as_tensor(y, dtype=torch.float64)
    xi = torch.clamp(decompose(segment, y).xi, lo, hi)
    return torch.linalg.norm(y - segment.point(xi), dim=-1)


def in_tube(segment: SegmentFrame, eps: float, y) -> torch.Tensor:
    """ζ-ball tube around the unextended segment."""
    return perp_distance(segment, 0.0, y) <= eps


def epsilon_from_kappa(n_modes: int, kappa: float) -> float:
    if not kappa > 0:
        raise ConfigError(f"kappa must be positive, got {kappa}")
    return n_modes * math.exp(-kappa)
