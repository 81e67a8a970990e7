"""Counter-based random streams.

Every draw is addressed by ``(seed, block, step, purpose)``. Trajectory ``k`` lives in
block ``k // block_size`` at row ``k % block_size``; a block draw always produces all
``block_size`` rows, so a trajectory's noise never depends on which other trajectories
share its batch, on the number of workers, or on execution order.
"""
from typing import Sequence

import numpy as np
import torch

DEFAULT_BLOCK_SIZE = 1024

# purpose codes, part of the reproducibility contract
PURPOSE_STEP = 0
PURPOSE_INIT = 1
PURPOSE_ORTH = 2
PURPOSE_DATA = 3
PURPOSE_CANDIDATES = 4
PURPOSE_RADIUS = 5
PURPOSE_OFFSET = 6

_WORD = (1 << 64) - 1


def generator(seed: int, block: int = 0, step: int = 0, purpose: int = 0) -> np.random.Generator:
    """Returns a Philox generator positioned at ``(seed, block, step, purpose)``."""
    key = ((int(seed) & _WORD) << 64) | (int(block) & _WORD)
    # draws advance word 0 only, so distinct (step, purpose) never overlap
    counter = np.array([0, int(purpose) & _WORD, int(step) & _WORD, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


class NoiseStream:
    """Per-trajectory noise for a batch of trajectory ids."""

    def __init__(self, seed: int, traj_ids: Sequence[int], dim: int, block_size: int = DEFAULT_BLOCK_SIZE):
        self.seed = int(seed)
        self.traj_ids = np.asarray(traj_ids, dtype=np.int64)
        self.dim = int(dim)
        self.block_size = int(block_size)
        self._blocks = self.traj_ids // self.block_size
        self._rows = self.traj_ids % self.block_size
        self._unique_blocks = np.unique(self._blocks)

    def __len__(self) -> int:
        return len(self.traj_ids)

    def _gather(self, draw, step: int, purpose: int) -> torch.Tensor:
        out = None
        for block in self._unique_blocks:
            values = draw(generator(self.seed, int(block), step, purpose))
            if out is None:
                out = np.empty((len(self.traj_ids),) + values.shape[1:], dtype=np.float64)
            mask = self._blocks == block
            out[mask] = values[self._rows[mask]]
        return torch.from_numpy(out)

    def normal(self, step: int, purpose: int = PURPOSE_STEP, dim: int = None) -> torch.Tensor:
        """Standard normals of shape ``(B, dim)``."""
        dim = self.dim if dim is None else dim
        return self._gather(lambda g: g.standard_normal((self.block_size, dim)), step, purpose)

    def uniform(self, step: int, purpose: int, low: float = 0.0, high: float = 1.0) -> torch.Tensor:
        """Uniforms of shape ``(B,)``."""
        return self._gather(lambda g: g.uniform(low, high, size=self.block_size), step, purpose)


def blocks_for(n_trajectories: int, block_size: int = DEFAULT_BLOCK_SIZE):
    """Splits ``range(n_trajectories)`` into ``(block_id, traj_ids)`` work units."""
    for block in range((n_trajectories + block_size - 1) // block_size):
        start = block * block_size
        yield block, np.arange(start, min(start + block_size, n_trajectories), dtype=np.int64)
