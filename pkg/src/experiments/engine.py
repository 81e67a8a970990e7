"""Block work queue shared by every experiment.

Work items (trajectory ids, mode pairs, κ values ...) are cut into fixed blocks. A block function
returns ``{table: rows}``; each table is flushed to ``partials/<table>/block_<id>.csv`` as soon as
the block finishes, and a marker records the block as complete. Final tables are always rebuilt
from the partial files in block order, so the outcome does not depend on the worker count or
on whether the run was resumed.
"""
import functools
import multiprocessing
import pathlib
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from src import utils
from src.diffusion.mixture import GaussianMixture
from src.diffusion.samplers import ScoreSource
from src.diffusion.schedule import NoiseSchedule
from src.utils.data_utils import collect_partials, partial_path, write_table

log = utils.get_logger(__name__)

BlockFn = Callable[[Any, int, np.ndarray], Dict[str, List[dict]]]


@dataclass
class LabContext:
    """Everything a block function needs; must stay picklable for spawned workers."""

    gmm: GaussianMixture
    schedule: NoiseSchedule
    score: ScoreSource
    params: Dict[str, Any]
    seed: int
    block_size: int
    config_hash: str = ""


@dataclass
class ResultBundle:
    out_dir: pathlib.Path
    manifest: pathlib.Path
    tables: Dict[str, pathlib.Path] = field(default_factory=dict)
    plot_files: List[pathlib.Path] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not self.tables


def _init_worker():
    torch.set_num_threads(1)


def _run_block(fn: BlockFn, payload: Any, unit: Tuple[int, np.ndarray]):
    block, ids = unit
    return block, fn(payload, block, ids)


def item_blocks(n_items: int, block_size: int) -> List[Tuple[int, np.ndarray]]:
    out = []
    for block in range((n_items + block_size - 1) // block_size):
        start = block * block_size
        out.append((block, np.arange(start, min(start + block_size, n_items), dtype=np.int64)))
    return out


class BlockEngine:
    def __init__(self, out_dir, workers: int = 1, resume: bool = False):
        self.out_dir = pathlib.Path(out_dir)
        self.workers = max(1, int(workers))
        self.resume = resume

    def _marker(self, stage: str, block: int) -> pathlib.Path:
        return pathlib.Path(self.out_dir, "partials", "_done", stage, f"block_{block:06d}")

    def _flush(self, stage: str, block: int, tables: Dict[str, List[dict]]) -> None:
        for table, rows in tables.items():
            if rows:
                write_table(partial_path(self.out_dir, table, block), rows)
        marker = self._marker(stage, block)
        marker.parent.mkdir(parents=True, exist_ok=True)
        marker.touch()

    def run(
        self,
        stage: str,
        fn: BlockFn,
        payload: Any,
        n_items: int,
        block_size: int,
        tables: Sequence[str],
        sort_by: Optional[Dict[str, Iterable[str]]] = None,
    ) -> Dict[str, pd.DataFrame]:
        """Runs ``fn`` over every block of ``range(n_items)`` and returns the collected tables."""
        units = item_blocks(n_items, block_size)
        if self.resume:
            done = [u for u in units if self._marker(stage, u[0]).exists()]
            if done:
                log.info(f"[{stage}] resuming, {len(done)} of {len(units)} blocks already complete")
            units = [u for u in units if not self._marker(stage, u[0]).exists()]
        else:
            for table in tables:
                for stale in pathlib.Path(self.out_dir, "partials", table).glob("block_*.csv"):
                    stale.unlink()
            for stale in pathlib.Path(self.out_dir, "partials", "_done", stage).glob("block_*"):
                stale.unlink()

        task = functools.partial(_run_block, fn, payload)
        progress = tqdm(total=len(units), desc=stage, disable=not units, leave=False)
        if self.workers == 1 or len(units) <= 1:
            threads = torch.get_num_threads()
            torch.set_num_threads(1)
            try:
                for unit in units:
                    block, result = task(unit)
                    self._flush(stage, block, result)
                    progress.update()
            finally:
                torch.set_num_threads(threads)
        else:
            context = multiprocessing.get_context("spawn")
            with context.Pool(self.workers, initializer=_init_worker) as pool:
                for block, result in pool.imap_unordered(task, units):
                    self._flush(stage, block, result)
                    progress.update()
        progress.close()

        sort_by = sort_by or {}
        return {table: collect_partials(self.out_dir, table, sort_by.get(table)) for table in tables}
