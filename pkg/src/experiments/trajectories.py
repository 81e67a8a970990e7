"""Trajectory blocks: sample once, then compute every requested measure on the batch."""
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.analysis.assumptions import detect_tau1_batch
from src.analysis.convergence import distance_moments, initial_distance_check
from src.analysis.hallucination import classify_samples, diagonal_avoidance_check, hallucination_rates
from src.analysis.trapping import entered_midpoint
from src.diffusion.samplers import SamplerConfig, sample_batch
from src.diffusion.schedule import NoiseSchedule, StepGrid, build_grid, ddpm_full_grid
from src.experiments.engine import BlockEngine, LabContext
from src.utils.data_utils import dump_trajectories
from src.utils.errors import ConfigError

MEASURES = ("classify", "midpoint", "diagonal", "moments", "tau1", "initial")


@dataclass(frozen=True)
class SamplingJob:
    """One sampler condition; ``tags`` are copied into every row it produces."""

    stage: str
    ctx: LabContext
    config: SamplerConfig
    measures: Tuple[str, ...] = ("classify",)
    tags: Tuple[Tuple[str, object], ...] = ()
    eps: float = 0.0
    frame: str = "rescaled"
    eps_convention: str = "fraction"
    kappas: Tuple[float, ...] = ()
    kappa: float = 7.0
    theta: float = 0.15
    tau3_time: int = 0
    phi: float = 0.5
    dump_dir: Optional[str] = None

    def table(self, measure: str) -> str:
        return f"{self.stage}__{measure}"


def make_grid(schedule: NoiseSchedule, sampler: Dict) -> StepGrid:
    if sampler["kind"] == "ddpm":
        return ddpm_full_grid(schedule)
    return build_grid(schedule, sampler.get("grid", "ddim_quadratic"), sampler.get("n_steps"))


def make_sampler_config(ctx: LabContext, sampler: Dict, **overrides) -> SamplerConfig:
    """SamplerConfig from a plain sampler mapping (kind, grid, n_steps, eta, z_extra, tau3_index)."""
    sampler = dict(sampler, **overrides)
    return SamplerConfig(
        kind=sampler["kind"],
        grid=make_grid(ctx.schedule, sampler),
        eta=float(sampler.get("eta") or 0.0),
        z_extra=int(sampler.get("z_extra") or 0),
        tau3_index=sampler.get("tau3_index"),
        seed=ctx.seed,
        block_size=ctx.block_size,
    )


def tau3_to_time(schedule: NoiseSchedule, tau3: int, n_steps: int = 50, kind: str = "ddim_quadratic") -> int:
    """DDPM time index of the DDIM grid entry with ``tau3`` steps left."""
    return build_grid(schedule, kind, n_steps).time_at_remaining(tau3)


def trajectory_block(job: SamplingJob, block: int, ids: np.ndarray) -> Dict[str, List[dict]]:
    ctx = job.ctx
    unknown = set(job.measures) - set(MEASURES)
    if unknown:
        raise ConfigError(f"unknown trajectory measures {sorted(unknown)}")
    record = None
    if set(job.measures) <= {"classify", "midpoint"}:
        record = set(range(0, job.tau3_time + 1)) if "midpoint" in job.measures else set()
    batch = sample_batch(
        job.config, ctx.score, ctx.schedule, ids, ctx.gmm.dim, config_hash=ctx.config_hash, record_times=record
    )
    tags = dict(job.tags)
    out: Dict[str, List[dict]] = {}

    if job.dump_dir is not None:
        dump_trajectories(f"{job.dump_dir}/{job.stage}/block_{block:06d}.csv", batch, ctx.block_size, job.config.to_dict())

    if "classify" in job.measures or "midpoint" in job.measures:
        labels = classify_samples(ctx.gmm, batch.terminal)
        entered = None
        if "midpoint" in job.measures:
            entered = entered_midpoint(batch, ctx.gmm, ctx.schedule, job.theta, job.tau3_time)
        rows = []
        terminal = batch.terminal.numpy()
        for b, traj in enumerate(batch.traj_ids):
            row = dict(tags, traj_id=int(traj), label=int(labels.codes[b]), i=int(labels.i[b]), j=int(labels.j[b]))
            row["failed_at"] = int(batch.failed_at[b])
            if entered is not None:
                row["entered_m"] = int(entered[b])
            for d in range(terminal.shape[1]):
                row[f"x_{d}"] = float(terminal[b, d])
            rows.append(row)
        out[job.table("samples")] = rows

    if "moments" in job.measures:
        moments = distance_moments(batch, ctx.gmm, ctx.schedule, job.eps, job.frame, job.eps_convention)
        out[job.table("moments")] = [
            dict(tags, block=block, t=int(t), total=float(s), total_sq=float(q), count=float(c))
            for t, s, q, c in zip(moments.times, moments.total, moments.total_sq, moments.count)
        ]

    if "tau1" in job.measures:
        tau1 = detect_tau1_batch(batch, ctx.gmm, ctx.schedule, job.kappas)
        rows = []
        for kappa, values in zip(job.kappas, tau1):
            present = values >= 0
            held = np.where(present, values, 0).astype(np.float64)
            rows.append(
                dict(
                    tags,
                    block=block,
                    kappa=float(kappa),
                    n=int(values.size),
                    n_present=int(present.sum()),
                    total=float(held.sum()),
                    total_sq=float((held * held).sum()),
                )
            )
        out[job.table("tau1")] = rows

    if "diagonal" in job.measures:
        report = diagonal_avoidance_check(batch, ctx.gmm, ctx.schedule, job.kappa)
        out[job.table("diagonal")] = [
            dict(
                tags,
                block=block,
                n_states=report.n_states,
                max_min_responsibility=report.max_min_responsibility,
                violations=report.violations,
                n_interpolations=report.n_interpolations,
                n_diagonal_interpolations=report.n_diagonal_interpolations,
            )
        ]

    if "initial" in job.measures:
        check = initial_distance_check(batch, ctx.gmm, ctx.schedule, job.phi)
        out[job.table("initial")] = [
            dict(tags, block=block, n=check.n, n_within=int(round(check.fraction * check.n)), threshold=check.threshold, guarantee=check.guarantee)
        ]
    return out


def run_job(engine: BlockEngine, job: SamplingJob, n_trajectories: int) -> Dict[str, pd.DataFrame]:
    """Runs ``job`` over trajectory ids 0..n−1; keys of the result are the measure names."""
    measures = list(job.measures)
    tables = []
    for measure in measures:
        name = "samples" if measure in ("classify", "midpoint") else measure
        if job.table(name) not in tables:
            tables.append(job.table(name))
    sort_by = {job.table("samples"): ["traj_id"]}
    frames = engine.run(job.stage, trajectory_block, job, n_trajectories, job.ctx.block_size, tables, sort_by)
    return {name.split("__", 1)[1]: frame for name, frame in frames.items()}


def summarize_labels(samples: pd.DataFrame, keys: Sequence[str]) -> pd.DataFrame:
    """Hallucination rates per condition, inclusive and exclusive of invalid samples."""
    if samples.empty:
        return pd.DataFrame()
    rows = []
    groups = samples.groupby(list(keys), sort=False) if keys else [((), samples)]
    for key, group in groups:
        key = key if isinstance(key, tuple) else (key,)
        row = dict(zip(keys, key))
        row.update(hallucination_rates(group["label"].to_numpy()))
        row["n_failed"] = int((group["failed_at"] >= 0).sum())
        rows.append(row)
    return pd.DataFrame(rows)


def summarize_moments(moments: pd.DataFrame, keys: Sequence[str]) -> Dict[tuple, pd.DataFrame]:
    """Per-condition sums over blocks, in block order."""
    out = {}
    if moments.empty:
        return out
    groups = moments.groupby(list(keys), sort=False) if keys else [((), moments)]
    for key, group in groups:
        key = key if isinstance(key, tuple) else (key,)
        group = group.sort_values(["block", "t"], ascending=[True, False], kind="mergesort")
        summed = group.groupby("t", sort=False)[["total", "total_sq", "count"]].sum()
        out[key] = summed.sort_index(ascending=False)
    return out


def summarize_tau1(tau1: pd.DataFrame, keys: Sequence[str]) -> pd.DataFrame:
    if tau1.empty:
        return pd.DataFrame()
    tau1 = tau1.sort_values(list(keys) + ["kappa", "block"], kind="mergesort")
    summed = tau1.groupby(list(keys) + ["kappa"], sort=False)[["n", "n_present", "total", "total_sq"]].sum().reset_index()
    n = summed["n"].astype(np.float64)
    summed["tau1_mean"] = summed["total"] / n
    var = (summed["total_sq"] / n - summed["tau1_mean"] ** 2).clip(lower=0.0) * n / (n - 1.0).clip(lower=1.0)
    summed["tau1_se"] = np.sqrt(var / n)
    summed["present_fraction"] = summed["n_present"] / n
    return summed.drop(columns=["total", "total_sq"])


def ddim_sampler(params: Dict, **overrides) -> Dict:
    """The configured sampler as a DDIM sampler, falling back to the quadratic analysis grid."""
    sampler = dict(params["sampler"], kind="ddim", **overrides)
    if sampler.get("grid") in (None, "ddpm_full"):
        sampler["grid"] = "ddim_quadratic"
    if not sampler.get("n_steps"):
        sampler["n_steps"] = params["analysis"]["ddim_steps"]
    return sampler
