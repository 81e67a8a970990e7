"""Experiments on single mode pairs: trap, tau3-ablation, bound-check, eigen and perturbation."""
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import torch

from src import utils
from src.analysis.assumptions import detect_tau2
from src.analysis.bounds import brownian_confinement_check, estimate_drift_bounds, terminal_midpoint_probability
from src.analysis.equilibria import (
    drift_from_score,
    find_interior_saddle,
    find_mode_equilibria,
    midpoint_eigenvalues,
    trapping_spec,
    trapping_window_check,
)
from src.analysis.perturbation import estimate_error_spec, perturbation_analysis
from src.analysis.trapping import signed_offsets, trapping_experiment
from src.diffusion.geometry import adjacent_pairs, epsilon_from_kappa, segment_frame
from src.diffusion.samplers import ConstantErrorField, ExactScore, LinearErrorField, SamplerConfig
from src.experiments.engine import BlockEngine, LabContext
from src.experiments.trajectories import ddim_sampler, make_grid, make_sampler_config
from src.models.score_error import score_error_field
from src.utils.metrics import standard_error

log = utils.get_logger(__name__)


def selected_pairs(ctx: LabContext) -> List[Tuple[int, int]]:
    pairs = list(adjacent_pairs(ctx.gmm))
    limit = ctx.params["analysis"].get("n_pairs")
    return pairs[:limit] if limit else pairs


def pair_weights(ctx: LabContext, i: int, j: int) -> Tuple[float, float]:
    w_i, w_j = float(ctx.gmm.weights[i]), float(ctx.gmm.weights[j])
    return w_i / (w_i + w_j), w_j / (w_i + w_j)


@dataclass(frozen=True)
class TrapJob:
    ctx: LabContext
    pairs: Tuple[Tuple[int, int], ...]
    samplers: Tuple[Tuple[str, SamplerConfig], ...]
    tau3: int
    tau3_time: int
    theta: float
    window_scale: float
    n_per_pair: int


def trap_block(job: TrapJob, block: int, ids: np.ndarray) -> Dict[str, List[dict]]:
    ctx = job.ctx
    trials, windows = [], []
    for p in ids:
        i, j = job.pairs[int(p)]
        segment = segment_frame(ctx.gmm, i, j)
        spec = trapping_spec(segment, ctx.schedule, job.theta, tau3=job.tau3, tau3_time=job.tau3_time)
        half_width = job.window_scale * job.theta
        entry_violations = trapping_window_check(spec, segment.ell, ctx.schedule) if spec.entry_window > 0 else None
        windows.append(
            dict(
                pair=int(p),
                i=i,
                j=j,
                tau3_time=job.tau3_time,
                entry_window=spec.entry_window,
                Lambda_plus=spec.Lambda_plus,
                lambda_min=spec.lambda_min,
                admissible=spec.admissible,
                entry_violations=entry_violations,
                restart_window=half_width,
                window_violations=trapping_window_check(spec, segment.ell, ctx.schedule, window=half_width),
            )
        )
        offsets = signed_offsets(job.n_per_pair, half_width)
        for label, config in job.samplers:
            result = trapping_experiment(
                job.tau3_time,
                job.theta,
                config,
                segment,
                ctx.gmm,
                ctx.score,
                job.n_per_pair,
                first_id=int(p) * job.n_per_pair,
                offsets=offsets,
            )
            for offset, xi, stuck in zip(result.offsets, result.terminal_xi, result.stuck):
                trials.append(dict(pair=int(p), i=i, j=j, sampler=label, offset=float(offset), terminal_xi=float(xi), stuck=int(stuck)))
    return {f"{job_stage(job)}__trials": trials, f"{job_stage(job)}__windows": windows}


def job_stage(job: TrapJob) -> str:
    return f"trap_tau3_{job.tau3}_" + "_".join(label for label, _ in job.samplers).replace("=", "")


def trap_samplers(ctx: LabContext, specs: Dict[str, Dict], tau3: int) -> Tuple[Tuple[str, SamplerConfig], ...]:
    """Restart configs on the analysis DDIM grid; ``hybrid`` restarts run only their z ancestral steps."""
    ddim = ddim_sampler(ctx.params)
    out = []
    for label, spec in specs.items():
        if spec["kind"] == "ddpm":
            config = make_sampler_config(ctx, {"kind": "ddpm"})
        elif spec["kind"] == "hybrid":
            config = make_sampler_config(ctx, ddim, kind="hybrid", tau3_index=tau3, z_extra=int(spec["z_extra"]))
        else:
            config = make_sampler_config(ctx, ddim, eta=float(spec.get("eta", 0.0)))
        out.append((label, config))
    return tuple(out)


def trap_table(
    ctx: LabContext, engine: BlockEngine, specs: Dict[str, Dict], stage: str, tau3: Optional[int] = None
) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Per-trial restarts over the selected pairs and the window diagnostics of each pair."""
    analysis = ctx.params["analysis"]
    tau3 = analysis["tau3"] if tau3 is None else int(tau3)
    ddim = ddim_sampler(ctx.params)
    tau3_time = make_grid(ctx.schedule, ddim).time_at_remaining(tau3)
    pairs = tuple(selected_pairs(ctx))
    n_per_pair = max(1, math.ceil(analysis["n_restarts"] / len(pairs)))
    job = TrapJob(
        ctx=ctx,
        pairs=pairs,
        samplers=trap_samplers(ctx, specs, tau3),
        tau3=tau3,
        tau3_time=tau3_time,
        theta=analysis["trap_theta"],
        window_scale=analysis["window_scale"],
        n_per_pair=n_per_pair,
    )
    name = job_stage(job)
    log.info(f"[{stage}] {len(pairs)} pairs x {n_per_pair} restarts from t={tau3_time} (tau3={tau3})")
    frames = engine.run(
        name,
        trap_block,
        job,
        len(pairs),
        analysis["pair_block_size"],
        [f"{name}__trials", f"{name}__windows"],
        sort_by={f"{name}__trials": ["pair"], f"{name}__windows": ["pair"]},
    )
    return frames[f"{name}__trials"], frames[f"{name}__windows"]


def summarize_trials(trials: pd.DataFrame, keys=("sampler",)) -> pd.DataFrame:
    """Stuck and escape rates as the mean over pairs with the standard error across pairs."""
    if trials.empty:
        return pd.DataFrame()
    per_pair = trials.groupby(list(keys) + ["pair"], sort=False)["stuck"].mean().reset_index()
    rows = []
    for key, group in per_pair.groupby(list(keys), sort=False):
        key = key if isinstance(key, tuple) else (key,)
        rates = group["stuck"].to_numpy()
        row = dict(zip(keys, key))
        row.update(n_pairs=len(rates), stuck_rate=float(rates.mean()), stuck_se=standard_error(rates))
        row["escape_rate"] = 1.0 - row["stuck_rate"]
        rows.append(row)
    return pd.DataFrame(rows)


def offset_curve(trials: pd.DataFrame, n_bins: int = 20) -> pd.DataFrame:
    """Stuck rate against |offset|/ℓ_t in equal-width bins, per sampler."""
    if trials.empty:
        return pd.DataFrame()
    magnitude = trials["offset"].abs()
    edges = np.linspace(0.0, float(magnitude.max()) or 1.0, n_bins + 1)
    index = np.clip(np.searchsorted(edges, magnitude, side="right") - 1, 0, n_bins - 1)
    frame = trials.assign(bin=index)
    curve = frame.groupby(["sampler", "bin"], sort=False)["stuck"].mean().reset_index()
    curve["offset"] = 0.5 * (edges[curve["bin"]] + edges[curve["bin"] + 1])
    return curve.rename(columns={"stuck": "stuck_rate"})[["sampler", "offset", "stuck_rate"]]


def default_trap_specs(analysis: Dict) -> Dict[str, Dict]:
    specs = {"ddim": {"kind": "ddim", "eta": 0.0}, "ddpm": {"kind": "ddpm"}}
    for z in analysis["z_values"]:
        specs[f"hybrid_z{int(z)}"] = {"kind": "hybrid", "z_extra": int(z)}
    return specs


def run_trap(ctx: LabContext, engine: BlockEngine, n: int) -> Dict[str, pd.DataFrame]:
    """Restarts inside the midpoint window for DDIM, DDPM and the DDIM + z DDPM hybrids."""
    trials, windows = trap_table(ctx, engine, default_trap_specs(ctx.params["analysis"]), "trap")
    summary = summarize_trials(trials)
    return {"trials": trials, "windows": windows, "summary": summary, "offset_curve": offset_curve(trials)}


def run_tau3_ablation(ctx: LabContext, engine: BlockEngine, n: int) -> Dict[str, pd.DataFrame]:
    analysis = ctx.params["analysis"]
    specs = default_trap_specs(analysis)
    ddim = ddim_sampler(ctx.params)
    grid = make_grid(ctx.schedule, ddim)
    frames = []
    for tau3 in analysis["tau3_values"]:
        trials, _ = trap_table(ctx, engine, specs, f"tau3_{tau3}", tau3=int(tau3))
        summary = summarize_trials(trials)
        summary.insert(0, "tau3_time", grid.time_at_remaining(int(tau3)))
        summary.insert(0, "tau3", int(tau3))
        frames.append(summary)
    return {"summary": pd.concat(frames, ignore_index=True)}


@dataclass(frozen=True)
class BoundJob:
    ctx: LabContext
    pairs: Tuple[Tuple[int, int], ...]
    t_start: int
    thetas: Tuple[float, ...]
    theta: float
    a_star: float
    n_samples: int
    n_paths: int
    z_bound: float


def bound_block(job: BoundJob, block: int, ids: np.ndarray) -> Dict[str, List[dict]]:
    ctx = job.ctx
    rows = []
    for p in ids:
        i, j = job.pairs[int(p)]
        segment = segment_frame(ctx.gmm, i, j)
        inputs = estimate_drift_bounds(
            segment, ctx.schedule, ctx.score, job.t_start, job.n_samples, job.theta, job.a_star, job.z_bound, ctx.seed
        )
        lengths = [theta * segment.ell for theta in job.thetas]
        probabilities = terminal_midpoint_probability(
            segment, ctx.schedule, ctx.score, inputs, lengths, job.n_paths, 0.0, job.z_bound, ctx.seed
        )
        for fraction, result in zip(job.thetas, probabilities):
            rows.append(
                dict(
                    pair=int(p),
                    i=i,
                    j=j,
                    t_start=job.t_start,
                    theta_fraction=float(fraction),
                    theta=result.theta,
                    probability=result.probability,
                    se=result.se,
                    bound=result.bound,
                    ok=result.ok,
                    lambda_rep=inputs.lambda_rep,
                    repulsion_ok=inputs.repulsion_ok,
                    eta_max=inputs.eta_max,
                    eta_integral=inputs.eta_integral,
                    K_integral=inputs.K_integral,
                )
            )
    return {"bound_check__bounds": rows}


def run_bound_check(ctx: LabContext, engine: BlockEngine, n: int) -> Dict[str, pd.DataFrame]:
    """Bisector-SDE midpoint probability against the DDPM terminal bound on every pair."""
    analysis = ctx.params["analysis"]
    ddim = ddim_sampler(ctx.params)
    t_start = make_grid(ctx.schedule, ddim).time_at_remaining(analysis["bound_tau3"])
    pairs = tuple(selected_pairs(ctx))
    job = BoundJob(
        ctx=ctx,
        pairs=pairs,
        t_start=t_start,
        thetas=tuple(float(v) for v in analysis["thetas"]),
        theta=analysis["theta_bound"],
        a_star=analysis["a_star"],
        n_samples=analysis["n_bound_samples"],
        n_paths=analysis["n_paths"],
        z_bound=analysis["z_bound"],
    )
    bounds = engine.run(
        "bound_check", bound_block, job, len(pairs), analysis["pair_block_size"], ["bound_check__bounds"],
        sort_by={"bound_check__bounds": ["pair", "theta_fraction"]},
    )["bound_check__bounds"]
    confinement = analysis["confinement"]
    check = brownian_confinement_check(
        confinement["variance"], confinement["half_width"], analysis["n_paths"], confinement["n_substeps"], ctx.seed
    )
    confinement_row = dict(
        variance=check.variance,
        half_width=check.half_width,
        empirical=check.empirical,
        se=check.se,
        bound=check.bound,
        bound_capped=check.bound_capped,
        ok=check.ok,
    )
    if not bounds.empty:
        log.info(f"repulsion holds on {int(bounds.groupby('pair')['repulsion_ok'].first().sum())} of {len(pairs)} pairs")
    return {"bounds": bounds, "confinement": pd.DataFrame([confinement_row])}


@dataclass(frozen=True)
class EigenJob:
    ctx: LabContext
    pairs: Tuple[Tuple[int, int], ...]
    kappa: float
    stride: int


def eigen_block(job: EigenJob, block: int, ids: np.ndarray) -> Dict[str, List[dict]]:
    ctx = job.ctx
    exact = isinstance(ctx.score, ExactScore)
    rows = []
    for p in ids:
        i, j = job.pairs[int(p)]
        segment = segment_frame(ctx.gmm, i, j)
        tau2 = detect_tau2(segment.ell, ctx.schedule, job.kappa, ctx.gmm.dim)
        if tau2 is None:
            rows.append(dict(pair=int(p), i=i, j=j, t=None, tau2=None))
            continue
        times = sorted(set(range(0, tau2 + 1, job.stride)) | {tau2})
        for t in times:
            s2 = ctx.schedule.sigma_tilde_sq(t)
            drift = None if exact else drift_from_score(ctx.score, t)
            spectrum = midpoint_eigenvalues(segment, ctx.schedule, t, ctx.gmm, drift=drift, kappa=job.kappa)
            saddle = find_interior_saddle(segment, s2, pair_weights(ctx, i, j), ctx.gmm, job.kappa)
            modes = find_mode_equilibria(segment, s2, ctx.gmm, job.kappa)
            rows.append(
                dict(
                    pair=int(p),
                    i=i,
                    j=j,
                    t=int(t),
                    tau2=tau2,
                    lambda_analytic=spectrum.lambda_analytic,
                    eig_max=float(spectrum.eigenvalues[0]),
                    eig_min=float(spectrum.eigenvalues[-1]),
                    n_positive=spectrum.n_positive,
                    relative_error=spectrum.relative_error,
                    regime_ok=spectrum.regime_ok,
                    xi_saddle=saddle.xi_pair,
                    xi_saddle_full=saddle.xi_full,
                    saddle_displacement=saddle.displacement,
                    displacement_bound=saddle.displacement_bound,
                    slope_floor=saddle.slope_floor,
                    interval_shrunk=saddle.interval_shrunk,
                    xi_mode_i=modes.xi_i,
                    xi_mode_j=modes.xi_j,
                    modes_stable=modes.stable,
                )
            )
    return {"eigen__spectra": rows}


def run_eigen(ctx: LabContext, engine: BlockEngine, n: int) -> Dict[str, pd.DataFrame]:
    """Midpoint spectrum, interior saddle and mode equilibria for t ≤ τ₂ on every adjacent pair."""
    analysis = ctx.params["analysis"]
    pairs = tuple(selected_pairs(ctx))
    job = EigenJob(ctx, pairs, analysis["kappa"], analysis["eigen_stride"])
    spectra = engine.run(
        "eigen", eigen_block, job, len(pairs), analysis["pair_block_size"], ["eigen__spectra"],
        sort_by={"eigen__spectra": ["pair", "t"]},
    )["eigen__spectra"]
    summary = pd.DataFrame()
    if not spectra.empty and "relative_error" in spectra:
        valid = spectra.dropna(subset=["relative_error"])
        summary = pd.DataFrame(
            [
                dict(
                    n_pairs=int(spectra["pair"].nunique()),
                    n_points=len(valid),
                    max_relative_error=float(valid["relative_error"].max()),
                    all_one_positive=bool((valid["n_positive"] == 1).all()),
                    max_saddle_displacement=float(valid["saddle_displacement"].max()),
                )
            ]
        )
    return {"spectra": spectra, "summary": summary}


@dataclass(frozen=True)
class PerturbationJob:
    ctx: LabContext
    pair: Tuple[int, int]
    kinds: Tuple[str, ...]
    magnitude: float
    times: Tuple[int, ...]
    eps: float
    n_samples: int
    theta: float
    lambda_rep: Optional[float]
    span_start: int
    slack: float = 10.0


def error_field(job: PerturbationJob, kind: str, segment):
    ctx = job.ctx
    if kind == "constant":
        return ConstantErrorField(job.magnitude * segment.u)
    if kind == "linear":
        return LinearErrorField(job.magnitude * torch.outer(segment.u, segment.u), segment.midpoint, ctx.schedule)
    raise ValueError(kind)


def perturbation_block(job: PerturbationJob, block: int, ids: np.ndarray) -> Dict[str, List[dict]]:
    ctx = job.ctx
    segment = segment_frame(ctx.gmm, *job.pair)
    weights = pair_weights(ctx, *job.pair)
    rows = []
    for k in ids:
        kind = job.kinds[int(k)]
        if kind == "residual":
            spec = score_error_field(ctx.score, ctx.gmm, ctx.schedule, segment, job.times, job.eps, job.n_samples, ctx.seed)
        else:
            spec = estimate_error_spec(error_field(job, kind, segment), segment, ctx.schedule, job.times, job.eps, job.n_samples, ctx.seed)
        for t in job.times:
            result = perturbation_analysis(spec, segment, ctx.schedule, int(t), weights, job.theta, job.lambda_rep, job.span_start)
            row = dict(kind=kind, t=int(t), rho=spec.at(spec.rho, int(t)), lipschitz=spec.at(spec.lipschitz, int(t)))
            row.update(
                xi_saddle=result.xi_saddle,
                xi_perturbed=result.xi_perturbed,
                destroyed=result.destroyed,
                lambda_t=result.lambda_t,
                rho_bar=result.rho_bar,
                shift=result.shift,
                shift_bound=result.shift_bound,
                shift_ok=None if result.shift is None else result.shift <= result.shift_bound + job.slack * result.rho_bar**2,
                slope_perturbed=result.slope_perturbed,
                eigen_shift=result.eigen_shift,
                directional=result.directional,
                slope_predicted=result.slope_predicted,
                stabilized=result.stabilized,
                r_a_max=result.r_a_max,
                escape_ok=result.escape_ok,
                lambda_rep_reduced=result.lambda_rep_reduced,
            )
            rows.append(row)
    return {"perturbation__results": rows}


def run_perturbation(ctx: LabContext, engine: BlockEngine, n: int) -> Dict[str, pd.DataFrame]:
    """Saddle shift, slope change and DDPM escape margin under injected or measured score errors."""
    analysis = ctx.params["analysis"]
    settings = analysis["perturbation"]
    pairs = selected_pairs(ctx)
    pair = pairs[int(settings["pair"]) % len(pairs)]
    segment = segment_frame(ctx.gmm, *pair)
    tau2 = detect_tau2(segment.ell, ctx.schedule, analysis["kappa"], ctx.gmm.dim) or 1
    times = tuple(sorted(set(range(1, tau2 + 1, settings["stride"])) | {tau2}))
    ddim = ddim_sampler(ctx.params)
    span_start = make_grid(ctx.schedule, ddim).time_at_remaining(analysis["bound_tau3"])
    inputs = estimate_drift_bounds(
        segment, ctx.schedule, ExactScore(ctx.gmm, ctx.schedule), span_start, analysis["n_bound_samples"],
        analysis["theta_bound"], analysis["a_star"], seed=ctx.seed,
    )
    kinds = tuple(settings["kinds"])
    job = PerturbationJob(
        ctx=ctx,
        pair=pair,
        kinds=kinds,
        magnitude=float(settings["magnitude"]),
        times=times,
        eps=epsilon_from_kappa(ctx.gmm.n_modes, analysis["kappa"]),
        n_samples=settings["n_samples"],
        theta=analysis["theta_bound"],
        lambda_rep=inputs.lambda_rep,
        span_start=span_start,
    )
    results = engine.run(
        "perturbation", perturbation_block, job, len(kinds), 1, ["perturbation__results"],
        sort_by={"perturbation__results": ["kind", "t"]},
    )["perturbation__results"]
    return {"results": results}
