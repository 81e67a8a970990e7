"""Regime experiments: critical-time sweeps over κ, tube convergence and their repetition across dimensions."""
from dataclasses import replace
from typing import Dict, Sequence

import numpy as np
import pandas as pd

from src import utils
from src.analysis.assumptions import detect_tau2
from src.analysis.convergence import MIN_TRAJECTORIES, DistanceMoments, fit_from_moments
from src.diffusion.geometry import adjacent_pairs, epsilon_from_kappa, segment_frame
from src.diffusion.mixture import build_grid_mixture
from src.diffusion.samplers import ExactScore
from src.diffusion.schedule import build_linear_schedule
from src.experiments.engine import BlockEngine, LabContext
from src.experiments.trajectories import (
    SamplingJob,
    ddim_sampler,
    make_sampler_config,
    run_job,
    summarize_moments,
    summarize_tau1,
)

log = utils.get_logger(__name__)


def kappa_grid(analysis: Dict) -> np.ndarray:
    grid = analysis["kappa_grid"]
    return np.linspace(float(grid["start"]), float(grid["stop"]), int(grid["num"]))


def min_pair_length(ctx: LabContext) -> float:
    return min(segment_frame(ctx.gmm, i, j).ell for i, j in adjacent_pairs(ctx.gmm))


def nonincreasing(values: Sequence[float]) -> bool:
    values = np.asarray(values, dtype=np.float64)
    values = values[~np.isnan(values)]
    return bool(np.all(np.diff(values) <= 0))


def tau2_values(frame: pd.DataFrame) -> np.ndarray:
    return frame["tau2"].to_numpy(dtype=np.float64, na_value=np.nan)


def tau_curves(ctx: LabContext, tau1: pd.DataFrame, keys: Sequence[str] = ()) -> pd.DataFrame:
    """τ₁ statistics joined with τ₂ of the shortest adjacent pair, per κ."""
    summary = summarize_tau1(tau1, list(keys))
    if summary.empty:
        return summary
    ell = min_pair_length(ctx)
    tau2 = [detect_tau2(ell, ctx.schedule, float(k), ctx.gmm.dim) for k in summary["kappa"]]
    summary["tau2"] = pd.array(tau2, dtype="Int64")
    summary["tau2_below_tau1"] = tau2_values(summary) < summary["tau1_mean"].to_numpy()
    return summary


def run_kappa_sweep(ctx: LabContext, engine: BlockEngine, n: int) -> Dict[str, pd.DataFrame]:
    """τ₁ (mean over trajectories) and τ₂ on a grid of κ values for the configured sampler."""
    analysis = ctx.params["analysis"]
    kappas = tuple(float(k) for k in kappa_grid(analysis))
    config = make_sampler_config(ctx, ctx.params["sampler"])
    job = SamplingJob("kappa_sweep", ctx, config, ("tau1",), tags=(("sampler", config.kind),), kappas=kappas)
    curves = tau_curves(ctx, run_job(engine, job, n)["tau1"], ["sampler"])
    checks = pd.DataFrame()
    if not curves.empty:
        checks = pd.DataFrame(
            [
                dict(
                    tau1_nonincreasing=nonincreasing(curves["tau1_mean"]),
                    tau2_nonincreasing=nonincreasing(tau2_values(curves)),
                    tau1_always_present=bool((curves["present_fraction"] == 1.0).all()),
                    tau2_always_present=bool(curves["tau2"].notna().all()),
                )
            ]
        )
        log.info(f"kappa sweep checks: {checks.iloc[0].to_dict()}")
    return {"curves": curves, "checks": checks}


def moments_to_fit(ctx: LabContext, summed: pd.DataFrame):
    moments = DistanceMoments(
        times=summed.index.to_numpy(dtype=np.int64),
        total=summed["total"].to_numpy(),
        total_sq=summed["total_sq"].to_numpy(),
        count=summed["count"].to_numpy(),
    )
    return fit_from_moments(moments, ctx.schedule)


def convergence_tables(ctx: LabContext, moments: pd.DataFrame, keys: Sequence[str]):
    """Per-condition fit rows and the (t, u, mean, half-width) curves they were fitted on."""
    fits, curves = [], []
    for key, summed in summarize_moments(moments, keys).items():
        tags = dict(zip(keys, key))
        if summed["count"].min() < MIN_TRAJECTORIES:
            log.warning(f"{tags}: fewer than {MIN_TRAJECTORIES} trajectories, convergence not fitted")
            fits.append(dict(tags, fittable=False))
            continue
        fit = moments_to_fit(ctx, summed)
        fits.append(
            dict(
                tags,
                slope=fit.slope,
                intercept=fit.intercept,
                plateau=fit.plateau,
                fittable=fit.fittable,
                r_value=fit.r_value,
                fit_start=fit.region[0],
                fit_stop=fit.region[1],
                slope_in_band=fit.fittable and -1.2 <= fit.slope <= -0.8,
            )
        )
        curves.append(pd.DataFrame(dict(tags, t=fit.times, u=fit.u, mean=fit.mean, halfwidth=fit.halfwidth)))
    curve_frame = pd.concat(curves, ignore_index=True) if curves else pd.DataFrame()
    return pd.DataFrame(fits), curve_frame


def run_convergence(ctx: LabContext, engine: BlockEngine, n: int) -> Dict[str, pd.DataFrame]:
    """Mean distance to the dominant ε-extended segment against u-time, fitted per sampler."""
    analysis = ctx.params["analysis"]
    kappa = analysis["kappa"]
    eps = epsilon_from_kappa(ctx.gmm.n_modes, kappa)
    moments, initial = [], []
    for kind in ("ddpm", "ddim"):
        sampler = {"kind": "ddpm"} if kind == "ddpm" else ddim_sampler(ctx.params)
        config = make_sampler_config(ctx, sampler)
        job = SamplingJob(
            f"convergence_{kind}",
            ctx,
            config,
            ("moments", "initial"),
            tags=(("sampler", kind),),
            eps=eps,
            frame=analysis["distance_frame"],
            eps_convention=analysis["eps_convention"],
            phi=analysis["phi"],
        )
        result = run_job(engine, job, n)
        moments.append(result["moments"])
        initial.append(result["initial"])
    fits, curves = convergence_tables(ctx, pd.concat(moments, ignore_index=True), ["sampler"])
    fits["eps"] = eps
    if {"plateau", "sampler"} <= set(fits.columns) and fits["plateau"].notna().all():
        plateau = dict(zip(fits["sampler"], fits["plateau"]))
        fits["ddpm_plateau_below_ddim"] = plateau.get("ddpm", np.nan) < plateau.get("ddim", np.nan)

    initial = pd.concat(initial, ignore_index=True)
    checks = pd.DataFrame()
    if not initial.empty:
        grouped = initial.groupby("sampler", sort=False).agg(
            n=("n", "sum"), n_within=("n_within", "sum"), threshold=("threshold", "first"), guarantee=("guarantee", "first")
        )
        grouped["fraction"] = grouped["n_within"] / grouped["n"]
        grouped["ok"] = grouped["fraction"] >= grouped["guarantee"]
        checks = grouped.reset_index()
    return {"fits": fits, "curves": curves, "initial": checks}


def run_dim_sweep(ctx: LabContext, engine: BlockEngine, n: int) -> Dict[str, pd.DataFrame]:
    """κ sweep and convergence fit repeated for each ambient dimension, same number of modes."""
    params = ctx.params
    analysis, mixture, schedule = params["analysis"], params["mixture"], params["schedule"]
    kappas = tuple(float(k) for k in kappa_grid(analysis))
    curves, fits, traces = [], [], []
    for dim in analysis["dims"]:
        mix_args = {k: v for k, v in mixture.items() if k not in ("_target_", "dim", "n_keep")}
        gmm = build_grid_mixture(dim=int(dim), n_keep=ctx.gmm.n_modes, **mix_args)
        sched = build_linear_schedule(
            T=schedule["T"], beta_min=schedule["beta_min"], beta_max=schedule["beta_max"], sigma_data=gmm.sigma
        )
        variant = replace(ctx, gmm=gmm, schedule=sched, score=ExactScore(gmm, sched))
        config = make_sampler_config(variant, ddim_sampler(params))
        job = SamplingJob(
            f"dim_sweep_{int(dim)}",
            variant,
            config,
            ("tau1", "moments"),
            tags=(("dim", int(dim)),),
            eps=epsilon_from_kappa(gmm.n_modes, analysis["kappa"]),
            frame=analysis["distance_frame"],
            eps_convention=analysis["eps_convention"],
            kappas=kappas,
        )
        result = run_job(engine, job, n)
        curves.append(tau_curves(variant, result["tau1"], ["dim"]))
        fit, trace = convergence_tables(variant, result["moments"], ["dim"])
        fits.append(fit)
        traces.append(trace)
    return {
        "curves": pd.concat(curves, ignore_index=True),
        "fits": pd.concat(fits, ignore_index=True),
        "convergence": pd.concat(traces, ignore_index=True),
    }
