"""Experiments built on full reverse runs from x_T: sample, step-sweep, eta-sweep,
decomposition, diagonal and hyper-ablation."""
import math
from dataclasses import asdict, replace
from typing import Dict

import pandas as pd

from src import utils
from src.analysis.assumptions import detect_tau2
from src.analysis.hallucination import DiagonalReport
from src.analysis.trapping import MidpointCounts
from src.diffusion.geometry import adjacent_pairs, segment_frame
from src.diffusion.mixture import build_grid_mixture
from src.diffusion.samplers import ExactScore
from src.diffusion.schedule import build_linear_schedule
from src.experiments.engine import BlockEngine, LabContext
from src.experiments.trajectories import (
    SamplingJob,
    ddim_sampler,
    make_sampler_config,
    run_job,
    summarize_labels,
    tau3_to_time,
)

log = utils.get_logger(__name__)


def run_sample(ctx: LabContext, engine: BlockEngine, n: int) -> Dict[str, pd.DataFrame]:
    """Terminal samples of the configured sampler with their classification."""
    params = ctx.params
    config = make_sampler_config(ctx, params["sampler"])
    dump = str(engine.out_dir / "trajectories") if params.get("dump_trajectories") else None
    job = SamplingJob("sample", ctx, config, ("classify",), tags=(("sampler", config.kind),), dump_dir=dump)
    samples = run_job(engine, job, n)["samples"]
    summary = summarize_labels(samples, ["sampler"])
    if not summary.empty:
        row = summary.iloc[0]
        log.info(f"{config.kind}: {row['rate_inclusive_count']} interpolations out of {row['n']} samples")
    return {"samples": samples, "summary": summary}


def run_step_sweep(ctx: LabContext, engine: BlockEngine, n: int) -> Dict[str, pd.DataFrame]:
    """DDIM interpolation rate per grid size and kind, against the full-length DDPM reference."""
    analysis = ctx.params["analysis"]
    frames = []
    ddpm = make_sampler_config(ctx, {"kind": "ddpm"})
    reference = SamplingJob("step_sweep_ddpm", ctx, ddpm, tags=(("sampler", "ddpm"), ("grid", "ddpm_full"), ("n_steps", ctx.schedule.T)))
    frames.append(run_job(engine, reference, n)["samples"])
    for kind in analysis["grid_kinds"]:
        for n_steps in analysis["step_grid_sizes"]:
            config = make_sampler_config(ctx, {"kind": "ddim", "grid": kind, "n_steps": n_steps, "eta": 0.0})
            tags = (("sampler", "ddim"), ("grid", kind), ("n_steps", int(n_steps)))
            job = SamplingJob(f"step_sweep_{kind}_{n_steps}", ctx, config, tags=tags)
            frames.append(run_job(engine, job, n)["samples"])
    samples = pd.concat([f for f in frames if not f.empty], ignore_index=True) if any(not f.empty for f in frames) else pd.DataFrame()
    summary = summarize_labels(samples, ["sampler", "grid", "n_steps"])
    if not summary.empty:
        reference_rate = summary.loc[summary["sampler"] == "ddpm", "rate_inclusive"].iloc[0]
        reference_se = summary.loc[summary["sampler"] == "ddpm", "rate_inclusive_se"].iloc[0]
        se = (summary["rate_inclusive_se"] ** 2 + reference_se**2) ** 0.5
        summary["above_ddpm"] = summary["rate_inclusive"] - reference_rate > 2.0 * se
    return {"summary": summary}


def run_eta_sweep(ctx: LabContext, engine: BlockEngine, n: int) -> Dict[str, pd.DataFrame]:
    """Hallucination rate per DDIM noise level η; the midpoint stuck rate comes from the trap runner."""
    from src.experiments.midpoint import trap_table

    analysis = ctx.params["analysis"]
    sampler = ddim_sampler(ctx.params)
    frames = []
    for eta in analysis["eta_values"]:
        config = make_sampler_config(ctx, sampler, eta=float(eta))
        job = SamplingJob(f"eta_sweep_{eta:g}", ctx, config, tags=(("sampler", "ddim"), ("eta", float(eta))))
        frames.append(run_job(engine, job, n)["samples"])
    samples = pd.concat(frames, ignore_index=True)
    summary = summarize_labels(samples, ["eta"])
    trials, _ = trap_table(ctx, engine, {f"eta={float(eta):g}": {"kind": "ddim", "eta": float(eta)} for eta in analysis["eta_values"]}, "eta_trap")
    stuck = trials.groupby("sampler", sort=False)["stuck"].mean().rename("stuck_rate").reset_index()
    stuck["eta"] = [float(s.split("=", 1)[1]) for s in stuck["sampler"]]
    summary = summary.merge(stuck[["eta", "stuck_rate"]], on="eta", how="left")
    return {"summary": summary}


def run_decomposition(ctx: LabContext, engine: BlockEngine, n: int) -> Dict[str, pd.DataFrame]:
    """P(H), P(M), P(H|M), P(H|Mᶜ) for DDIM and DDPM, with M the ϑ-midpoint entry after t(τ₃)."""
    analysis = ctx.params["analysis"]
    ddim = ddim_sampler(ctx.params)
    tau3_time = tau3_to_time(ctx.schedule, analysis["tau3"], ddim["n_steps"], ddim["grid"])
    rows = []
    for kind, sampler in (("ddim", ddim), ("ddpm", {"kind": "ddpm"})):
        config = make_sampler_config(ctx, sampler)
        job = SamplingJob(
            f"decomposition_{kind}",
            ctx,
            config,
            ("midpoint",),
            tags=(("sampler", kind),),
            theta=analysis["theta"],
            tau3_time=tau3_time,
        )
        samples = run_job(engine, job, n)["samples"]
        counts = MidpointCounts()
        if not samples.empty:
            h = samples["label"].to_numpy() == 1
            m = samples["entered_m"].to_numpy() == 1
            counts = MidpointCounts(int(h.size), int(h.sum()), int(m.sum()), int((h & m).sum()))
        rows.append(dict(sampler=kind, tau3=analysis["tau3"], tau3_time=tau3_time, theta=analysis["theta"], **counts.table()))
    table = pd.DataFrame(rows)
    ratios = {}
    for column in ("p_h", "p_h_given_m"):
        values = dict(zip(table["sampler"], table[column]))
        ratio = None
        if values.get("ddpm"):
            ratio = values["ddim"] / values["ddpm"]
        ratios[f"{column}_ratio"] = ratio
    log.info(f"DDIM/DDPM ratios: {ratios}")
    return {"decomposition": table, "ratios": pd.DataFrame([ratios])}


def run_diagonal(ctx: LabContext, engine: BlockEngine, n: int) -> Dict[str, pd.DataFrame]:
    """Largest diagonal-pair min-responsibility over dominant states, per sampler."""
    analysis = ctx.params["analysis"]
    rows = []
    for kind in ("ddpm", "ddim"):
        sampler = {"kind": "ddpm"} if kind == "ddpm" else ddim_sampler(ctx.params)
        config = make_sampler_config(ctx, sampler)
        job = SamplingJob(f"diagonal_{kind}", ctx, config, ("diagonal",), tags=(("sampler", kind),), kappa=analysis["kappa"])
        blocks = run_job(engine, job, n)["diagonal"]
        report = DiagonalReport(kappa=analysis["kappa"], threshold=math.exp(-analysis["kappa"]))
        for _, row in blocks.iterrows():
            value = row["max_min_responsibility"]
            part = DiagonalReport(
                kappa=report.kappa,
                threshold=report.threshold,
                n_states=int(row["n_states"]),
                max_min_responsibility=None if pd.isna(value) else float(value),
                violations=int(row["violations"]),
                n_interpolations=int(row["n_interpolations"]),
                n_diagonal_interpolations=int(row["n_diagonal_interpolations"]),
            )
            report = report.merge(part)
        rows.append(dict(sampler=kind, **asdict(report)))
    return {"diagonal": pd.DataFrame(rows)}


def run_hyper_ablation(ctx: LabContext, engine: BlockEngine, n: int) -> Dict[str, pd.DataFrame]:
    """Hallucination rates and τ₂ when T, σ or the lattice separation is varied one at a time."""
    params = ctx.params
    analysis, mixture, schedule = params["analysis"], params["mixture"], params["schedule"]
    variants = [("baseline", None)]
    for name, values in analysis["ablation"].items():
        variants.extend((name, value) for value in values)
    rows = []
    for name, value in variants:
        mix_args = {k: v for k, v in mixture.items() if k != "_target_"}
        sched_args = {"T": schedule["T"], "beta_min": schedule["beta_min"], "beta_max": schedule["beta_max"]}
        if name == "T":
            sched_args["T"] = int(value)
        elif name == "sigma":
            mix_args["sigma"] = float(value)
        elif name == "separation":
            mix_args["separation"] = float(value)
        gmm = build_grid_mixture(**mix_args)
        sched = build_linear_schedule(sigma_data=gmm.sigma, **sched_args)
        variant_ctx = replace(ctx, gmm=gmm, schedule=sched, score=ExactScore(gmm, sched))
        ell = segment_frame(gmm, *adjacent_pairs(gmm)[0]).ell
        tau2 = detect_tau2(ell, sched, analysis["kappa"], gmm.dim)
        tag = f"{name}_{value:g}" if value is not None else name
        for kind in ("ddpm", "ddim"):
            sampler = {"kind": "ddpm"} if kind == "ddpm" else {"kind": "ddim", "grid": "ddim_quadratic", "n_steps": analysis["ddim_steps"]}
            config = make_sampler_config(variant_ctx, sampler)
            job = SamplingJob(f"ablation_{tag}_{kind}", variant_ctx, config, tags=(("sampler", kind),))
            samples = run_job(engine, job, n)["samples"]
            summary = summarize_labels(samples, ["sampler"])
            row = {"parameter": name, "value": value, "tau2": tau2}
            if not summary.empty:
                row.update(summary.iloc[0].to_dict())
            rows.append(row)
    return {"summary": pd.DataFrame(rows)}
