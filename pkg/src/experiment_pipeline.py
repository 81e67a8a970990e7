import pathlib
from typing import Any, Callable, Dict, List

import hydra
import pandas as pd
import torch
from omegaconf import DictConfig, OmegaConf

import src
from src import utils
from src.analysis.convergence import DISTANCE_FRAMES
from src.diffusion.geometry import EXTENSION_CONVENTIONS, adjacent_pairs, segment_frame
from src.diffusion.mixture import GaussianMixture
from src.diffusion.samplers import (
    SAMPLER_KINDS,
    SCORE_CONVENTIONS,
    ConstantErrorField,
    ExactScore,
    LinearErrorField,
    PerturbedScore,
    ScoreSource,
)
from src.diffusion.schedule import GRID_KINDS, NoiseSchedule, build_linear_schedule
from src.experiments import midpoint, regime, sampling, training
from src.experiments.engine import BlockEngine, LabContext, ResultBundle
from src.experiments.trajectories import ddim_sampler, make_grid
from src.models.score_module import learned_score_from_checkpoint
from src.training_pipeline import TrainConfig, train_score
from src.utils.data_utils import config_hash, read_json, write_json, write_table
from src.utils.errors import ConfigError
from src.utils.plotting import CurveSpec, emit_plot_data

log = utils.get_logger(__name__)

Runner = Callable[[LabContext, BlockEngine, int], Dict[str, pd.DataFrame]]

RUNNERS: Dict[str, Runner] = {
    "sample": sampling.run_sample,
    "step-sweep": sampling.run_step_sweep,
    "kappa-sweep": regime.run_kappa_sweep,
    "convergence": regime.run_convergence,
    "trap": midpoint.run_trap,
    "eta-sweep": sampling.run_eta_sweep,
    "tau3-ablation": midpoint.run_tau3_ablation,
    "bound-check": midpoint.run_bound_check,
    "decomposition": sampling.run_decomposition,
    "diagonal": sampling.run_diagonal,
    "perturbation": midpoint.run_perturbation,
    "train": training.run_train,
    "dim-sweep": regime.run_dim_sweep,
    "hyper-ablation": sampling.run_hyper_ablation,
    "eigen": midpoint.run_eigen,
}

PLOT_CURVES: Dict[str, List[CurveSpec]] = {
    "convergence": [
        CurveSpec("convergence_mean", "curves", "u", "mean", "sampler", logscale_y=True),
        CurveSpec("convergence_halfwidth", "curves", "u", "halfwidth", "sampler"),
    ],
    "trap": [CurveSpec("trap_offset", "offset_curve", "offset", "stuck_rate", "sampler")],
    "step-sweep": [CurveSpec("step_sweep", "summary", "n_steps", "rate_inclusive", "grid")],
    "kappa-sweep": [
        CurveSpec("tau1", "curves", "kappa", "tau1_mean"),
        CurveSpec("tau2", "curves", "kappa", "tau2"),
    ],
    "eta-sweep": [
        CurveSpec("eta_hallucination", "summary", "eta", "rate_inclusive"),
        CurveSpec("eta_stuck", "summary", "eta", "stuck_rate"),
    ],
    "tau3-ablation": [CurveSpec("tau3_stuck", "summary", "tau3", "stuck_rate", "sampler")],
    "eigen": [CurveSpec("eigen_max", "spectra", "t", "eig_max", "pair")],
    "perturbation": [CurveSpec("saddle_shift", "results", "t", "shift", "kind")],
    "train": [
        CurveSpec("train_loss", "losses", "epoch", "loss", logscale_y=True),
        CurveSpec("score_error", "score_error", "t", "mean", logscale_y=True),
    ],
    "dim-sweep": [
        CurveSpec("dim_tau1", "curves", "kappa", "tau1_mean", "dim"),
        CurveSpec("dim_convergence", "convergence", "u", "mean", "dim", logscale_y=True),
    ],
}

SCORE_KINDS = ("exact", "learned", "perturbed")
ERROR_FIELDS = ("constant", "linear")

# keys that change where or how fast a run goes, never what it computes
RUNTIME_KEYS = ("out_dir", "output_root", "workers", "resume", "print_config", "ignore_warnings", "config_file", "original_work_dir")


def merge_config_file(config: DictConfig) -> DictConfig:
    """Merges ``config_file`` (JSON or YAML; a previous manifest is accepted) over the composed config."""
    path = config.get("config_file")
    if not path:
        return config
    path = pathlib.Path(path)
    if not path.is_absolute() and config.get("original_work_dir"):
        path = pathlib.Path(config.original_work_dir, path)
    if not path.exists():
        raise ConfigError(f"config_file: {path} does not exist")
    record = read_json(path) if path.suffix == ".json" else OmegaConf.to_container(OmegaConf.load(path))
    record = record.get("config", record)
    record = {k: v for k, v in record.items() if k not in RUNTIME_KEYS}
    log.info(f"Merging config file <{path}>")
    return OmegaConf.merge(config, record)


def _check(problems: List[str], ok: bool, message: str) -> None:
    if not ok:
        problems.append(message)


def validate_config(config: DictConfig) -> None:
    """Raises one ConfigError naming every invalid field."""
    problems: List[str] = []
    _check(problems, config.get("task") in RUNNERS, f"task must be one of {sorted(RUNNERS)}, got {config.get('task')}")
    _check(problems, isinstance(config.get("seed"), int) and config.seed >= 0, f"seed must be a nonnegative integer, got {config.get('seed')}")
    for key in ("workers", "block_size", "n_trajectories", "n_trajectories_full"):
        value = config.get(key)
        _check(problems, isinstance(value, int) and value >= 1, f"{key} must be a positive integer, got {value}")
    _check(problems, bool(config.get("out_dir")), "out_dir must be set")

    T = config.schedule.get("T", 0)
    sampler = config.sampler
    _check(problems, sampler.kind in SAMPLER_KINDS, f"sampler.kind must be one of {SAMPLER_KINDS}, got {sampler.kind}")
    _check(problems, sampler.get("grid") in GRID_KINDS, f"sampler.grid must be one of {GRID_KINDS}, got {sampler.get('grid')}")
    _check(problems, 0.0 <= (sampler.get("eta") or 0.0) <= 1.0, f"sampler.eta must lie in [0, 1], got {sampler.get('eta')}")
    if sampler.get("grid") != "ddpm_full":
        n_steps = sampler.get("n_steps")
        _check(problems, isinstance(n_steps, int) and 2 <= n_steps <= T, f"sampler.n_steps must lie in [2, {T}], got {n_steps}")
    if sampler.kind == "hybrid":
        _check(problems, (sampler.get("z_extra") or 0) >= 1, f"sampler.z_extra must be >= 1, got {sampler.get('z_extra')}")
        tau3 = sampler.get("tau3_index")
        _check(problems, isinstance(tau3, int) and 1 <= tau3 <= (sampler.get("n_steps") or 0), f"sampler.tau3_index must lie in [1, sampler.n_steps], got {tau3}")

    score = config.score
    _check(problems, score.kind in SCORE_KINDS, f"score.kind must be one of {SCORE_KINDS}, got {score.kind}")
    _check(problems, score.get("convention", "alpha") in SCORE_CONVENTIONS, f"score.convention must be one of {SCORE_CONVENTIONS}, got {score.get('convention')}")
    if score.kind == "learned" and not score.get("checkpoint") and not score.get("train_if_missing"):
        problems.append("score.checkpoint must be set for a learned score unless score.train_if_missing is true")
    if score.kind == "perturbed":
        _check(problems, score.get("error") in ERROR_FIELDS, f"score.error must be one of {ERROR_FIELDS}, got {score.get('error')}")

    analysis = config.analysis
    ddim_steps = analysis.get("ddim_steps") or 0
    _check(problems, analysis.kappa > 0, f"analysis.kappa must be positive, got {analysis.kappa}")
    for key in ("theta", "trap_theta", "theta_bound", "phi", "window_scale"):
        _check(problems, (analysis.get(key) or 0) > 0, f"analysis.{key} must be positive, got {analysis.get(key)}")
    _check(problems, analysis.theta_bound < analysis.a_star, f"analysis.theta_bound must be below analysis.a_star={analysis.a_star}")
    _check(problems, 2 <= ddim_steps <= T, f"analysis.ddim_steps must lie in [2, {T}], got {ddim_steps}")
    for key in ("tau3", "bound_tau3"):
        _check(problems, 1 <= (analysis.get(key) or 0) <= ddim_steps, f"analysis.{key} must lie in [1, analysis.ddim_steps], got {analysis.get(key)}")
    _check(problems, all(1 <= v <= ddim_steps for v in analysis.tau3_values), f"analysis.tau3_values must lie in [1, {ddim_steps}], got {list(analysis.tau3_values)}")
    _check(problems, all(0.0 <= v <= 1.0 for v in analysis.eta_values), f"analysis.eta_values must lie in [0, 1], got {list(analysis.eta_values)}")
    _check(problems, all(v >= 1 for v in analysis.z_values), f"analysis.z_values must be >= 1, got {list(analysis.z_values)}")
    _check(problems, all(v > 0 for v in analysis.thetas), f"analysis.thetas must be positive, got {list(analysis.thetas)}")
    _check(problems, all(2 <= v <= T for v in analysis.step_grid_sizes), f"analysis.step_grid_sizes must lie in [2, {T}], got {list(analysis.step_grid_sizes)}")
    _check(problems, all(k in GRID_KINDS[1:] for k in analysis.grid_kinds), f"analysis.grid_kinds must be DDIM grids {GRID_KINDS[1:]}, got {list(analysis.grid_kinds)}")
    _check(problems, all(d >= 1 for d in analysis.dims), f"analysis.dims must be >= 1, got {list(analysis.dims)}")
    _check(problems, analysis.eps_convention in EXTENSION_CONVENTIONS, f"analysis.eps_convention must be one of {EXTENSION_CONVENTIONS}, got {analysis.eps_convention}")
    _check(problems, analysis.distance_frame in DISTANCE_FRAMES, f"analysis.distance_frame must be one of {DISTANCE_FRAMES}, got {analysis.distance_frame}")
    grid = analysis.kappa_grid
    _check(problems, 0 < grid.start <= grid.stop and grid.num >= 1, f"analysis.kappa_grid needs 0 < start <= stop and num >= 1, got {dict(grid)}")
    for key in ("n_restarts", "n_paths", "n_bound_samples", "pair_block_size", "eigen_stride", "n_error_samples"):
        _check(problems, (analysis.get(key) or 0) >= 1, f"analysis.{key} must be a positive integer, got {analysis.get(key)}")
    confinement = analysis.confinement
    _check(problems, confinement.variance > 0 and confinement.half_width > 0, "analysis.confinement.variance and half_width must be positive")
    settings = analysis.perturbation
    _check(problems, all(k in ERROR_FIELDS + ("residual",) for k in settings.kinds), f"analysis.perturbation.kinds must be among {ERROR_FIELDS + ('residual',)}, got {list(settings.kinds)}")
    _check(problems, settings.n_samples >= 2, f"analysis.perturbation.n_samples must be >= 2, got {settings.n_samples}")
    if problems:
        raise ConfigError(problems)


def build_error_field(config: DictConfig, gmm: GaussianMixture, schedule: NoiseSchedule):
    """Analytic ψ aligned with the first adjacent pair."""
    segment = segment_frame(gmm, *adjacent_pairs(gmm)[0])
    magnitude = float(config.score.magnitude)
    if config.score.error == "constant":
        return ConstantErrorField(magnitude * segment.u)
    return LinearErrorField(magnitude * torch.outer(segment.u, segment.u), segment.midpoint, schedule)


def build_score(config: DictConfig, gmm: GaussianMixture, schedule: NoiseSchedule, out_dir: pathlib.Path) -> ScoreSource:
    kind = config.score.kind
    log.info(f"Building <{kind}> score source")
    if kind == "exact":
        return ExactScore(gmm, schedule)
    if kind == "perturbed":
        return PerturbedScore(ExactScore(gmm, schedule), build_error_field(config, gmm, schedule))
    checkpoint = config.score.get("checkpoint")
    if checkpoint and pathlib.Path(f"{checkpoint}.bin").exists():
        log.info(f"Loading score network from <{checkpoint}>")
        return learned_score_from_checkpoint(checkpoint, schedule)
    if checkpoint and not config.score.get("train_if_missing"):
        raise ConfigError(f"score.checkpoint: {checkpoint}.bin does not exist")
    stem = pathlib.Path(checkpoint) if checkpoint else out_dir / training.CHECKPOINT_NAME
    log.info(f"No checkpoint found, training a score network into <{stem}>")
    return train_score(gmm, schedule, TrainConfig(**OmegaConf.to_container(config.train, resolve=True)), stem=stem).source


def build_manifest(config: DictConfig, params: Dict[str, Any], gmm: GaussianMixture, schedule: NoiseSchedule, digest: str) -> Dict[str, Any]:
    """Everything needed to reproduce the run, written before any result."""
    analysis = params["analysis"]
    sampler_grid = make_grid(schedule, params["sampler"])
    analysis_grid = make_grid(schedule, ddim_sampler(params))
    return {
        "config_hash": digest,
        "version": src.__version__,
        "task": config.task,
        "seed": config.seed,
        "block_size": config.block_size,
        "n_trajectories": config.n_trajectories_full if config.full_scale else config.n_trajectories,
        "mixture": gmm.to_dict(),
        "schedule": schedule.to_dict(),
        "grids": {"sampler": list(sampler_grid.indices), "analysis": list(analysis_grid.indices)},
        "tau3_table": {str(k): analysis_grid.time_at_remaining(k) for k in range(analysis_grid.n_steps + 1)},
        "conventions": {
            "eps_extension": analysis["eps_convention"],
            "theta_units": "fraction of the pair length ell_t",
            "distance_frame": analysis["distance_frame"],
            "distance_scaling": "divided by sqrt(dim)",
            "score_convention": config.score.get("convention", "alpha"),
            "hybrid_regrid": "DDIM on its grid down to t(tau3), then z ancestral steps spread uniformly over t(tau3)..0",
            "quadratic_skip": "t_k = floor(T (k/n)^2 + 1/2), deduplicated, endpoints forced",
            "tau3_to_time": "grid[len(grid) - 1 - tau3]",
            "bisector_origin": "sqrt(alpha_bar_t) * midpoint",
        },
        "config": params,
    }


def run(config: DictConfig) -> ResultBundle:
    """Contains the experiment pipeline.

    Args:
        config (DictConfig): Configuration composed by Hydra.

    Returns:
        ResultBundle: Manifest, result tables and plot data of the run.
    """

    config = merge_config_file(config)
    validate_config(config)
    out_dir = pathlib.Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    log.info(f"Instantiating mixture <{config.mixture._target_}>")
    gmm: GaussianMixture = hydra.utils.instantiate(config.mixture)
    schedule = build_linear_schedule(sigma_data=gmm.sigma, **OmegaConf.to_container(config.schedule, resolve=True))
    log.info(f"{gmm.n_modes} modes in {gmm.dim} dimensions, sigma={gmm.sigma:.4g}, T={schedule.T}")

    params = OmegaConf.to_container(config, resolve=True)
    params = {k: v for k, v in params.items() if k not in RUNTIME_KEYS and k != "hydra"}
    digest = config_hash(params)
    manifest = write_json(out_dir / "manifest.json", build_manifest(config, params, gmm, schedule, digest))
    log.info(f"Manifest written to <{manifest}> (config hash {digest[:12]})")

    score = build_score(config, gmm, schedule, out_dir)
    ctx = LabContext(gmm, schedule, score, params, int(config.seed), int(config.block_size), digest)
    engine = BlockEngine(out_dir, workers=config.workers, resume=config.resume)
    n = int(config.n_trajectories_full if config.full_scale else config.n_trajectories)

    log.info(f"Running <{config.task}> with {n} trajectories per condition on {engine.workers} worker(s)")
    frames = RUNNERS[config.task](ctx, engine, n)

    bundle = ResultBundle(out_dir=out_dir, manifest=manifest)
    for name, frame in frames.items():
        if frame is None or frame.empty:
            log.warning(f"Table <{name}> is empty, not written")
            continue
        bundle.tables[name] = write_table(out_dir / f"{name}.csv", frame)
    bundle.plot_files = emit_plot_data(bundle, PLOT_CURVES.get(config.task, []))
    log.info(f"Results written to <{out_dir}>: {sorted(bundle.tables)}")
    return bundle
