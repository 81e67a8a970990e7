import json

import pandas as pd
import pytest

from src.diffusion.samplers import ExactScore, PerturbedScore
from src.experiment_pipeline import RUNNERS, build_score, merge_config_file, run, validate_config
from src.utils.data_utils import read_json
from src.utils.errors import ConfigError

EXPERIMENTS = [
    "bound_check",
    "convergence",
    "decomposition",
    "diagonal",
    "dim_sweep",
    "eigen",
    "eta_sweep",
    "hyper_ablation",
    "kappa_sweep",
    "perturbation",
    "sample",
    "step_sweep",
    "tau3_ablation",
    "train",
    "trap",
]


def test_default_config_is_valid(compose_run):
    config = compose_run()
    validate_config(config)
    assert config.task == "sample"


@pytest.mark.parametrize("name", EXPERIMENTS)
def test_experiment_configs_are_valid(compose_run, name):
    config = compose_run(f"experiment={name}")
    validate_config(config)
    assert config.task in RUNNERS
    assert config.task == name.replace("_", "-")


def test_every_invalid_field_is_named(compose_run):
    config = compose_run("seed=-1", "block_size=0", "sampler.eta=2.0", "analysis.kappa=-1", "task=nope")
    with pytest.raises(ConfigError) as info:
        validate_config(config)
    message = str(info.value)
    for field in ("task", "seed", "block_size", "sampler.eta", "analysis.kappa"):
        assert field in message
    assert len(info.value.problems) == 5


def test_hybrid_needs_extra_steps(compose_run):
    with pytest.raises(ConfigError, match="z_extra"):
        validate_config(compose_run("sampler=hybrid", "sampler.z_extra=0"))
    with pytest.raises(ConfigError, match="tau3_index"):
        validate_config(compose_run("sampler=hybrid", "sampler.tau3_index=51"))


def test_learned_score_without_checkpoint(compose_run, grid25, schedule, tmp_path):
    config = compose_run("score=learned", "score.checkpoint=null", "score.train_if_missing=false")
    with pytest.raises(ConfigError, match="score.checkpoint"):
        validate_config(config)

    config = compose_run("score=learned", f"score.checkpoint={tmp_path / 'missing'}", "score.train_if_missing=false")
    validate_config(config)
    with pytest.raises(ConfigError, match="does not exist"):
        build_score(config, grid25, schedule, tmp_path)


def test_build_score_kinds(compose_run, grid25, schedule, tmp_path):
    assert isinstance(build_score(compose_run(), grid25, schedule, tmp_path), ExactScore)
    perturbed = build_score(compose_run("score=perturbed", "score.error=linear"), grid25, schedule, tmp_path)
    assert isinstance(perturbed, PerturbedScore)
    assert perturbed.psi.kind == "linear"


def test_merge_config_file(compose_run, tmp_path):
    path = tmp_path / "previous_manifest.json"
    path.write_text(json.dumps({"config_hash": "x", "config": {"seed": 5, "out_dir": "/elsewhere", "n_trajectories": 7}}))
    config = merge_config_file(compose_run(f"config_file={path}"))
    assert config.seed == 5
    assert config.n_trajectories == 7
    assert config.out_dir == str(tmp_path / "out")

    with pytest.raises(ConfigError, match="does not exist"):
        merge_config_file(compose_run(f"config_file={tmp_path / 'nope.yaml'}"))


def test_small_sample_run(compose_run):
    config = compose_run("sampler.n_steps=10", "n_trajectories=40", "block_size=16")
    bundle = run(config)

    manifest = read_json(bundle.manifest)
    assert len(manifest["config_hash"]) == 64
    assert manifest["task"] == "sample"
    assert manifest["n_trajectories"] == 40
    assert manifest["grids"]["sampler"][0] == 1000 and manifest["grids"]["sampler"][-1] == 0
    assert "out_dir" not in manifest["config"]

    assert set(bundle.tables) == {"samples", "summary"}
    samples = pd.read_csv(bundle.tables["samples"])
    assert samples["traj_id"].tolist() == list(range(40))
    summary = pd.read_csv(bundle.tables["summary"])
    assert summary["n"].tolist() == [40]
    assert bundle.plot_files == []

    rerun = run(compose_run("sampler.n_steps=10", "n_trajectories=40", "block_size=16", "resume=true"))
    assert read_json(rerun.manifest)["config_hash"] == manifest["config_hash"]
    assert rerun.tables["samples"].read_bytes() == bundle.tables["samples"].read_bytes()
