import pathlib

import numpy as np
import pandas as pd
import pytest

from tests.helpers.run_command import run_command, run_command_exit_code

ROOT = pathlib.Path(__file__).resolve().parents[2]
RUN = str(ROOT / "run.py")


def _common(tmp_path, *overrides):
    return [
        RUN,
        f"out_dir={tmp_path / 'out'}",
        f"hydra.run.dir={tmp_path / 'hydra'}",
        "print_config=false",
        *overrides,
    ]


def test_sample_run(tmp_path):
    """Small DDIM run from the command line."""
    run_command(_common(tmp_path, "sampler.n_steps=10", "n_trajectories=32", "block_size=16"))
    assert (tmp_path / "out" / "manifest.json").exists()
    samples = pd.read_csv(tmp_path / "out" / "samples.csv")
    assert len(samples) == 32


def test_invalid_config_exits_with_2(tmp_path):
    code = run_command_exit_code(_common(tmp_path, "n_trajectories=0", "sampler.eta=3.0"))
    assert code == 2
    assert not (tmp_path / "out" / "manifest.json").exists()


def test_worker_count_does_not_change_tables(tmp_path):
    base = ["sampler.n_steps=10", "n_trajectories=48", "block_size=16"]
    run_command(_common(tmp_path / "one", *base, "workers=1"))
    run_command(_common(tmp_path / "two", *base, "workers=2"))
    one = (tmp_path / "one" / "out" / "samples.csv").read_bytes()
    two = (tmp_path / "two" / "out" / "samples.csv").read_bytes()
    assert one == two


@pytest.mark.slow
@pytest.mark.parametrize(
    "overrides",
    [
        ["experiment=eigen", "analysis.eigen_stride=50", "analysis.n_pairs=2"],
        ["experiment=perturbation", "analysis.perturbation.n_samples=100"],
        ["experiment=kappa_sweep", "analysis.kappa_grid.num=5"],
    ],
)
def test_analysis_experiments(tmp_path, overrides):
    """Reduced analysis runs through the experiment configs."""
    run_command(_common(tmp_path, *overrides, "n_trajectories=64", "block_size=64"))
    assert (tmp_path / "out" / "manifest.json").exists()
    assert list((tmp_path / "out").glob("*.csv"))


@pytest.mark.slow
def test_trap_experiment(tmp_path):
    """Restarts spread over ±trap_theta; DDIM stays trapped more often than DDPM and the hybrids."""
    run_command(_common(tmp_path, "experiment=trap", "analysis.n_restarts=80", "analysis.n_pairs=4"))
    out = tmp_path / "out"
    assert (out / "manifest.json").exists()

    trials = pd.read_csv(out / "trials.csv")
    for _, group in trials.groupby(["sampler", "pair"]):
        offsets = group["offset"].to_numpy()
        assert (offsets != 0.0).sum() == len(offsets) - 1
        assert offsets.max() == pytest.approx(0.15) or offsets.min() == pytest.approx(-0.15)
        assert np.abs(offsets).max() <= 0.15 + 1e-12
        assert offsets.max() > 0 and offsets.min() < 0

    summary = pd.read_csv(out / "summary.csv").set_index("sampler")
    assert summary.loc["ddim", "stuck_rate"] > summary.loc["ddpm", "stuck_rate"]
    n = trials.groupby("sampler").size()

    def spread(name):
        # across-pair error, floored by the binomial error over all restarts
        p = summary.loc[name, "stuck_rate"]
        return max(summary.loc[name, "stuck_se"], np.sqrt(p * (1.0 - p) / n[name]))

    hybrids = ["hybrid_z2", "hybrid_z5", "hybrid_z8"]
    for fewer, more in zip(hybrids, hybrids[1:]):
        tolerance = 2.0 * np.hypot(spread(fewer), spread(more))
        assert summary.loc[more, "stuck_rate"] <= summary.loc[fewer, "stuck_rate"] + tolerance
