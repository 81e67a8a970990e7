import numpy as np
import pandas as pd
import pytest

from src.analysis.hallucination import INTERPOLATION, INVALID, TRUE_MODE
from src.diffusion.samplers import ExactScore, SamplerConfig
from src.diffusion.schedule import build_grid
from src.experiments.engine import LabContext
from src.experiments.midpoint import TrapJob, default_trap_specs, job_stage, offset_curve, summarize_trials, trap_block
from src.experiments.regime import kappa_grid, nonincreasing
from src.experiments.trajectories import ddim_sampler, summarize_labels, tau3_to_time


def test_kappa_grid():
    grid = kappa_grid({"kappa_grid": {"start": 1.0, "stop": 3.0, "num": 5}})
    np.testing.assert_allclose(grid, [1.0, 1.5, 2.0, 2.5, 3.0])


def test_nonincreasing_skips_missing():
    assert nonincreasing([5, 5, 3, np.nan, 1])
    assert not nonincreasing([5, 6])
    assert nonincreasing([])


def test_tau3_to_time(schedule):
    assert tau3_to_time(schedule, 1) == 2
    assert tau3_to_time(schedule, 3) == 6
    assert tau3_to_time(schedule, 2, n_steps=4, kind="ddim_uniform") == 500


def test_ddim_sampler_fallbacks():
    params = {"sampler": {"kind": "ddpm", "grid": "ddpm_full"}, "analysis": {"ddim_steps": 50}}
    sampler = ddim_sampler(params, eta=0.5)
    assert sampler == {"kind": "ddim", "grid": "ddim_quadratic", "n_steps": 50, "eta": 0.5}


def test_default_trap_specs():
    specs = default_trap_specs({"z_values": [1, 5]})
    assert list(specs) == ["ddim", "ddpm", "hybrid_z1", "hybrid_z5"]
    assert specs["hybrid_z5"] == {"kind": "hybrid", "z_extra": 5}


def test_summarize_labels():
    samples = pd.DataFrame(
        {
            "sampler": ["ddim"] * 4 + ["ddpm"] * 2,
            "label": [TRUE_MODE, INTERPOLATION, INVALID, TRUE_MODE, INTERPOLATION, TRUE_MODE],
            "failed_at": [-1, -1, 7, -1, -1, -1],
        }
    )
    summary = summarize_labels(samples, ["sampler"]).set_index("sampler")
    assert summary.loc["ddim", "rate_inclusive"] == pytest.approx(0.25)
    assert summary.loc["ddim", "rate_exclusive"] == pytest.approx(1 / 3)
    assert summary.loc["ddim", "n_failed"] == 1
    assert summary.loc["ddpm", "rate_inclusive"] == pytest.approx(0.5)
    assert summarize_labels(pd.DataFrame(), ["sampler"]).empty


def test_summarize_trials_averages_over_pairs():
    trials = pd.DataFrame(
        {
            "sampler": ["ddim"] * 4,
            "pair": [0, 0, 1, 1],
            "stuck": [True, True, True, False],
            "offset": [0.0, 0.1, 0.0, -0.1],
        }
    )
    summary = summarize_trials(trials)
    row = summary.iloc[0]
    assert row["n_pairs"] == 2
    assert row["stuck_rate"] == pytest.approx(0.75)
    assert row["escape_rate"] == pytest.approx(0.25)
    assert row["stuck_se"] == pytest.approx(0.25)

    curve = offset_curve(trials, n_bins=2)
    assert curve["stuck_rate"].tolist() == [1.0, 0.5]
    np.testing.assert_allclose(curve["offset"], [0.025, 0.075])


def test_trap_block_spreads_restarts_over_the_trapped_window(grid25, schedule, corner_pair):
    grid = build_grid(schedule, "ddim_quadratic", 50)
    ctx = LabContext(grid25, schedule, ExactScore(grid25, schedule), params={}, seed=0, block_size=1024)
    job = TrapJob(
        ctx=ctx,
        pairs=((corner_pair.i, corner_pair.j),),
        samplers=(("ddim", SamplerConfig("ddim", grid)),),
        tau3=3,
        tau3_time=grid.time_at_remaining(3),
        theta=0.15,
        window_scale=1.0,
        n_per_pair=5,
    )
    rows = trap_block(job, 0, np.array([0]))
    trials = pd.DataFrame(rows[f"{job_stage(job)}__trials"])
    (window,) = rows[f"{job_stage(job)}__windows"]

    offsets = trials["offset"].to_numpy()
    assert offsets.max() > 0 and offsets.min() < 0
    assert np.abs(offsets).max() == pytest.approx(0.15)
    np.testing.assert_allclose(offsets, [0.0, -0.0375, 0.075, -0.1125, 0.15])
    # the proof window underflows at this separation, the restart window does not
    assert window["entry_window"] == 0.0 and window["entry_violations"] is None
    assert window["restart_window"] == pytest.approx(0.15)
    assert window["window_violations"] > 0
    assert trials.loc[trials["offset"] == 0.0, "stuck"].item() == 1
