"""The ``train`` experiment: fit the score network, checkpoint it, and measure its error against the exact score."""
import math
from typing import Dict

import numpy as np
import pandas as pd
import torch

from src import utils
from src.diffusion.mixture import sample_mixture
from src.experiments.engine import BlockEngine, LabContext
from src.models.score_error import relative_score_error
from src.training_pipeline import TrainConfig, train_score
from src.utils import seeding

log = utils.get_logger(__name__)

CHECKPOINT_NAME = "score_net"


def error_times(T: int, n_points: int = 8):
    """Geometric spread of time indices over 1..T."""
    return sorted({int(round(v)) for v in np.geomspace(1, T, n_points)})


def run_train(ctx: LabContext, engine: BlockEngine, n: int) -> Dict[str, pd.DataFrame]:
    config = TrainConfig(**ctx.params["train"])
    stem = engine.out_dir / CHECKPOINT_NAME
    trained = train_score(ctx.gmm, ctx.schedule, config, stem=stem)
    losses = pd.DataFrame({"epoch": np.arange(len(trained.losses)), "loss": trained.losses})
    log.info(f"loss {trained.initial_loss:.4g} -> {trained.final_loss:.4g} over {len(trained.losses)} epochs")

    n_points = min(n, ctx.params["analysis"]["n_error_samples"])
    x0 = sample_mixture(ctx.gmm, n_points, seed=ctx.seed, block=1)
    stream = seeding.NoiseStream(ctx.seed, np.arange(n_points), ctx.gmm.dim)
    rows = []
    for t in error_times(ctx.schedule.T):
        noise = stream.normal(t, seeding.PURPOSE_DATA)
        x = math.sqrt(ctx.schedule.alpha_bar(t)) * x0 + math.sqrt(1.0 - ctx.schedule.alpha_bar(t)) * noise
        with torch.no_grad():
            error = relative_score_error(trained.source, ctx.gmm, ctx.schedule, x, t)
        rows.append(dict(t=t, mean=float(error.mean()), median=float(np.median(error)), p90=float(np.quantile(error, 0.9))))
    summary = pd.DataFrame(
        [dict(initial_loss=trained.initial_loss, final_loss=trained.final_loss, epochs=len(trained.losses), checkpoint=f"{stem}.bin")]
    )
    return {"losses": losses, "score_error": pd.DataFrame(rows), "summary": summary}
