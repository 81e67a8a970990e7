import copy
import pathlib
from dataclasses import asdict, dataclass
from typing import List, Optional

import hydra
import torch
from omegaconf import DictConfig
from pytorch_lightning import Callback, LightningDataModule, Trainer, seed_everything
from pytorch_lightning.loggers import Logger

from src import utils
from src.datamodules.mixture_datamodule import MixtureDataModule
from src.diffusion.mixture import GaussianMixture
from src.diffusion.samplers import LearnedScore
from src.diffusion.schedule import NoiseSchedule
from src.models.score_module import ScoreModule
from src.utils.data_utils import save_flat_checkpoint
from src.utils.errors import ConfigError, NumericFailure

log = utils.get_logger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Denoising score matching run; defaults are the desk-scale protocol."""

    n_data: int = 100_000
    batch: int = 10_000
    epochs: int = 2_000
    lr_start: float = 1e-4
    lr_end: float = 1e-5
    seed: int = 0
    hidden: int = 64
    activation: str = "silu"
    n_fourier: Optional[int] = None
    convention: str = "alpha"

    def __post_init__(self):
        problems = []
        if self.n_data < 1:
            problems.append(f"train.n_data must be positive, got {self.n_data}")
        if not 1 <= self.batch <= self.n_data:
            problems.append(f"train.batch must lie in [1, n_data={self.n_data}], got {self.batch}")
        if self.epochs < 1:
            problems.append(f"train.epochs must be positive, got {self.epochs}")
        if not 0.0 < self.lr_end <= self.lr_start:
            problems.append(f"train.lr_end ({self.lr_end}) must lie in (0, lr_start={self.lr_start}]")
        if self.convention not in ("alpha", "sigma"):
            problems.append(f"train.convention must be 'alpha' or 'sigma', got {self.convention}")
        if problems:
            raise ConfigError(problems)


class LossHistory(Callback):
    """Keeps the epoch-mean training loss so short programmatic runs can report their curve."""

    def __init__(self):
        self.losses: List[float] = []

    def on_train_epoch_end(self, trainer, pl_module):
        value = trainer.callback_metrics.get("train/loss")
        if value is not None:
            self.losses.append(float(value))


@dataclass
class TrainedScore:
    source: LearnedScore
    module: ScoreModule
    initial_loss: float
    losses: List[float]

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else self.initial_loss


def write_checkpoint(model: ScoreModule, stem, seed: Optional[int], loss: Optional[float]):
    bin_path, _ = save_flat_checkpoint(model, stem, model.checkpoint_header(seed, loss))
    log.info(f"Flat checkpoint written to {bin_path}")
    return bin_path


def _fit(trainer: Trainer, model: ScoreModule, datamodule: LightningDataModule, stem, seed) -> None:
    """Runs ``trainer.fit``; a divergent loss still leaves the last finite parameters on disk."""
    try:
        trainer.fit(model=model, datamodule=datamodule)
    except NumericFailure:
        if stem is not None:
            log.error("Training diverged, keeping the last finite parameters")
            write_checkpoint(model, stem, seed, None)
        raise


def train_score(
    gmm: GaussianMixture,
    schedule: NoiseSchedule,
    config: TrainConfig,
    stem=None,
    logger: Optional[List[Logger]] = None,
) -> TrainedScore:
    """Trains ε̂ by denoising score matching and returns its float64 ``ScoreSource`` adapter."""
    seed_everything(config.seed, workers=True)
    datamodule = MixtureDataModule(
        mixture=gmm, n_data=config.n_data, val_fraction=0.0, batch_size=config.batch, seed=config.seed
    )
    model = ScoreModule(
        dim=gmm.dim,
        hidden=config.hidden,
        n_fourier=config.n_fourier,
        activation=config.activation,
        T=schedule.T,
        beta_min=schedule.beta_min,
        beta_max=schedule.beta_max,
        sigma_data=gmm.sigma,
        lr_start=config.lr_start,
        lr_end=config.lr_end,
        convention=config.convention,
    )
    datamodule.setup()
    probe = datamodule.data_train.tensors[0][: config.batch]
    initial_loss = model.reference_loss(probe, config.seed)

    history = LossHistory()
    trainer = Trainer(
        max_epochs=config.epochs,
        accelerator="cpu",
        devices=1,
        logger=logger if logger else False,
        callbacks=[history],
        limit_val_batches=0,
        enable_checkpointing=False,
        enable_progress_bar=False,
        enable_model_summary=False,
        deterministic=True,
    )
    log.info(f"Training score network: {asdict(config)}")
    _fit(trainer, model, datamodule, stem, config.seed)
    final = history.losses[-1] if history.losses else None
    if stem is not None:
        write_checkpoint(model, stem, config.seed, final)
    net = copy.deepcopy(model.net).double()
    source = LearnedScore(net, schedule, config.convention)
    return TrainedScore(source=source, module=model, initial_loss=initial_loss, losses=history.losses)


def train(config: DictConfig) -> Optional[float]:
    """Contains the training pipeline.

    Args:
        config (DictConfig): Configuration composed by Hydra.

    Returns:
        Optional[float]: Final epoch-mean training loss.
    """

    # Set seed for random number generators in pytorch, numpy and python.random
    if config.get("seed") is not None:
        seed_everything(config.seed, workers=True)

    log.info(f"Instantiating mixture <{config.mixture._target_}>")
    mixture: GaussianMixture = hydra.utils.instantiate(config.mixture)
    config.model.dim = mixture.dim
    config.model.sigma_data = mixture.sigma

    # Init lightning datamodule
    log.info(f"Instantiating datamodule <{config.datamodule._target_}>")
    datamodule: LightningDataModule = hydra.utils.instantiate(config.datamodule, mixture=mixture)
    datamodule.setup()

    # Init lightning model
    log.info(f"Instantiating model <{config.model._target_}>")
    model: ScoreModule = hydra.utils.instantiate(config.model)

    # Init lightning callbacks
    callbacks: List[Callback] = []
    if "callbacks" in config:
        for _, cb_conf in config.callbacks.items():
            if "_target_" in cb_conf:
                log.info(f"Instantiating callback <{cb_conf._target_}>")
                callbacks.append(hydra.utils.instantiate(cb_conf))

    # Init lightning loggers
    logger: List[Logger] = []
    if "logger" in config:
        for _, lg_conf in config.logger.items():
            if "_target_" in lg_conf:
                log.info(f"Instantiating logger <{lg_conf._target_}>")
                logger.append(hydra.utils.instantiate(lg_conf))

    # Init lightning trainer
    log.info(f"Instantiating trainer <{config.trainer._target_}>")
    trainer: Trainer = hydra.utils.instantiate(config.trainer, callbacks=callbacks, logger=logger, _convert_="partial")

    # Send some parameters from config to all lightning loggers
    log.info("Logging hyperparameters!")
    utils.log_hyperparameters(config=config, model=model, trainer=trainer)

    stem = pathlib.Path(config.checkpoint_dir, config.checkpoint_name)
    log.info("Starting training!")
    _fit(trainer, model, datamodule, stem, config.get("seed"))

    loss = trainer.callback_metrics.get("train/loss")
    loss = float(loss) if isinstance(loss, torch.Tensor) else loss
    write_checkpoint(model, stem, config.get("seed"), loss)

    # Make sure everything closed properly
    log.info("Finalizing!")
    utils.finish(trainer)
    return loss
