import logging
import warnings
from pathlib import Path
from typing import Sequence

import pytorch_lightning as pl
import rich.syntax
import rich.tree
from omegaconf import DictConfig, OmegaConf
from pytorch_lightning.utilities import rank_zero_only

LAB_GROUPS = ("experiment", "mixture", "schedule", "sampler", "score", "analysis")
TRAIN_GROUPS = ("mixture", "schedule", "datamodule", "model", "trainer")


def get_logger(name=__name__) -> logging.Logger:
    """Command line logger; the Lightning trainer runs it under rank zero only."""

    logger = logging.getLogger(name)
    for level in ("debug", "info", "warning", "error"):
        setattr(logger, level, rank_zero_only(getattr(logger, level)))
    return logger


log = get_logger(__name__)


def extras(config: DictConfig) -> None:
    """Silences python warnings and prints the composed config, as the flags say."""

    if config.get("ignore_warnings"):
        log.info("Disabling python warnings! <config.ignore_warnings=True>")
        warnings.filterwarnings("ignore")

    if config.get("print_config"):
        order = TRAIN_GROUPS if "trainer" in config else LAB_GROUPS
        print_config(config, print_order=order, resolve=True)


@rank_zero_only
def print_config(
    config: DictConfig,
    print_order: Sequence[str] = LAB_GROUPS,
    resolve: bool = True,
    filename: str = "config_tree.log",
) -> None:
    """Prints the config as a Rich tree, ``print_order`` groups first, and saves it to ``filename``."""

    style = "dim"
    tree = rich.tree.Tree("CONFIG", style=style, guide_style=style)

    queue = [field for field in print_order if field in config]
    queue += [field for field in config if field not in queue]

    for field in queue:
        branch = tree.add(field, style=style, guide_style=style)
        group = config[field]
        content = OmegaConf.to_yaml(group, resolve=resolve) if isinstance(group, DictConfig) else str(group)
        branch.add(rich.syntax.Syntax(content, "yaml"))

    rich.print(tree)

    Path(filename).parent.mkdir(parents=True, exist_ok=True)
    with open(filename, "w") as file:
        rich.print(tree, file=file)


@rank_zero_only
def log_hyperparameters(config: DictConfig, model: pl.LightningModule, trainer: pl.Trainer) -> None:
    """Sends the target mixture, schedule and score network settings to the trainer's loggers."""

    if not trainer.logger:
        return

    hparams = {group: config.get(group) for group in TRAIN_GROUPS}
    hparams["model/params/total"] = sum(p.numel() for p in model.parameters())
    hparams["seed"] = config.get("seed")
    hparams["checkpoint"] = str(Path(config.checkpoint_dir, config.checkpoint_name))

    trainer.logger.log_hyperparams(hparams)


def finish(trainer: pl.Trainer) -> None:
    for logger in trainer.loggers:
        logger.finalize("success")
