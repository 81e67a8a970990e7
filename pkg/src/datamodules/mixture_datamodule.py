from typing import Optional

import torch
from pytorch_lightning import LightningDataModule
from torch.utils.data import DataLoader, Dataset, TensorDataset

from src import utils
from src.diffusion.mixture import GaussianMixture, sample_mixture
from src.utils.errors import ConfigError

log = utils.get_logger(__name__)


class MixtureDataModule(LightningDataModule):
    """LightningDataModule for samples drawn from a Gaussian mixture target.

    A DataModule implements 5 key methods:
        - prepare_data (things to do on 1 GPU/TPU, not on every GPU/TPU in distributed mode)
        - setup (things to do on every accelerator in distributed mode)
        - train_dataloader (the training dataloader)
        - val_dataloader (the validation dataloader(s))
        - test_dataloader (the test dataloader(s))

    The samples are regenerated from the counter-based stream of ``seed``, so there is nothing
    to download and two modules with the same arguments hold identical data. The last
    ``val_fraction`` of the draws forms the validation split.

    Read the docs:
        https://pytorch-lightning.readthedocs.io/en/latest/extensions/datamodules.html
    """

    def __init__(
        self,
        mixture: GaussianMixture,
        n_data: int = 100_000,
        val_fraction: float = 0.05,
        batch_size: int = 10_000,
        seed: int = 0,
        num_workers: int = 0,
        pin_memory: bool = False,
    ):
        super().__init__()

        # this line allows to access init params with 'self.hparams' attribute
        self.save_hyperparameters(logger=False, ignore=["mixture"])
        self.mixture = mixture

        problems = []
        if n_data < 2:
            problems.append(f"datamodule.n_data must be >= 2, got {n_data}")
        if not 0.0 <= val_fraction < 1.0:
            problems.append(f"datamodule.val_fraction must lie in [0, 1), got {val_fraction}")
        n_train = n_data - int(round(n_data * val_fraction))
        if not 1 <= batch_size <= max(n_train, 1):
            problems.append(f"datamodule.batch_size must lie in [1, n_data], got {batch_size}")
        if problems:
            raise ConfigError(problems)
        self.n_train = n_train

        self.data_train: Optional[Dataset] = None
        self.data_val: Optional[Dataset] = None

    @property
    def dim(self) -> int:
        return self.mixture.dim

    def setup(self, stage: Optional[str] = None):
        """Draw the samples once; later calls are no-ops."""
        if self.data_train is None:
            data = sample_mixture(self.mixture, self.hparams.n_data, seed=self.hparams.seed).float()
            self.data_train = TensorDataset(data[: self.n_train])
            self.data_val = TensorDataset(data[self.n_train :]) if self.n_train < len(data) else None
            log.info(f"Drew {len(data)} samples from a {self.mixture.n_modes}-mode mixture in dim {self.dim}")

    def train_dataloader(self):
        shuffle = torch.Generator().manual_seed(self.hparams.seed)
        return DataLoader(
            dataset=self.data_train,
            batch_size=self.hparams.batch_size,
            num_workers=self.hparams.num_workers,
            pin_memory=self.hparams.pin_memory,
            shuffle=True,
            generator=shuffle,
        )

    def val_dataloader(self):
        if self.data_val is None:
            return []
        return DataLoader(
            dataset=self.data_val,
            batch_size=self.hparams.batch_size,
            num_workers=self.hparams.num_workers,
            pin_memory=self.hparams.pin_memory,
            shuffle=False,
        )
