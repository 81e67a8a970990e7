from typing import Any, Optional

import torch
from pytorch_lightning import LightningModule
from torchmetrics import MeanMetric, MeanSquaredError

from src.diffusion.samplers import LearnedScore
from src.diffusion.schedule import build_linear_schedule
from src.models.components.mlp_block import ScoreMLP
from src.utils.data_utils import load_flat_checkpoint
from src.utils.errors import ConfigError, NumericFailure


class ScoreModule(LightningModule):
    """Denoising score matching for a mixture target.

    Each batch of clean samples x₀ is noised at a uniform time index t ∈ [1, T],
    x_t = √ᾱ_t x₀ + √(1−ᾱ_t) ε, and the network regresses ε.

    Read the docs:
        https://pytorch-lightning.readthedocs.io/en/latest/common/lightning_module.html
    """

    def __init__(
        self,
        dim: int = 2,
        hidden: int = 64,
        n_fourier: Optional[int] = None,
        activation: str = "silu",
        T: int = 1000,
        beta_min: float = 1e-4,
        beta_max: float = 0.02,
        sigma_data: float = 0.02,
        lr_start: float = 1e-4,
        lr_end: float = 1e-5,
        convention: str = "alpha",
    ):
        super().__init__()

        # this line allows to access init params with 'self.hparams' attribute
        # it also ensures init params will be stored in ckpt
        self.save_hyperparameters(logger=False)

        if lr_end > lr_start:
            raise ConfigError(f"model.lr_end ({lr_end}) must not exceed model.lr_start ({lr_start})")
        self.schedule = build_linear_schedule(T, beta_min, beta_max, sigma_data)
        if n_fourier is None:
            n_fourier = 0 if dim <= 2 else 16
        self.hparams.n_fourier = n_fourier
        self.net = ScoreMLP(dim, self.schedule.alpha_bars, hidden, n_fourier, activation)

        self.train_loss = MeanMetric()
        self.val_loss = MeanMetric()
        self.val_mse = MeanSquaredError()

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        return self.net(x, t)

    def denoising_loss(self, x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor):
        abar = self.net.time.alpha_bars[t].to(x0.dtype).unsqueeze(-1)
        xt = abar.sqrt() * x0 + (1.0 - abar).sqrt() * eps
        pred = self.forward(xt, t)
        return torch.mean((pred - eps) ** 2), pred

    def step(self, batch: Any):
        (x0,) = batch
        t = torch.randint(1, self.schedule.T + 1, (x0.shape[0],), device=x0.device)
        eps = torch.randn_like(x0)
        loss, pred = self.denoising_loss(x0, t, eps)
        return loss, pred, eps

    @torch.no_grad()
    def reference_loss(self, x0: torch.Tensor, seed: int = 0) -> float:
        """Loss on ``x0`` with (t, ε) drawn from a private generator, comparable across training."""
        rng = torch.Generator().manual_seed(int(seed))
        t = torch.randint(1, self.schedule.T + 1, (x0.shape[0],), generator=rng)
        eps = torch.randn(x0.shape, generator=rng, dtype=x0.dtype)
        loss, _ = self.denoising_loss(x0, t, eps)
        return float(loss)

    def training_step(self, batch: Any, batch_idx: int):
        loss, _, _ = self.step(batch)
        if not torch.isfinite(loss):
            raise NumericFailure(f"training loss became non-finite at epoch {self.current_epoch}")
        self.train_loss(loss)
        self.log("train/loss", self.train_loss, on_step=False, on_epoch=True, prog_bar=True)
        return {"loss": loss}

    def validation_step(self, batch: Any, batch_idx: int):
        loss, pred, eps = self.step(batch)
        self.val_loss(loss)
        self.val_mse(pred, eps)
        self.log("val/loss", self.val_loss, on_step=False, on_epoch=True, prog_bar=True)
        self.log("val/eps_mse", self.val_mse, on_step=False, on_epoch=True)
        return {"loss": loss}

    def configure_optimizers(self):
        """Adam with the learning rate decaying linearly from lr_start to lr_end over max_epochs."""
        optimizer = torch.optim.Adam(params=self.parameters(), lr=self.hparams.lr_start)
        total = max(1, int(self.trainer.max_epochs or 1))
        scheduler = torch.optim.lr_scheduler.LinearLR(
            optimizer,
            start_factor=1.0,
            end_factor=self.hparams.lr_end / self.hparams.lr_start,
            total_iters=total,
        )
        return {"optimizer": optimizer, "lr_scheduler": {"scheduler": scheduler, "interval": "epoch"}}

    def checkpoint_header(self, seed: Optional[int], loss: Optional[float]) -> dict:
        return {
            "architecture": {
                "kind": "score_mlp",
                "dim": self.hparams.dim,
                "hidden": self.hparams.hidden,
                "n_fourier": self.hparams.n_fourier,
                "activation": self.hparams.activation,
            },
            "schedule": self.schedule.to_dict(),
            "sigma_data": self.hparams.sigma_data,
            "convention": self.hparams.convention,
            "seed": seed,
            "epoch": int(self.current_epoch),
            "loss": loss,
        }


def score_net_from_checkpoint(stem) -> ScoreMLP:
    """Rebuilds the float64 network stored by ``save_flat_checkpoint``."""
    state, header = load_flat_checkpoint(stem)
    arch = header["architecture"]
    schedule = header["schedule"]
    module = ScoreModule(
        dim=arch["dim"],
        hidden=arch["hidden"],
        n_fourier=arch["n_fourier"],
        activation=arch["activation"],
        T=schedule["T"],
        beta_min=schedule["beta_min"],
        beta_max=schedule["beta_max"],
        sigma_data=header["sigma_data"],
        convention=header.get("convention", "alpha"),
    )
    net = module.net.double()
    net.load_state_dict({name[len("net.") :]: value for name, value in state.items() if name.startswith("net.")})
    return net.eval()


def learned_score_from_checkpoint(stem, schedule) -> LearnedScore:
    _, header = load_flat_checkpoint(stem)
    return LearnedScore(score_net_from_checkpoint(stem), schedule, header.get("convention", "alpha"))
