import math

import torch
import torch.nn as nn

ACTIVATIONS = {"silu": nn.SiLU, "gelu": nn.GELU, "softplus": nn.Softplus, "tanh": nn.Tanh}


class TimeFeatures(nn.Module):
    """(t/T, √ᾱ_t, √(1−ᾱ_t)), plus sin/cos features of the log-SNR when ``n_fourier`` > 0."""

    def __init__(self, alpha_bars: torch.Tensor, n_fourier: int = 0):
        super().__init__()
        if n_fourier % 2:
            raise ValueError(f"n_fourier must be even, got {n_fourier}")
        self.register_buffer("alpha_bars", alpha_bars.clone().double())
        self.register_buffer("frequencies", 2.0 ** torch.arange(n_fourier // 2, dtype=torch.float64))
        self.T = alpha_bars.shape[0] - 1
        self.n_fourier = n_fourier

    @property
    def size(self) -> int:
        return 3 + self.n_fourier

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        abar = self.alpha_bars[t.long()]
        feats = [t.double() / self.T, abar.sqrt(), (1.0 - abar).sqrt()]
        feats = torch.stack(feats, dim=-1)
        if self.n_fourier:
            log_snr = torch.log(abar) - torch.log((1.0 - abar).clamp_min(1e-12))
            phase = log_snr.unsqueeze(-1) / 20.0 * self.frequencies * math.pi
            feats = torch.cat([feats, torch.sin(phase), torch.cos(phase)], dim=-1)
        return feats


class ScoreMLP(nn.Module):
    """Noise predictor ε̂(x, t): three affine maps with a smooth activation between them."""

    def __init__(
        self,
        dim: int,
        alpha_bars: torch.Tensor,
        hidden: int = 64,
        n_fourier: int = 0,
        activation: str = "silu",
    ):
        super(ScoreMLP, self).__init__()
        if activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(ACTIVATIONS)}, got {activation}")
        self.dim = dim
        self.time = TimeFeatures(alpha_bars, n_fourier)
        act = ACTIVATIONS[activation]
        self.net = nn.Sequential(
            nn.Linear(dim + self.time.size, hidden),
            act(),
            nn.Linear(hidden, hidden),
            act(),
            nn.Linear(hidden, dim),
        )

    @staticmethod
    def parameter_count(dim: int, hidden: int = 64, n_fourier: int = 0) -> int:
        n_in = dim + 3 + n_fourier
        return (n_in + 1) * hidden + (hidden + 1) * hidden + (hidden + 1) * dim

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        feats = self.time(t).to(x.dtype)
        return self.net(torch.cat([x, feats], dim=-1))
