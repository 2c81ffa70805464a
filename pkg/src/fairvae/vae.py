"""Convolutional VAE with a Gaussian encoder and a unit-variance Gaussian decoder."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from fairvae.config import ArchConfig

LOG_VAR_BOUNDS = (-10.0, 10.0)


class ShapeError(ValueError):
    """Input tensor does not match the model's contract."""


class NumericError(ArithmeticError):
    pass


@dataclass
class LatentGaussian:
    """Batch of diagonal Gaussians, ``mu`` and ``log_var`` both ``N x C x H x W``."""

    mu: torch.Tensor
    log_var: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_var.shape:
            raise ShapeError(f"mu {tuple(self.mu.shape)} and log_var {tuple(self.log_var.shape)} differ")

    def std(self) -> torch.Tensor:
        return torch.exp(0.5 * self.log_var)


@dataclass
class ElboTerms:
    """Per-sample terms; every field is a length-N tensor."""

    recon: torch.Tensor
    kl: torch.Tensor
    elbo: torch.Tensor
    mse: torch.Tensor
    x_hat: torch.Tensor


class ResidualBlock(nn.Module):
    """Stride-2 residual block; conv -> batch norm -> ELU on the main path."""

    def __init__(self, cin: int, cout: int, up: bool = False):
        super().__init__()
        if up:
            self.conv1 = nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(cin, cout, 3, 1, 1))
            self.skip = nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(cin, cout, 1))
        else:
            self.conv1 = nn.Conv2d(cin, cout, 3, 2, 1)
            self.skip = nn.Conv2d(cin, cout, 1, 2)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1)
        self.bn2 = nn.BatchNorm2d(cout)

    def forward(self, x):
        h = F.elu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return F.elu(h + self.skip(x))


class VAE(nn.Module):
    def __init__(self, arch: ArchConfig = ArchConfig()):
        super().__init__()
        self.arch = arch
        widths = arch.widths
        self.encoder = nn.Sequential(*[ResidualBlock(a, b) for a, b in zip([3] + widths[:-1], widths)])
        self.latent_head = nn.Conv2d(widths[-1], 2 * arch.latent_channels, 1)
        # log-variance half starts at zero: every posterior starts at unit variance
        with torch.no_grad():
            self.latent_head.weight[arch.latent_channels :].zero_()
            self.latent_head.bias[arch.latent_channels :].zero_()
        self.latent_in = nn.Sequential(nn.Conv2d(arch.latent_channels, widths[-1], 1), nn.ELU())
        rev = widths[::-1]
        self.decoder = nn.Sequential(*[ResidualBlock(a, b, up=True) for a, b in zip(rev, rev[1:] + rev[-1:])])
        self.out = nn.Conv2d(rev[-1], 3, 3, 1, 1)

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return self.arch.latent_shape

    @property
    def input_side(self) -> int:
        return self.arch.input_side

    def _check_images(self, x: torch.Tensor):
        s = self.arch.input_side
        if x.ndim != 4 or tuple(x.shape[1:]) != (3, s, s):
            raise ShapeError(f"expected images of shape N x 3 x {s} x {s}, got {tuple(x.shape)}")

    def _check_latent(self, z: torch.Tensor):
        if z.ndim != 4 or tuple(z.shape[1:]) != self.latent_shape:
            raise ShapeError(f"expected latents of shape N x {self.latent_shape}, got {tuple(z.shape)}")

    def encode(self, x: torch.Tensor) -> LatentGaussian:
        self._check_images(x)
        mu, log_var = self.latent_head(self.encoder(x)).chunk(2, dim=1)
        return LatentGaussian(mu, log_var.clamp(*LOG_VAR_BOUNDS))

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        self._check_latent(z)
        return torch.sigmoid(self.out(self.decoder(self.latent_in(z))))

    def forward(self, x: torch.Tensor, eps: torch.Tensor | None = None):
        g = self.encode(x)
        z = g.mu if eps is None else reparameterize(g, eps)
        return self.decode(z), g


def reparameterize(g: LatentGaussian, eps: torch.Tensor) -> torch.Tensor:
    if eps.shape != g.mu.shape:
        raise ShapeError(f"noise shape {tuple(eps.shape)} does not match latent shape {tuple(g.mu.shape)}")
    return g.mu + eps * g.std()


def kl_to_standard_normal(g: LatentGaussian) -> torch.Tensor:
    """KL(N(mu, diag(sigma^2)) || N(0, I)), summed over every latent dimension per sample."""
    if not (torch.isfinite(g.mu).all() and torch.isfinite(g.log_var).all()):
        raise NumericError("non-finite latent parameters")
    # expm1 keeps exp(v) - 1 - v non-negative for tiny v
    terms = 0.5 * (g.mu.pow(2) + torch.expm1(g.log_var) - g.log_var)
    return terms.flatten(1).sum(dim=1)


def elbo(model: nn.Module, x: torch.Tensor, eps: torch.Tensor) -> ElboTerms:
    """Single-sample ELBO estimate, additive constants dropped.

    ``recon`` is half the summed squared error (unit-variance Gaussian
    likelihood); ``mse`` is the per-element mean used for reporting.
    """
    g = model.encode(x)
    x_hat = model.decode(reparameterize(g, eps))
    sq = (x - x_hat).pow(2).flatten(1)
    recon = 0.5 * sq.sum(dim=1)
    kl = kl_to_standard_normal(g)
    return ElboTerms(recon=recon, kl=kl, elbo=-recon - kl, mse=sq.mean(dim=1), x_hat=x_hat)


def images_to_tensor(images: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """``N x H x W x 3`` (or a single ``H x W x 3``) array to an ``N x 3 x H x W`` tensor."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def tensor_to_images(x: torch.Tensor) -> np.ndarray:
    return x.detach().cpu().numpy().transpose(0, 2, 3, 1)


def save_checkpoint(model: VAE, path: str | Path, config_hash: str | None = None, extra: dict | None = None) -> None:
    torch.save(
        {
            "state_dict": model.state_dict(),
            "arch": model.arch.to_dict(),
            "latent_shape": list(model.latent_shape),
            "input_side": model.input_side,
            "config_hash": config_hash,
            **(extra or {}),
        },
        path,
    )


def load_checkpoint(path: str | Path) -> tuple[VAE, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    model = VAE(ArchConfig(**blob["arch"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob
