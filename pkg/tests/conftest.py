import numpy as np
import pytest
import torch

from fairvae.config import ArchConfig, TrainingConfig
from fairvae.dataset import ImageRecord
from fairvae.vae import LatentGaussian

TINY_ARCH = ArchConfig(input_side=16, latent_side=2, latent_channels=4, base_width=4, max_width=8)


class IdentityStub(torch.nn.Module):
    """Perfect autoencoder: the latent is the image itself, log-variance is a constant."""

    def __init__(self, log_var: float = 0.0):
        super().__init__()
        self.log_var = log_var

    def encode(self, x):
        return LatentGaussian(x, torch.full_like(x, self.log_var))

    def decode(self, z):
        return z


@pytest.fixture
def identity_stub():
    return IdentityStub()


@pytest.fixture
def tiny_arch():
    return TINY_ARCH


def make_record(i, fst, fine="a", mid="m", coarse="c", image=None):
    return ImageRecord(id=f"r{i:05d}", source="", fst=fst, fine_label=fine, mid_label=mid, coarse_label=coarse, image=image)


@pytest.fixture
def balanced_records():
    """600 Light (FST 1/2) and 600 Dark (FST 5/6) records plus 50 ungrouped ones."""
    recs = []
    for i in range(600):
        recs.append(make_record(i, 1 + i % 2))
    for i in range(600, 1200):
        recs.append(make_record(i, 5 + i % 2))
    for i in range(1200, 1250):
        recs.append(make_record(i, [-1, 3, 4][i % 3]))
    return recs


def tiny_images(n, side=16, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 1, size=(n, side, side, 3)).astype(np.float32)


def tiny_config(**kw):
    base = dict(train_size=8, epochs=1, learning_rate=1e-3, batch_size=4, seed=0)
    base.update(kw)
    return TrainingConfig.canonical("B_Mixed", **base)
