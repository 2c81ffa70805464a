"""Seeded minibatch Adam training of the VAE."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from fairvae.config import ArchConfig, TrainingConfig
from fairvae.dataset import ImageRecord, load_images
from fairvae.perceptual import FeatureExtractor, total_training_loss
from fairvae.vae import VAE, NumericError, images_to_tensor, save_checkpoint

logger = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, step: int, checkpoint: dict):
        super().__init__(f"non-finite training loss at step {step}")
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class TrainRunLog:
    seed: int
    config_hash: str
    epochs: list[dict] = field(default_factory=list)
    wall_time: float = 0.0
    excluded: int = 0

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "config_hash": self.config_hash,
            "epochs": self.epochs,
            "wall_time": self.wall_time,
            "excluded": self.excluded,
        }


def init_model(arch: ArchConfig, seed: int) -> VAE:
    """Build a VAE with torch's default fan-in scaled init, seeded."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return VAE(arch)


@torch.no_grad()
def recalibrate_batchnorm(model: torch.nn.Module, data: torch.Tensor, batch_size: int) -> None:
    """Replace BN running statistics with exact averages over ``data``.

    Adam moves the weights faster than the default momentum tracks them, so
    eval-mode statistics lag the final weights without this pass.
    """
    bns = [m for m in model.modules() if isinstance(m, torch.nn.modules.batchnorm._BatchNorm)]
    if not bns:
        return
    saved = [m.momentum for m in bns]
    for m in bns:
        m.reset_running_stats()
        m.momentum = None  # cumulative moving average
    model.train()
    for start in range(0, data.shape[0], batch_size):
        x = data[start : start + batch_size]
        model.decode(model.encode(x).mu)
    for m, mom in zip(bns, saved):
        m.momentum = mom
    model.eval()


def train(
    records: Sequence[ImageRecord] | np.ndarray,
    config: TrainingConfig,
    extractor: FeatureExtractor,
    arch: ArchConfig,
    image_root: str | Path | None = None,
    run_dir: str | Path | None = None,
    checkpoint_every_epoch: bool = False,
) -> tuple[VAE, TrainRunLog]:
    """Train a fresh VAE on ``records`` (or an ``N x H x W x 3`` array).

    Parameter init, batch order and reparameterization noise all derive from
    ``config.seed``. The final partial batch of each epoch is kept.
    """
    t0 = time.perf_counter()
    log = TrainRunLog(seed=config.seed, config_hash=config.hash())
    if isinstance(records, np.ndarray):
        images, ids = records, None
    else:
        images, kept, failed = load_images(records, arch.input_side, image_root)
        log.excluded = len(failed)
        ids = [r.id for r in kept]
    if len(images) == 0:
        raise ValueError("no trainable images")
    data = images_to_tensor(images)

    model = init_model(arch, config.seed)
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(json.dumps({"training": config.to_dict(), "arch": arch.to_dict()}, indent=2))
        if ids is not None:
            (run_dir / "train_ids.txt").write_text("\n".join(ids) + "\n")
    if config.epochs == 0:
        model.eval()
        log.wall_time = time.perf_counter() - t0
        return model, log

    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    n = data.shape[0]
    step = 0
    log_fh = open(run_dir / "log.jsonl", "w") if run_dir is not None else None
    try:
        for epoch in range(config.epochs):
            model.train()
            last_good = copy.deepcopy(model.state_dict())
            sums = dict(loss=0.0, recon=0.0, kl=0.0, perceptual=0.0)
            perm = torch.randperm(n, generator=gen)
            n_batches = math.ceil(n / config.batch_size)
            for b in range(n_batches):
                x = data[perm[b * config.batch_size : (b + 1) * config.batch_size]]
                eps = torch.randn((x.shape[0], *arch.latent_shape), generator=gen)
                try:
                    terms = total_training_loss(model, extractor, x, eps, config.perceptual_weight)
                except NumericError:
                    raise DivergenceError(step, last_good) from None
                loss = terms.total.mean()
                if not torch.isfinite(loss):
                    raise DivergenceError(step, last_good)
                opt.zero_grad()
                loss.backward()
                opt.step()
                step += 1
                k = x.shape[0]
                sums["loss"] += loss.item() * k
                sums["recon"] += terms.recon.mean().item() * k
                sums["kl"] += terms.kl.mean().item() * k
                sums["perceptual"] += terms.perceptual.mean().item() * k
            entry = {"epoch": epoch + 1, "n_batches": n_batches, **{key: v / n for key, v in sums.items()}}
            log.epochs.append(entry)
            logger.info("epoch %d/%d loss %.4f", epoch + 1, config.epochs, entry["loss"])
            if log_fh:
                log_fh.write(json.dumps(entry) + "\n")
                if checkpoint_every_epoch:
                    save_checkpoint(model, run_dir / f"model_epoch{epoch + 1:03d}.pt", config.hash())
    finally:
        if log_fh:
            log_fh.close()
    recalibrate_batchnorm(model, data, config.batch_size)
    log.wall_time = time.perf_counter() - t0
    if run_dir is not None:
        save_checkpoint(model, run_dir / "model.pt", config.hash())
    return model, log
