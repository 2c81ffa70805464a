"""Feature perceptual loss over the activations of a frozen convolutional network."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import torch
import torch.nn as nn

from fairvae.config import ExtractorConfig
from fairvae.vae import ShapeError, elbo

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class FeatureMap(NamedTuple):
    layer_index: int  # 1-based
    values: torch.Tensor  # N x C x H x W


class FeatureExtractor(nn.Module):
    """Frozen conv stack tapped after each convolution's activation.

    ``layers`` is any ``nn.Sequential``; every ``nn.Conv2d`` followed by an
    activation contributes one tap (the activation output).
    """

    def __init__(self, layers: nn.Sequential, mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0), source_hash: str | None = None):
        super().__init__()
        self.layers = layers
        self.register_buffer("mean", torch.tensor(mean).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, 3, 1, 1))
        self.taps = []
        mods = list(layers)
        for i, m in enumerate(mods):
            if isinstance(m, nn.Conv2d):
                nxt = i + 1 if i + 1 < len(mods) and isinstance(mods[i + 1], (nn.ReLU, nn.ELU)) else i
                self.taps.append(nxt)
        last = self.taps[-1] if self.taps else -1
        # nothing after the last tap matters
        self.layers = nn.Sequential(*mods[: last + 1])
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        self.source_hash = source_hash

    @property
    def n_layers(self) -> int:
        return len(self.taps)

    def train(self, mode: bool = True):
        # frozen: always stays in eval mode
        return super().train(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"extractor expects N x 3 x H x W input, got {tuple(x.shape)}")
        h = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        out = []
        tap_set = set(self.taps)
        for i, m in enumerate(self.layers):
            h = m(h)
            if i in tap_set:
                out.append(h)
        return out

    def weights_hash(self) -> str:
        digest = hashlib.sha256()
        for name, t in sorted(self.state_dict().items()):
            digest.update(name.encode())
            digest.update(t.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()[:16]


def _conv_stack(cfg, in_ch: int = 3) -> nn.Sequential:
    layers: list[nn.Module] = []
    for v in cfg:
        if v == "M":
            layers.append(nn.MaxPool2d(2, 2))
        else:
            layers += [nn.Conv2d(in_ch, int(v), 3, padding=1), nn.ReLU()]
            in_ch = int(v)
    return nn.Sequential(*layers)


def vgg19_extractor(weights_path: str | Path) -> FeatureExtractor:
    """VGG19 convolutional trunk (16 conv layers) loaded from a state-dict file.

    Accepts either a full torchvision ``vgg19`` state dict or one restricted to
    ``features``. Input is normalized with ImageNet statistics.
    """
    from torchvision.models import vgg19

    path = Path(weights_path)
    raw = path.read_bytes()
    state = torch.load(path, map_location="cpu", weights_only=True)
    net = vgg19(weights=None).features
    if any(k.startswith("features.") for k in state):
        state = {k[len("features."):]: v for k, v in state.items() if k.startswith("features.")}
    net.load_state_dict(state)
    # torchvision uses inplace ReLU; taps must not be overwritten
    for m in net:
        if isinstance(m, nn.ReLU):
            m.inplace = False
    return FeatureExtractor(net, IMAGENET_MEAN, IMAGENET_STD, source_hash=hashlib.sha256(raw).hexdigest())


def random_vgg_extractor(layers=(16, 16, "M", 32, 32), seed: int = 0) -> FeatureExtractor:
    """Small VGG-style stack with seeded, frozen He-normal weights."""
    net = _conv_stack(layers)
    gen = torch.Generator().manual_seed(seed)
    for m in net:
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * 9
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                m.bias.zero_()
    return FeatureExtractor(net, IMAGENET_MEAN, IMAGENET_STD)


def stub_extractor() -> FeatureExtractor:
    """Two conv layers (3->4, pool, 4->2) with fixed weights, no input normalization."""
    net = _conv_stack((4, "M", 2))
    gen = torch.Generator().manual_seed(1234)
    with torch.no_grad():
        for m in net:
            if isinstance(m, nn.Conv2d):
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * 0.5)
                m.bias.copy_(torch.randn(m.bias.shape, generator=gen) * 0.1)
    return FeatureExtractor(net)


def build_extractor(cfg: ExtractorConfig) -> FeatureExtractor:
    if cfg.kind == "vgg19":
        if not cfg.weights_path:
            raise ValueError("the vgg19 extractor needs a weights file (ExtractorConfig.weights_path)")
        return vgg19_extractor(cfg.weights_path)
    if cfg.kind == "random_vgg":
        return random_vgg_extractor(cfg.layers, cfg.seed)
    if cfg.kind == "stub":
        return stub_extractor()
    raise ValueError(f"unknown extractor kind {cfg.kind!r}")


def extract_features(extractor: FeatureExtractor, x: torch.Tensor) -> list[FeatureMap]:
    return [FeatureMap(i + 1, v) for i, v in enumerate(extractor(x))]


def perceptual_loss(extractor: FeatureExtractor, x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Per-sample sum over tapped layers of ``||phi_l(x) - phi_l(x_hat)||^2 / (2 C H W)``."""
    if x.shape != x_hat.shape:
        raise ShapeError(f"x {tuple(x.shape)} and x_hat {tuple(x_hat.shape)} differ")
    total = x.new_zeros(x.shape[0])
    for fa, fb in zip(extractor(x), extractor(x_hat)):
        c, h, w = fa.shape[1:]
        total = total + (fa - fb).pow(2).flatten(1).sum(dim=1) / (2.0 * c * h * w)
    return total


@dataclass
class LossTerms:
    """Per-sample loss components (length-N tensors)."""

    total: torch.Tensor
    recon: torch.Tensor
    kl: torch.Tensor
    perceptual: torch.Tensor
    mse: torch.Tensor


def total_training_loss(
    model: nn.Module, extractor: FeatureExtractor, x: torch.Tensor, eps: torch.Tensor, perceptual_weight: float = 1.0
) -> LossTerms:
    """Negative ELBO plus the weighted perceptual term; this is what training minimizes."""
    terms = elbo(model, x, eps)
    perc = perceptual_loss(extractor, x, terms.x_hat)
    return LossTerms(
        total=terms.recon + terms.kl + perceptual_weight * perc,
        recon=terms.recon,
        kl=terms.kl,
        perceptual=perc,
        mse=terms.mse,
    )
