"""Configuration dataclasses shared across the pipeline.

Everything here round-trips through plain dicts so a resolved config can be
written next to every run and hashed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

CONFIG_FRACTIONS = {"A_Light": 1.0, "B_Mixed": 0.5, "C_Dark": 0.0}
CONFIG_ALIASES = {"A": "A_Light", "B": "B_Mixed", "C": "C_Dark"}


def canonical_config_name(name: str) -> str:
    name = CONFIG_ALIASES.get(name, name)
    if name not in CONFIG_FRACTIONS:
        raise ValueError(f"unknown training configuration {name!r}; expected one of {sorted(CONFIG_FRACTIONS)}")
    return name


def stable_hash(obj: Any) -> str:
    payload = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class TrainingConfig:
    name: str
    light_fraction: float
    train_size: int = 1668
    epochs: int = 15
    learning_rate: float = 1e-4
    batch_size: int = 64
    seed: int = 0
    perceptual_weight: float = 1.0

    def __post_init__(self):
        if self.train_size <= 0:
            raise ValueError("train_size must be positive")
        if not 0.0 <= self.light_fraction <= 1.0:
            raise ValueError("light_fraction must lie in [0, 1]")
        if self.epochs < 0 or self.batch_size <= 0:
            raise ValueError("epochs must be >= 0 and batch_size > 0")

    @classmethod
    def canonical(cls, name: str, **overrides) -> "TrainingConfig":
        name = canonical_config_name(name)
        return cls(name=name, light_fraction=CONFIG_FRACTIONS[name], **overrides)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return stable_hash(self.to_dict())


@dataclass(frozen=True)
class ArchConfig:
    """Encoder/decoder geometry.

    ``input_side / latent_side`` must be a power of two; that ratio fixes the
    number of stride-2 stages. Stage widths start at ``base_width`` and double
    per stage up to ``max_width``.
    """

    input_side: int = 256
    latent_side: int = 8
    latent_channels: int = 64
    base_width: int = 32
    max_width: int = 256

    @property
    def n_stages(self) -> int:
        ratio = self.input_side // self.latent_side
        if ratio * self.latent_side != self.input_side or ratio < 1 or ratio & (ratio - 1):
            raise ValueError(f"input_side {self.input_side} / latent_side {self.latent_side} is not a power of two")
        return ratio.bit_length() - 1

    @property
    def widths(self) -> list[int]:
        return [min(self.base_width * 2**i, self.max_width) for i in range(self.n_stages)]

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.latent_channels, self.latent_side, self.latent_side)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class ExtractorConfig:
    # "vgg19" needs weights_path; "random_vgg" is a seeded frozen VGG-style stack; "stub" is the 2-layer test net
    kind: str = "vgg19"
    weights_path: str | None = None
    layers: tuple = (16, 16, "M", 32, 32)
    seed: int = 0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["layers"] = list(self.layers)
        return d


@dataclass(frozen=True)
class SynthParams:
    """Two-group toy population: flat skin tone minus an elliptical lesion, plus Gaussian texture."""

    side: int = 32
    light_luminance: float = 0.8
    dark_luminance: float = 0.3
    radius_range: tuple[float, float] = (0.15, 0.35)  # fraction of side
    contrast_range: tuple[float, float] = (0.1, 0.25)
    texture_noise: float = 0.03
    n_per_group: int = 600
    # {"Light": {label: p}, "Dark": {...}}; None gives both groups the same uniform mix
    condition_mix: dict | None = None
    seed: int = 0

    def __post_init__(self):
        for v in (self.light_luminance, self.dark_luminance, *self.contrast_range):
            if not 0.0 <= v <= 1.0:
                raise ValueError("luminances and contrasts must lie in [0, 1]")
        if self.n_per_group < 1:
            raise ValueError("n_per_group must be >= 1")
        if self.radius_range[0] > self.radius_range[1] or self.contrast_range[0] > self.contrast_range[1]:
            raise ValueError("ranges must be (low, high)")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["radius_range"] = list(self.radius_range)
        d["contrast_range"] = list(self.contrast_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthParams":
        d = dict(d)
        for k in ("radius_range", "contrast_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True)
class ProtocolConfig:
    n_reps: int = 10
    configs: tuple[str, ...] = ("A_Light", "B_Mixed", "C_Dark")
    test_size: int = 500
    train_size: int = 1668
    base_seed: int = 0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["configs"] = list(self.configs)
        return d


@dataclass(frozen=True)
class PipelineConfig:
    metadata: str | None = None
    image_root: str | None = None
    schema: dict[str, str] | None = None
    synthetic: SynthParams | None = None
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    epochs: int = 15
    learning_rate: float = 1e-4
    batch_size: int = 64
    perceptual_weight: float = 1.0
    eval_batch_size: int = 100
    out: str = "runs"

    @classmethod
    def desk(cls, **overrides) -> "PipelineConfig":
        """Synthetic CPU-sized preset (side 32, 3 repetitions)."""
        base = dict(
            synthetic=SynthParams(side=32),
            protocol=ProtocolConfig(n_reps=3),
            arch=ArchConfig(input_side=32, latent_side=4, latent_channels=16, base_width=16, max_width=64),
            extractor=ExtractorConfig(kind="random_vgg"),
            epochs=4,
            learning_rate=1e-3,
        )
        base.update(overrides)
        return cls(**base)

    def training_config(self, name: str, seed: int) -> TrainingConfig:
        return TrainingConfig.canonical(
            name,
            train_size=self.protocol.train_size,
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            seed=seed,
            perceptual_weight=self.perceptual_weight,
        )

    def to_dict(self) -> dict:
        return {
            "metadata": self.metadata,
            "image_root": self.image_root,
            "schema": self.schema,
            "synthetic": self.synthetic.to_dict() if self.synthetic else None,
            "protocol": self.protocol.to_dict(),
            "arch": self.arch.to_dict(),
            "extractor": self.extractor.to_dict(),
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "perceptual_weight": self.perceptual_weight,
            "eval_batch_size": self.eval_batch_size,
            "out": self.out,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        if d.get("synthetic") is not None:
            d["synthetic"] = SynthParams.from_dict(d["synthetic"])
        if "protocol" in d:
            p = dict(d["protocol"])
            if "configs" in p:
                p["configs"] = tuple(canonical_config_name(c) for c in p["configs"])
            d["protocol"] = ProtocolConfig(**p)
        if "arch" in d:
            d["arch"] = ArchConfig(**d["arch"])
        if "extractor" in d:
            e = dict(d["extractor"])
            if "layers" in e:
                e["layers"] = tuple(e["layers"])
            d["extractor"] = ExtractorConfig(**e)
        return cls(**d)

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("out")
        return stable_hash(d)


def load_pipeline_config(path: str | Path) -> PipelineConfig:
    text = Path(path).read_text(encoding="utf-8")
    data = yaml.safe_load(text) if Path(path).suffix in (".yml", ".yaml") else json.loads(text)
    return PipelineConfig.from_dict(data or {})
