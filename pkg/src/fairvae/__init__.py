"""Subgroup fairness audit for perceptual-loss VAEs on skin images."""

from fairvae.config import ArchConfig, PipelineConfig, ProtocolConfig, SynthParams, TrainingConfig
from fairvae.dataset import ImageRecord, SkinToneGroup, assign_group, make_split, parse_metadata, sample_training_set
from fairvae.vae import VAE, LatentGaussian, elbo, kl_to_standard_normal, reparameterize

__version__ = "0.1.0"

__all__ = [
    "ArchConfig",
    "PipelineConfig",
    "ProtocolConfig",
    "SynthParams",
    "TrainingConfig",
    "ImageRecord",
    "SkinToneGroup",
    "assign_group",
    "make_split",
    "parse_metadata",
    "sample_training_set",
    "VAE",
    "LatentGaussian",
    "elbo",
    "kl_to_standard_normal",
    "reparameterize",
]
