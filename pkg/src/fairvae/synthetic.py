"""Seeded two-group toy skin images for desk-scale audits."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from fairvae.config import SynthParams
from fairvae.dataset import FITZPATRICK17K_SCHEMA, ImageRecord, SkinToneGroup, write_metadata

__all__ = ["SynthParams", "CONDITIONS", "SHIFTED_MIX", "generate", "write_dataset"]

# fine label -> (mid label, coarse label, edge softness, inner texture gain)
CONDITIONS: dict[str, tuple[str, str, float, float]] = {
    "nevus": ("benign melanocytic", "benign", 0.05, 1.0),
    "seborrheic keratosis": ("benign epidermal", "benign", 0.10, 1.5),
    "melanoma": ("malignant melanoma", "malignant", 0.08, 1.25),
    "basal cell carcinoma": ("malignant epidermal", "malignant", 0.12, 1.0),
    "psoriasis": ("inflammatory", "non-neoplastic", 0.30, 2.0),
    "eczema": ("inflammatory", "non-neoplastic", 0.40, 1.75),
}

SHIFTED_MIX = {
    "Light": {"nevus": 0.3, "seborrheic keratosis": 0.2, "melanoma": 0.2, "basal cell carcinoma": 0.2, "psoriasis": 0.05, "eczema": 0.05},
    "Dark": {"nevus": 0.05, "seborrheic keratosis": 0.05, "melanoma": 0.1, "basal cell carcinoma": 0.1, "psoriasis": 0.35, "eczema": 0.35},
}

GROUP_FST = {SkinToneGroup.LIGHT: 1, SkinToneGroup.DARK: 6}


def _mix_for(params: SynthParams, group: SkinToneGroup) -> tuple[list[str], np.ndarray]:
    if params.condition_mix is None:
        labels = list(CONDITIONS)
        return labels, np.full(len(labels), 1.0 / len(labels))
    mix = params.condition_mix[group.value]
    labels = list(mix)
    for lab in labels:
        if lab not in CONDITIONS:
            raise ValueError(f"unknown synthetic condition {lab!r}")
    p = np.asarray([mix[lab] for lab in labels], dtype=float)
    return labels, p / p.sum()


def _render(rng: np.random.Generator, params: SynthParams, base: float, condition: str) -> np.ndarray:
    side = params.side
    _, _, softness, texture_gain = CONDITIONS[condition]
    ra, rb = rng.uniform(*params.radius_range, size=2) * side
    theta = rng.uniform(0, np.pi)
    cy, cx = (side - 1) / 2 + rng.uniform(-0.1, 0.1, size=2) * side
    contrast = rng.uniform(*params.contrast_range)

    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = (dx * np.cos(theta) + dy * np.sin(theta)) / max(ra, 1e-6)
    v = (-dx * np.sin(theta) + dy * np.cos(theta)) / max(rb, 1e-6)
    r = np.sqrt(u**2 + v**2)
    mask = 1.0 / (1.0 + np.exp((r - 1.0) / softness))

    img = np.full((side, side, 3), base) - (contrast * mask)[..., None]
    noise = rng.normal(0.0, params.texture_noise, size=(side, side, 3))
    img = img + noise * (1.0 + (texture_gain - 1.0) * mask)[..., None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate(params: SynthParams) -> list[ImageRecord]:
    """Light records first, then Dark; each carries its pixels in ``record.image``."""
    rng = np.random.default_rng(params.seed)
    out: list[ImageRecord] = []
    for group, base in ((SkinToneGroup.LIGHT, params.light_luminance), (SkinToneGroup.DARK, params.dark_luminance)):
        labels, probs = _mix_for(params, group)
        for i in range(params.n_per_group):
            cond = labels[rng.choice(len(labels), p=probs)]
            mid, coarse, _, _ = CONDITIONS[cond]
            out.append(
                ImageRecord(
                    id=f"synth-{group.value.lower()}-{i:05d}",
                    source="",
                    fst=GROUP_FST[group],
                    fine_label=cond,
                    mid_label=mid,
                    coarse_label=coarse,
                    image=_render(rng, params, base, cond),
                )
            )
    return out


def write_dataset(records: Sequence[ImageRecord], out_dir: str | Path) -> Path:
    """Write PNGs plus a Fitzpatrick17k-format metadata CSV; returns the CSV path."""
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for r in records:
        name = f"{r.id}.png"
        Image.fromarray(np.clip(r.image * 255.0 + 0.5, 0, 255).astype(np.uint8)).save(img_dir / name)
        written.append(ImageRecord(r.id, f"images/{name}", r.fst, r.fine_label, r.mid_label, r.coarse_label))
    csv_path = out_dir / "metadata.csv"
    write_metadata(written, csv_path, FITZPATRICK17K_SCHEMA)
    return csv_path
