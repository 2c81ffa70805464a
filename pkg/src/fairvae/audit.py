"""Representation-sweep protocol, per-group metrics and their aggregation."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd
import torch

from fairvae.config import PipelineConfig
from fairvae.dataset import (
    DatasetSplit,
    ImageRecord,
    SkinToneGroup,
    assign_group,
    load_images,
    make_split,
    sample_training_set,
    write_manifest,
)
from fairvae.perceptual import FeatureExtractor, build_extractor
from fairvae.training import train
from fairvae.vae import images_to_tensor, tensor_to_images

logger = logging.getLogger(__name__)

GROUPS = (SkinToneGroup.LIGHT.value, SkinToneGroup.DARK.value)
GRANULARITIES = ("coarse", "mid", "fine")


class AuditError(ValueError):
    pass


@dataclass
class ImageMetric:
    image_id: str
    group: str
    mse: float
    mean_latent_std: float
    fine: str
    mid: str
    coarse: str

    def label(self, granularity: str) -> str:
        return getattr(self, granularity)


@dataclass
class RunMetrics:
    config_name: str
    repetition: int
    seed: int
    config_hash: str
    records: list[ImageMetric] = field(default_factory=list)
    failed: bool = False
    error: str | None = None
    excluded: int = 0
    train_log: dict | None = None

    def header(self) -> dict:
        return {
            "kind": "run",
            "config_name": self.config_name,
            "repetition": self.repetition,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "failed": self.failed,
            "error": self.error,
            "excluded": self.excluded,
            "train_log": self.train_log,
        }

    @property
    def filename(self) -> str:
        return f"rep{self.repetition:02d}_{self.config_name}.jsonl"

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(self.header()) + "\n")
            for rec in self.records:
                fh.write(json.dumps({"kind": "image", **asdict(rec)}) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "RunMetrics":
        with open(path, encoding="utf-8") as fh:
            lines = [json.loads(line) for line in fh if line.strip()]
        if not lines or lines[0].get("kind") != "run":
            raise AuditError(f"{path} does not start with a run header")
        head = {k: v for k, v in lines[0].items() if k != "kind"}
        recs = []
        for d in lines[1:]:
            d.pop("kind", None)
            recs.append(ImageMetric(**d))
        return cls(records=recs, **head)


@dataclass
class BoxStats:
    n: int
    min: float | None
    q1: float | None
    median: float | None
    q3: float | None
    max: float | None
    mean: float | None

    @classmethod
    def of(cls, values: Sequence[float]) -> "BoxStats":
        if len(values) == 0:
            return cls(0, None, None, None, None, None, None)
        v = np.asarray(values, dtype=float)
        q = np.percentile(v, [0, 25, 50, 75, 100])
        return cls(len(v), *(float(x) for x in q), float(v.mean()))


@dataclass
class AuditReport:
    cells: dict[str, dict[str, dict]]
    gaps: dict[str, float | None]
    prevalence: dict[str, pd.DataFrame]
    condition_mse: dict[str, dict[str, pd.DataFrame]]
    manifest: list[dict]
    incomplete: list[str]

    def cell(self, config: str, group: str) -> dict:
        return self.cells[config][group]

    def to_dict(self) -> dict:
        def frame(df: pd.DataFrame) -> dict:
            return {
                str(idx): {c: (None if pd.isna(v) else float(v)) for c, v in row.items()}
                for idx, row in df.iterrows()
            }

        return {
            "cells": self.cells,
            "gaps": self.gaps,
            "prevalence": {g: frame(df) for g, df in self.prevalence.items()},
            "condition_mse": {c: {g: frame(df) for g, df in per.items()} for c, per in self.condition_mse.items()},
            "manifest": self.manifest,
            "incomplete": self.incomplete,
        }


def derive_seeds(base_seed: int, repetition: int, config_name: str) -> tuple[int, int]:
    """Return ``(split_seed, config_seed)`` for one cell of the sweep."""
    seed_r = base_seed + repetition
    digest = hashlib.sha256(f"{seed_r}:{config_name}".encode()).digest()
    return seed_r, int.from_bytes(digest[:4], "little")


@torch.no_grad()
def evaluate(
    model,
    test: Sequence[ImageRecord],
    side: int,
    image_root: str | Path | None = None,
    batch_size: int = 100,
) -> tuple[list[ImageMetric], list[str]]:
    """Reconstruct each image from its latent mean; returns metrics and failed ids.

    ``mse`` depends only on the decoder output and ``mean_latent_std`` only on
    the encoder's log-variance.
    """
    if hasattr(model, "eval"):
        model.eval()
    images, kept, failed = load_images(test, side, image_root)
    out: list[ImageMetric] = []
    for start in range(0, len(kept), batch_size):
        x = images_to_tensor(images[start : start + batch_size])
        g = model.encode(x)
        x_hat = model.decode(g.mu)
        mse = (x - x_hat).pow(2).flatten(1).mean(dim=1)
        mstd = g.std().flatten(1).mean(dim=1)
        for rec, m, s in zip(kept[start : start + batch_size], mse.tolist(), mstd.tolist()):
            grp = assign_group(rec.fst)
            out.append(
                ImageMetric(
                    image_id=rec.id,
                    group=grp.value if grp else "none",
                    mse=m,
                    mean_latent_std=s,
                    fine=rec.fine_label,
                    mid=rec.mid_label,
                    coarse=rec.coarse_label,
                )
            )
    return out, failed


def _run_one(
    split: DatasetSplit,
    cfg: PipelineConfig,
    repetition: int,
    config_name: str,
    extractor: FeatureExtractor,
    run_dir: Path | None,
) -> RunMetrics:
    _, config_seed = derive_seeds(cfg.protocol.base_seed, repetition, config_name)
    tcfg = cfg.training_config(config_name, config_seed)
    run = RunMetrics(config_name=config_name, repetition=repetition, seed=config_seed, config_hash=tcfg.hash())
    try:
        train_set = sample_training_set(split, tcfg)
        model, log = train(train_set, tcfg, extractor, cfg.arch, cfg.image_root, run_dir=run_dir)
        run.train_log = {"epochs": log.epochs, "excluded": log.excluded}
        metrics, failed = [], []
        for test in (split.test_light, split.test_dark):
            m, f = evaluate(model, test, cfg.arch.input_side, cfg.image_root, cfg.eval_batch_size)
            metrics += m
            failed += f
        run.records = metrics
        run.excluded = len(failed)
    except Exception as exc:  # a failed cell must not abort the sweep
        logger.exception("run rep=%d config=%s failed", repetition, config_name)
        run.failed = True
        run.error = f"{type(exc).__name__}: {exc}"
    return run


def _run_task(args):
    split, cfg, r, name, run_dir = args
    torch.set_num_threads(1)
    return _run_one(split, cfg, r, name, build_extractor(cfg.extractor), run_dir)


def run_experiment(
    records: Sequence[ImageRecord],
    cfg: PipelineConfig,
    extractor: FeatureExtractor | None = None,
    out_dir: str | Path | None = None,
    jobs: int = 1,
) -> list[RunMetrics]:
    """Run ``n_reps x len(configs)`` train/evaluate cells.

    Each repetition draws a fresh split from ``base_seed + r``. When
    ``out_dir`` is given, split manifests, per-run directories and RunMetrics
    files are written under it.
    """
    proto = cfg.protocol
    out = Path(out_dir) if out_dir is not None else None
    tasks = []
    for r in range(proto.n_reps):
        seed_r, _ = derive_seeds(proto.base_seed, r, "")
        split = make_split(records, proto.test_size, seed_r)
        if out is not None:
            (out / "splits").mkdir(parents=True, exist_ok=True)
            write_manifest(split, out / "splits" / f"rep{r:02d}.jsonl")
        for name in proto.configs:
            run_dir = out / "models" / f"rep{r:02d}_{name}" if out is not None else None
            tasks.append((split, cfg, r, name, run_dir))

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(_run_task, tasks))
    else:
        if extractor is None:
            extractor = build_extractor(cfg.extractor)
        runs = [_run_one(split, c, r, n, extractor, d) for split, c, r, n, d in tasks]

    if out is not None:
        (out / "metrics").mkdir(parents=True, exist_ok=True)
        for run in runs:
            run.write(out / "metrics" / run.filename)
    return runs


def _group_of(rec) -> str | None:
    if isinstance(rec, ImageMetric):
        return rec.group if rec.group in GROUPS else None
    g = assign_group(rec.fst)
    return g.value if g else None


def _label_of(rec, granularity: str) -> str:
    if granularity not in GRANULARITIES:
        raise ValueError(f"granularity must be one of {GRANULARITIES}")
    return rec.label(granularity)


def condition_prevalence(records: Iterable, granularity: str) -> pd.DataFrame:
    """Share of each condition within the Light and within the Dark group.

    Accepts ImageRecords or ImageMetrics; returns a frame indexed by condition
    with columns ``Light`` and ``Dark``, each summing to 1 when non-empty.
    """
    rows = [(_group_of(r), _label_of(r, granularity)) for r in records]
    df = pd.DataFrame([row for row in rows if row[0] is not None], columns=["group", "condition"])
    counts = df.groupby(["condition", "group"]).size().unstack("group", fill_value=0)
    counts = counts.reindex(columns=list(GROUPS), fill_value=0)
    totals = counts.sum(axis=0).replace(0, np.nan)
    return (counts / totals).astype(float).sort_index()


def per_condition_mse(runs: Sequence[RunMetrics], granularity: str) -> pd.DataFrame:
    """Mean MSE per condition and group; NaN where a group has no images of that condition."""
    rows = [
        (rec.group, _label_of(rec, granularity), rec.mse)
        for run in runs
        if not run.failed
        for rec in run.records
        if rec.group in GROUPS
    ]
    df = pd.DataFrame(rows, columns=["group", "condition", "mse"])
    table = df.groupby(["condition", "group"])["mse"].mean().unstack("group")
    return table.reindex(columns=list(GROUPS)).sort_index()


def metric_table(runs: Sequence[RunMetrics]) -> pd.DataFrame:
    rows = [
        {"config": run.config_name, "repetition": run.repetition, **asdict(rec)}
        for run in runs
        if not run.failed
        for rec in run.records
    ]
    cols = ["config", "repetition", "image_id", "group", "mse", "mean_latent_std", "fine", "mid", "coarse"]
    return pd.DataFrame(rows, columns=cols)


def aggregate(runs: Sequence[RunMetrics], test_size: int | None = None) -> AuditReport:
    """Boxplot statistics per (config, group), gaps and condition breakdowns.

    With ``test_size`` set, a cell is complete when its record count equals
    ``n_runs x test_size`` minus logged exclusions and no run failed.
    """
    if not runs:
        raise AuditError("cannot aggregate an empty run list")
    configs = sorted({r.config_name for r in runs})
    cells: dict[str, dict[str, dict]] = {}
    incomplete: list[str] = []
    gaps: dict[str, float | None] = {}
    for c in configs:
        cruns = [r for r in runs if r.config_name == c]
        ok = [r for r in cruns if not r.failed]
        cells[c] = {}
        for g in GROUPS:
            recs = [m for r in ok for m in r.records if m.group == g]
            excluded = sum(r.excluded for r in ok)
            cell = {
                "n": len(recs),
                "n_runs": len(cruns),
                "n_failed": len(cruns) - len(ok),
                "excluded": excluded,
                "mse": asdict(BoxStats.of([m.mse for m in recs])),
                "mean_latent_std": asdict(BoxStats.of([m.mean_latent_std for m in recs])),
            }
            complete = cell["n_failed"] == 0 and len(recs) > 0
            if test_size is not None:
                expected = len(cruns) * test_size
                cell["expected"] = expected
                # exclusions are logged per run, not per group; bound the cell count by them
                complete = complete and expected - excluded <= len(recs) <= expected
            cell["complete"] = complete
            if not complete:
                incomplete.append(f"{c}/{g}")
            cells[c][g] = cell
        ml, md = cells[c]["Light"]["mse"]["median"], cells[c]["Dark"]["mse"]["median"]
        gaps[c] = None if ml is None or md is None else md - ml

    ok_runs = [r for r in runs if not r.failed]
    seen: dict[tuple[int, str], ImageMetric] = {}
    for r in ok_runs:
        for m in r.records:
            seen.setdefault((r.repetition, m.image_id), m)
    test_records = list(seen.values())
    prevalence = {g: condition_prevalence(test_records, g) for g in GRANULARITIES} if test_records else {}
    condition_mse = {
        c: {g: per_condition_mse([r for r in ok_runs if r.config_name == c], g) for g in GRANULARITIES}
        for c in configs
        if any(r.config_name == c for r in ok_runs)
    }
    manifest = [
        {k: v for k, v in r.header().items() if k not in ("kind", "train_log")} | {"n_records": len(r.records)}
        for r in runs
    ]
    return AuditReport(cells, gaps, prevalence, condition_mse, manifest, incomplete)


@torch.no_grad()
def reconstruction_grid(
    models: Mapping[str, object],
    samples: Sequence[ImageRecord],
    k: int,
    side: int,
    seed: int = 0,
    image_root: str | Path | None = None,
) -> np.ndarray:
    """Originals in the first row, then one row of mean-latent reconstructions per model."""
    if k == 0 or not samples:
        return np.zeros((0, 0, 3), dtype=np.float32)
    if k > len(samples):
        raise AuditError(f"asked for {k} samples but only {len(samples)} supplied")
    idx = np.sort(np.random.default_rng(seed).choice(len(samples), size=k, replace=False))
    images, _, _ = load_images([samples[i] for i in idx], side, image_root)
    rows = [images]
    x = images_to_tensor(images)
    for model in models.values():
        if hasattr(model, "eval"):
            model.eval()
        rows.append(tensor_to_images(model.decode(model.encode(x).mu)))
    return np.concatenate([np.concatenate(list(r), axis=1) for r in rows], axis=0).astype(np.float32)
