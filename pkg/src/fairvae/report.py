"""Figures and tables rendered from persisted audit records."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from PIL import Image  # noqa: E402
from PIL.PngImagePlugin import PngInfo  # noqa: E402

from fairvae.audit import GRANULARITIES, GROUPS, AuditError, AuditReport, RunMetrics, aggregate, metric_table  # noqa: E402

logger = logging.getLogger(__name__)

GROUP_COLORS = {"Light": "#f2b880", "Dark": "#7a4a2a"}


def _meta(config_hash: str | None) -> dict:
    return {"Description": f"config_hash={config_hash}"} if config_hash else {}


def fst_histogram(fst_counts: Mapping[int, int], path: str | Path, title: str = "Samples per FST",
                  config_hash: str | None = None) -> None:
    keys = sorted(fst_counts)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar([str(k) for k in keys], [fst_counts[k] for k in keys], color="#5b7aa8")
    ax.set_xlabel("Fitzpatrick skin type")
    ax.set_ylabel("count")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_meta(config_hash))
    plt.close(fig)


def metric_boxplot(runs: Sequence[RunMetrics], metric: str, path: str | Path, ylabel: str,
                   config_hash: str | None = None) -> None:
    """One box per (config, group); configs along the x axis, groups side by side."""
    configs = sorted({r.config_name for r in runs if not r.failed})
    fig, ax = plt.subplots(figsize=(7, 4))
    for gi, group in enumerate(GROUPS):
        data = [
            [getattr(m, metric) for r in runs if r.config_name == c and not r.failed for m in r.records if m.group == group]
            for c in configs
        ]
        pos = np.arange(len(configs)) * 3 + gi
        bp = ax.boxplot(data, positions=pos, widths=0.8, patch_artist=True, showfliers=False)
        for patch in bp["boxes"]:
            patch.set_facecolor(GROUP_COLORS[group])
        ax.plot([], [], color=GROUP_COLORS[group], linewidth=8, label=group)
    ax.set_xticks(np.arange(len(configs)) * 3 + 0.5)
    ax.set_xticklabels(configs)
    ax.set_ylabel(ylabel)
    ax.legend(title="test set")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_meta(config_hash))
    plt.close(fig)


def _diagonal_scatter(ax, df, title):
    ok = df.dropna()
    ax.scatter(ok["Light"], ok["Dark"], s=14, alpha=0.8)
    if len(ok):
        hi = float(np.nanmax(ok.values)) * 1.05 or 1.0
        ax.plot([0, hi], [0, hi], "k--", linewidth=0.8)
    ax.set_xlabel("Light")
    ax.set_ylabel("Dark")
    ax.set_title(title)


def condition_scatter(tables: Mapping[str, object], path: str | Path, suptitle: str,
                      config_hash: str | None = None) -> None:
    fig, axes = plt.subplots(1, len(GRANULARITIES), figsize=(12, 4))
    for ax, gran in zip(axes, GRANULARITIES):
        if gran in tables:
            _diagonal_scatter(ax, tables[gran], gran)
    fig.suptitle(suptitle)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_meta(config_hash))
    plt.close(fig)


def save_grid(grid: np.ndarray, path: str | Path, config_hash: str | None = None) -> None:
    if grid.size == 0:
        Path(path).write_bytes(b"")
        return
    info = PngInfo()
    if config_hash:
        info.add_text("Description", f"config_hash={config_hash}")
    Image.fromarray(np.clip(grid * 255.0 + 0.5, 0, 255).astype(np.uint8)).save(path, pnginfo=info)


def write_report(runs: Sequence[RunMetrics], out_dir: str | Path, test_size: int | None = None,
                 config_hash: str | None = None, problems: Sequence[str] = ()) -> AuditReport:
    """Aggregate ``runs`` and write report.json, metrics.csv, summary.csv and figures."""
    out = Path(out_dir)
    fig_dir = out / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    report = aggregate(runs, test_size)
    doc = report.to_dict()
    doc["config_hash"] = config_hash
    doc["partial"] = bool(report.incomplete or problems)
    doc["problems"] = list(problems)
    (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True))

    table = metric_table(runs).sort_values(["config", "repetition", "group", "image_id"], kind="stable")
    if config_hash:
        table.insert(0, "config_hash", config_hash)
    table.to_csv(out / "metrics.csv", index=False, float_format="%.9g")

    rows = []
    for c, per in report.cells.items():
        for g, cell in per.items():
            rows.append(
                {"config": c, "group": g, "n": cell["n"], "complete": cell["complete"],
                 **{f"mse_{k}": v for k, v in cell["mse"].items() if k != "n"},
                 **{f"std_{k}": v for k, v in cell["mean_latent_std"].items() if k != "n"}}
            )
    pd.DataFrame(rows).to_csv(out / "summary.csv", index=False, float_format="%.9g")

    if any(not r.failed for r in runs):
        metric_boxplot(runs, "mse", fig_dir / "mse_boxplot.png", "MSE", config_hash)
        metric_boxplot(runs, "mean_latent_std", fig_dir / "latent_std_boxplot.png", "mean latent std", config_hash)
    if report.prevalence:
        condition_scatter(report.prevalence, fig_dir / "condition_prevalence.png", "condition prevalence", config_hash)
    for c, tables in report.condition_mse.items():
        condition_scatter(tables, fig_dir / f"condition_mse_{c}.png", f"mean MSE per condition, {c}", config_hash)
    return report


def load_runs(runs_dir: str | Path) -> tuple[list[RunMetrics], list[str]]:
    """Read every ``*.jsonl`` RunMetrics file; unreadable files are reported, not fatal."""
    runs_dir = Path(runs_dir)
    metrics_dir = runs_dir / "metrics" if (runs_dir / "metrics").is_dir() else runs_dir
    runs, problems = [], []
    for path in sorted(metrics_dir.glob("*.jsonl")):
        try:
            runs.append(RunMetrics.read(path))
        except (AuditError, ValueError, TypeError, KeyError) as exc:
            problems.append(f"{path.name}: {exc}")
            logger.warning("skipping %s: %s", path, exc)
    return runs, problems
