"""Command-line entry point: ``fairvae {data prepare, audit run, report, synth generate}``.

Exit codes: 0 success, 1 input error, 2 one or more failed training runs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from collections import Counter
from pathlib import Path

from fairvae.audit import reconstruction_grid, run_experiment
from fairvae.config import (
    ExtractorConfig,
    PipelineConfig,
    SynthParams,
    canonical_config_name,
    load_pipeline_config,
)
from fairvae.dataset import (
    FITZPATRICK17K_SCHEMA,
    DatasetError,
    SkinToneGroup,
    make_split,
    read_metadata,
    write_manifest,
)
from fairvae.report import fst_histogram, load_runs, save_grid, write_report
from fairvae.synthetic import SHIFTED_MIX, generate, write_dataset
from fairvae.vae import load_checkpoint

logger = logging.getLogger("fairvae")

EXIT_OK, EXIT_INPUT, EXIT_RUN_FAILED = 0, 1, 2


class InputError(Exception):
    pass


def resolve_config(args) -> PipelineConfig:
    """Config file (or a preset) with command-line overrides applied."""
    if getattr(args, "config", None):
        cfg = load_pipeline_config(args.config)
    elif getattr(args, "synthetic", False):
        cfg = PipelineConfig.desk()
    else:
        cfg = PipelineConfig()
    if getattr(args, "synthetic", False) and cfg.synthetic is None:
        cfg = dataclasses.replace(cfg, synthetic=SynthParams(side=cfg.arch.input_side),
                                  extractor=ExtractorConfig(kind="random_vgg"))
    proto = cfg.protocol
    if getattr(args, "reps", None) is not None:
        proto = dataclasses.replace(proto, n_reps=args.reps)
    if getattr(args, "configs", None):
        proto = dataclasses.replace(proto, configs=tuple(canonical_config_name(c) for c in args.configs.split(",")))
    if getattr(args, "seed", None) is not None:
        proto = dataclasses.replace(proto, base_seed=args.seed)
    cfg = dataclasses.replace(cfg, protocol=proto)
    if getattr(args, "side", None) is not None:
        cfg = dataclasses.replace(cfg, arch=dataclasses.replace(cfg.arch, input_side=args.side))
        cfg.arch.n_stages  # validates the side/latent ratio
    if cfg.synthetic is not None and cfg.synthetic.side != cfg.arch.input_side:
        cfg = dataclasses.replace(cfg, synthetic=dataclasses.replace(cfg.synthetic, side=cfg.arch.input_side))
    if getattr(args, "epochs", None) is not None:
        cfg = dataclasses.replace(cfg, epochs=args.epochs)
    if getattr(args, "metadata", None):
        cfg = dataclasses.replace(cfg, metadata=args.metadata, synthetic=None)
    if getattr(args, "images", None):
        cfg = dataclasses.replace(cfg, image_root=args.images)
    if getattr(args, "weights", None):
        cfg = dataclasses.replace(cfg, extractor=ExtractorConfig(kind="vgg19", weights_path=args.weights))
    if getattr(args, "out", None):
        cfg = dataclasses.replace(cfg, out=args.out)
    return cfg


def load_records(cfg: PipelineConfig):
    if cfg.synthetic is not None:
        return generate(cfg.synthetic), None
    if not cfg.metadata:
        raise InputError("no dataset given: pass --metadata or --synthetic (or set it in --config)")
    path = Path(cfg.metadata)
    if not path.is_file():
        raise InputError(f"metadata file not found: {path}")
    try:
        return read_metadata(path, cfg.schema or FITZPATRICK17K_SCHEMA)
    except DatasetError as exc:
        raise InputError(f"{path}: {exc}") from exc


def cmd_data_prepare(args) -> int:
    cfg = resolve_config(args)
    records, summary = load_records(cfg)
    if summary is None:
        counts = dict(sorted(Counter(r.fst for r in records).items()))
        summary_doc = {"total_rows": len(records), "rejected_rows": 0, "fst_counts": {str(k): v for k, v in counts.items()}}
    else:
        counts = summary.fst_counts
        summary_doc = summary.to_dict()
    if not records:
        raise InputError(f"{cfg.metadata or 'synthetic dataset'}: no records")
    out = Path(cfg.out)
    (out / "splits").mkdir(parents=True, exist_ok=True)
    config_hash = cfg.hash()
    summary_doc["config_hash"] = config_hash
    (out / "data_summary.json").write_text(json.dumps(summary_doc, indent=2))
    fst_histogram(counts, out / "fst_histogram.png", config_hash=config_hash)
    try:
        for r in range(cfg.protocol.n_reps):
            split = make_split(records, cfg.protocol.test_size, cfg.protocol.base_seed + r)
            write_manifest(split, out / "splits" / f"rep{r:02d}.jsonl")
    except DatasetError as exc:
        raise InputError(str(exc)) from exc
    print(f"prepared {len(records)} records -> {out}")
    return EXIT_OK


def cmd_audit_run(args) -> int:
    cfg = resolve_config(args)
    records, _ = load_records(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    config_hash = cfg.hash()
    (out / "config.json").write_text(json.dumps({**cfg.to_dict(), "config_hash": config_hash}, indent=2))
    try:
        runs = run_experiment(records, cfg, out_dir=out, jobs=args.jobs)
    except DatasetError as exc:
        raise InputError(str(exc)) from exc
    report = write_report(runs, out, cfg.protocol.test_size, config_hash)

    # reconstruction grids from the first repetition's checkpoints
    models = {}
    for name in cfg.protocol.configs:
        ckpt = out / "models" / f"rep00_{name}" / "model.pt"
        if ckpt.is_file():
            models[name] = load_checkpoint(ckpt)[0]
    if models:
        split = make_split(records, cfg.protocol.test_size, cfg.protocol.base_seed)
        for group, test in ((SkinToneGroup.LIGHT, split.test_light), (SkinToneGroup.DARK, split.test_dark)):
            grid = reconstruction_grid(models, test, min(8, len(test)), cfg.arch.input_side, seed=cfg.protocol.base_seed,
                                       image_root=cfg.image_root)
            save_grid(grid, out / "figures" / f"reconstructions_{group.value.lower()}.png", config_hash)

    failed = [r for r in runs if r.failed]
    print(f"{len(runs)} runs, {len(failed)} failed; report -> {out / 'report.json'}")
    if report.incomplete:
        print("incomplete cells: " + ", ".join(report.incomplete))
    return EXIT_RUN_FAILED if failed else EXIT_OK


def cmd_report(args) -> int:
    runs_dir = Path(args.runs)
    if not runs_dir.is_dir():
        raise InputError(f"runs directory not found: {runs_dir}")
    runs, problems = load_runs(runs_dir)
    if not runs:
        raise InputError(f"{runs_dir}: no readable run records" + (f" ({'; '.join(problems)})" if problems else ""))
    config_hash = None
    cfg_path = runs_dir / "config.json"
    test_size = None
    if cfg_path.is_file():
        doc = json.loads(cfg_path.read_text())
        config_hash = doc.get("config_hash")
        test_size = doc.get("protocol", {}).get("test_size")
    report = write_report(runs, Path(args.out or runs_dir), test_size, config_hash, problems)
    for p in problems:
        print(f"unreadable run record: {p}", file=sys.stderr)
    if report.incomplete:
        print("incomplete cells: " + ", ".join(report.incomplete))
    return EXIT_OK


def cmd_synth_generate(args) -> int:
    params = SynthParams(
        side=args.side,
        n_per_group=args.n_per_group,
        seed=args.seed,
        condition_mix=SHIFTED_MIX if args.shifted_mix else None,
    )
    csv_path = write_dataset(generate(params), args.out)
    (Path(args.out) / "synth_params.json").write_text(json.dumps(params.to_dict(), indent=2))
    print(f"wrote {2 * params.n_per_group} images; metadata -> {csv_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairvae", description="Skin-tone fairness audit of a perceptual-loss VAE.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="pipeline config (JSON or YAML)")
        p.add_argument("--seed", type=int, help="base seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--synthetic", action="store_true", help="use the synthetic testbed instead of real data")
        p.add_argument("--reps", type=int)
        p.add_argument("--side", type=int, help="image side in pixels")
        p.add_argument("--metadata", help="metadata CSV")
        p.add_argument("--images", help="image directory (relative sources resolve against it)")

    data = sub.add_parser("data", help="dataset preparation").add_subparsers(dest="action", required=True)
    prep = data.add_parser("prepare", help="parse metadata, write split manifests and the FST histogram")
    common(prep)
    prep.set_defaults(func=cmd_data_prepare)

    audit = sub.add_parser("audit", help="train and evaluate").add_subparsers(dest="action", required=True)
    run = audit.add_parser("run", help="train and evaluate the full representation sweep")
    common(run)
    run.add_argument("--configs", help="comma-separated, e.g. A,B,C")
    run.add_argument("--epochs", type=int)
    run.add_argument("--weights", help="VGG19 state-dict file for the perceptual loss")
    run.add_argument("--jobs", type=int, default=1)
    run.set_defaults(func=cmd_audit_run)

    rep = sub.add_parser("report", help="rebuild the report from persisted run records")
    rep.add_argument("runs", help="directory written by 'audit run'")
    rep.add_argument("--out", help="report directory (defaults to the runs directory)")
    rep.set_defaults(func=cmd_report)

    synth = sub.add_parser("synth", help="synthetic testbed").add_subparsers(dest="action", required=True)
    gen = synth.add_parser("generate", help="write a synthetic dataset in the metadata CSV format")
    gen.add_argument("--out", required=True)
    gen.add_argument("--side", type=int, default=32)
    gen.add_argument("--n-per-group", type=int, default=600)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--shifted-mix", action="store_true", help="give the groups different condition mixes")
    gen.set_defaults(func=cmd_synth_generate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
