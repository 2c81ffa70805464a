import json

import pytest
from PIL import Image

from fairvae.audit import ImageMetric, RunMetrics
from fairvae.cli import main
from fairvae.config import load_pipeline_config

from test_audit import tiny_pipeline

HEADER = "md5hash,fitzpatrick_scale,label,nine_partition_label,three_partition_label,url\n"


def test_empty_metadata_fails_and_names_file(tmp_path, capsys):
    path = tmp_path / "meta.csv"
    path.write_text(HEADER)
    assert main(["data", "prepare", "--metadata", str(path), "--out", str(tmp_path / "o")]) != 0
    assert str(path) in capsys.readouterr().err


def test_missing_metadata_file(tmp_path, capsys):
    assert main(["data", "prepare", "--metadata", str(tmp_path / "nope.csv")]) == 1
    assert "nope.csv" in capsys.readouterr().err


def test_prepare_synthetic(tmp_path):
    out = tmp_path / "prep"
    assert main(["data", "prepare", "--synthetic", "--reps", "2", "--out", str(out)]) == 0
    summary = json.loads((out / "data_summary.json").read_text())
    assert summary["fst_counts"] == {"1": 600, "6": 600}
    assert sorted(p.name for p in (out / "splits").iterdir()) == ["rep00.jsonl", "rep01.jsonl"]
    assert Image.open(out / "fst_histogram.png").text["Description"] == f"config_hash={summary['config_hash']}"


def test_synth_generate_then_prepare_from_csv(tmp_path):
    data = tmp_path / "synth"
    assert main(["synth", "generate", "--out", str(data), "--side", "8", "--n-per-group", "505"]) == 0
    out = tmp_path / "prep"
    rc = main(["data", "prepare", "--metadata", str(data / "metadata.csv"), "--images", str(data),
               "--reps", "1", "--out", str(out)])
    assert rc == 0
    summary = json.loads((out / "data_summary.json").read_text())
    assert summary["fst_counts"] == {"1": 505, "6": 505} and summary["rejected_rows"] == 0
    roles = [json.loads(line)["role"] for line in (out / "splits" / "rep00.jsonl").read_text().splitlines()]
    assert roles.count("test") == 1000 and roles.count("train_pool") == 10


def test_prepare_sizing_error_is_input_error(tmp_path, capsys):
    data = tmp_path / "synth"
    main(["synth", "generate", "--out", str(data), "--side", "8", "--n-per-group", "3"])
    cfg = tiny_pipeline(synthetic=None, metadata=str(data / "metadata.csv"), image_root=str(data))
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg.to_dict()))
    assert main(["data", "prepare", "--config", str(cfg_path), "--out", str(tmp_path / "o")]) == 1
    assert "3" in capsys.readouterr().err


def _write_runs(metrics_dir, failed_cell=None):
    metrics_dir.mkdir(parents=True, exist_ok=True)
    for name in ("A_Light", "B_Mixed", "C_Dark"):
        failed = name == failed_cell
        recs = [] if failed else [
            ImageMetric(f"{g}{i}", g, 0.01 * (i + 1) * (2 if g == "Dark" else 1), 0.9, "x", "y", "z")
            for g in ("Light", "Dark") for i in range(4)
        ]
        RunMetrics(name, 0, 7, "h", recs, failed=failed, error="boom" if failed else None).write(
            metrics_dir / f"rep00_{name}.jsonl")


def test_report_flags_failed_cells(tmp_path):
    _write_runs(tmp_path / "metrics", failed_cell="B_Mixed")
    assert main(["report", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "report.json").read_text())
    assert doc["partial"] is True
    assert set(doc["incomplete"]) == {"B_Mixed/Light", "B_Mixed/Dark"}
    assert doc["cells"]["B_Mixed"]["Light"]["n_failed"] == 1
    assert (tmp_path / "metrics.csv").is_file() and (tmp_path / "figures" / "mse_boxplot.png").is_file()


def test_deleting_one_run_changes_only_its_cell(tmp_path):
    _write_runs(tmp_path / "metrics")
    main(["report", str(tmp_path), "--out", str(tmp_path / "r1")])
    (tmp_path / "metrics" / "rep00_C_Dark.jsonl").unlink()
    main(["report", str(tmp_path), "--out", str(tmp_path / "r2")])
    a = json.loads((tmp_path / "r1" / "report.json").read_text())["cells"]
    b = json.loads((tmp_path / "r2" / "report.json").read_text())["cells"]
    assert set(a) - set(b) == {"C_Dark"}
    assert all(a[c] == b[c] for c in b)


def test_report_on_missing_dir(tmp_path):
    assert main(["report", str(tmp_path / "none")]) == 1


def test_report_skips_unreadable_file(tmp_path, capsys):
    _write_runs(tmp_path / "metrics")
    (tmp_path / "metrics" / "rep01_A_Light.jsonl").write_text("not json\n")
    assert main(["report", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "report.json").read_text())["problems"]
    assert "rep01_A_Light" in capsys.readouterr().err


@pytest.mark.parametrize("suffix", [".json", ".yaml"])
def test_config_files_load(tmp_path, suffix):
    import yaml

    cfg = tiny_pipeline()
    path = tmp_path / f"cfg{suffix}"
    path.write_text(json.dumps(cfg.to_dict()) if suffix == ".json" else yaml.safe_dump(cfg.to_dict()))
    assert load_pipeline_config(path) == cfg


def test_audit_run_end_to_end(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(tiny_pipeline().to_dict()))
    out = tmp_path / "runs"
    assert main(["audit", "run", "--config", str(cfg_path), "--out", str(out), "--configs", "A,C"]) == 0
    doc = json.loads((out / "report.json").read_text())
    assert set(doc["cells"]) == {"A_Light", "C_Dark"}
    assert doc["incomplete"] == [] and doc["partial"] is False
    cfg_hash = json.loads((out / "config.json").read_text())["config_hash"]
    assert doc["config_hash"] == cfg_hash
    assert Image.open(out / "figures" / "reconstructions_dark.png").size == (16 * 4, 16 * 3)
    assert main(["report", str(out), "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "metrics.csv").read_text() == (out / "metrics.csv").read_text()
