import csv
import json
import subprocess
import sys
import xml.etree.ElementTree as ET

import pytest

from failpred.cli import main
from test_experiment import TINY


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({**TINY, "output_dir": str(tmp_path / "out")}))
    return path


def _one_error_line(capsys, code):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith(f"error: {code}: ")
    return err[0]


def test_pipeline_verbs_then_plot(tmp_path, config, capsys):
    out = tmp_path / "out"
    assert main(["train", "--config", str(config)]) == 0
    assert json.loads(capsys.readouterr().out)["checkpoint"].endswith("classifier.json")
    assert main(["confidnet", "--config", str(config)]) == 0
    assert json.loads(capsys.readouterr().out)["phase"] == 2
    assert main(["eval", "--config", str(config)]) == 0
    table = capsys.readouterr().out
    for name in ("MCP", "MCDropout", "TrustScore", "ConfidNet"):
        assert name in table
    assert main(["plot", "--config", str(config), "--bins", "7"]) == 0

    with open(out / "hist_confidnet.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 7 * 2
    assert {r["outcome"] for r in rows} == {"correct", "error"}
    with open(out / "risk_coverage.csv") as f:
        rc = [r for r in csv.DictReader(f) if r["method"] == "ConfidNet"]
    cov = [float(r["coverage"]) for r in rc]
    assert cov == sorted(cov, reverse=True)
    for svg in out.glob("*.svg"):
        assert ET.parse(svg).getroot().tag.endswith("svg")


def test_seed_and_out_overrides(tmp_path, config, capsys):
    assert main(["run", "--config", str(config), "--seed", "4", "--out", str(tmp_path / "o4")]) == 0
    report = json.loads((tmp_path / "o4" / "report.json").read_text())
    assert report["seed"] == 4


def test_missing_stage_is_single_line(config, capsys):
    assert main(["eval", "--config", str(config)]) == 2
    line = _one_error_line(capsys, "E_DEPENDENCY")
    assert "run 'train' first" in line


def test_bad_config_is_single_line(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"schema_version": 1, "dataset": {"kind": "synth_blobs"}, "seed": "x"}))
    assert main(["train", "--config", str(path)]) == 2
    assert "config.seed" in _one_error_line(capsys, "E_CONFIG")


def test_usage_errors(capsys):
    assert main(["train"]) == 2
    _one_error_line(capsys, "E_CONFIG")
    assert main(["frobnicate"]) == 2
    _one_error_line(capsys, "E_CONFIG")


def test_metrics_verb(tmp_path, capsys):
    src = tmp_path / "o.csv"
    src.write_text("confidence,is_error\n0.9,0\n0.8,0\n0.3,1\n0.6,1\n")
    assert main(["metrics", "--csv", str(src), "--out", str(tmp_path / "m")]) == 0
    result = json.loads(capsys.readouterr().out)
    assert result["auroc"] == 1.0 and result["aupr_error"] == 1.0
    assert json.loads((tmp_path / "m" / "metrics.json").read_text()) == result
    lines = (tmp_path / "m" / "risk_coverage.csv").read_text().splitlines()
    assert lines[0] == "threshold,coverage,selective_risk" and len(lines) == 1 + 4 + 2


def test_metrics_verb_rejects_single_class(tmp_path, capsys):
    src = tmp_path / "o.csv"
    src.write_text("confidence,is_error\n0.9,0\n0.8,0\n")
    assert main(["metrics", "--csv", str(src)]) == 2
    assert len(capsys.readouterr().err.strip().splitlines()) == 1


def test_plot_without_report(tmp_path, capsys):
    assert main(["plot", "--out", str(tmp_path)]) == 2
    _one_error_line(capsys, "E_DEPENDENCY")


def test_console_entry_point(tmp_path):
    src = tmp_path / "o.csv"
    src.write_text("confidence,is_error\n0.9,0\n0.2,1\n")
    res = subprocess.run([sys.executable, "-m", "failpred.cli", "metrics", "--csv", str(src)],
                         capture_output=True, text=True)
    assert res.returncode == 0 and json.loads(res.stdout)["auroc"] == 1.0
    res = subprocess.run([sys.executable, "-m", "failpred.cli", "metrics", "--csv", str(tmp_path / "none.csv")],
                         capture_output=True, text=True)
    assert res.returncode == 2 and res.stderr.count("\n") == 1
