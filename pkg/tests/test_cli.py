import csv
import json

import numpy as np
import pytest

from kmpforce import cli
from kmpforce.control import ScanLog
from kmpforce.errors import NumericalError

FAST = ["--scan-length", "20", "--grid-points", "60", "--gmm-restarts", "1", "--n-components", "3"]


def run(*args):
    return cli.main([str(a) for a in args])


def test_generate_split_and_determinism(tmp_path):
    assert run("generate", "--scenario", "compression", "--count", 10, "--seed", 42, "--run-dir", tmp_path / "a") == 0
    assert run("generate", "--scenario", "compression", "--count", 10, "--seed", 42, "--run-dir", tmp_path / "b") == 0
    files = sorted((tmp_path / "a" / "demos").glob("*.csv"))
    assert len(files) == 10
    manifest = json.loads((tmp_path / "a" / "demos" / "manifest.json").read_text())
    assert len(manifest["train"]) == 5 and len(manifest["validation"]) == 5
    assert not set(manifest["train"]) & set(manifest["validation"])
    for f in files:
        assert f.read_bytes() == (tmp_path / "b" / "demos" / f.name).read_bytes()


def test_usage_errors(tmp_path, capsys):
    assert run("generate", "--count", 0, "--run-dir", tmp_path) == cli.EXIT_USAGE
    assert run("generate", "--phantom", "nope", "--run-dir", tmp_path) == cli.EXIT_USAGE
    assert run("generate", "--via", "0.5:20", "--run-dir", tmp_path) == cli.EXIT_USAGE
    assert run("train") == cli.EXIT_USAGE
    with pytest.raises(SystemExit) as info:
        run("generate", "--bogus")
    assert info.value.code == 2
    (tmp_path / "cfg.json").write_text(json.dumps({"colour": "red"}))
    assert run("generate", "--config", tmp_path / "cfg.json", "--run-dir", tmp_path) == cli.EXIT_USAGE
    assert "colour" in capsys.readouterr().err


def test_config_file_and_flag_precedence(tmp_path):
    (tmp_path / "cfg.json").write_text(json.dumps({"count": 3, "scenario": "bimodal", "scan_length": 20.0}))
    assert run("generate", "--config", tmp_path / "cfg.json", "--count", 4, "--run-dir", tmp_path / "r") == 0
    saved = json.loads((tmp_path / "r" / "config.json").read_text())
    assert saved["count"] == 4 and saved["scenario"] == "bimodal"
    assert len(list((tmp_path / "r" / "demos").glob("*.csv"))) == 4


def test_output_root_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    assert run("generate", "--count", 2, "--scan-length", 10) == 0
    runs = list((tmp_path / "root").iterdir())
    assert len(runs) == 1 and (runs[0] / "demos" / "manifest.json").exists()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    rd = root / "run"
    assert run("run", "--scenario", "constant", "--count", 4, "--seed", 3, "--noise-std", 0, "--run-dir", rd, *FAST) == 0
    return rd


def test_pipeline_outputs(pipeline):
    for rel in ("demos/aligned/manifest.json", "models/gmm.json", "models/kmp.json", "models/diagnostic.json",
                "logs/scan/scan_log.csv", "logs/scan/manifest.json", "reports/report.json",
                "reports/summary.csv", "reports/per_demo.csv"):
        assert (pipeline / rel).is_file(), rel
    diag = json.loads((pipeline / "models" / "diagnostic.json").read_text())
    assert diag["log_likelihood_monotone"] is True
    assert np.all(np.diff(diag["log_likelihood"]) >= -1e-9)
    assert diag["gram_condition_number"] >= 1
    with (pipeline / "reports" / "summary.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["metric", "mean", "std"]
    report = json.loads((pipeline / "reports" / "report.json").read_text())
    train = json.loads((pipeline / "demos" / "manifest.json").read_text())["train"]
    assert report["metadata"]["training_ids"] == train
    assert not set(report["metadata"]["validation_ids"]) & set(train)
    log = ScanLog.load(pipeline / "logs" / "scan")
    scan = log.scan_mask()
    assert abs(log.f_target_mean[scan] - 6.0).max() < 0.05


def test_stages_are_idempotent(pipeline):
    before = {p: p.read_bytes() for p in pipeline.rglob("*") if p.is_file()}
    for stage in ("align", "train", "reproduce", "evaluate"):
        assert run(stage, "--run-dir", pipeline) == 0
    after = {p: p.read_bytes() for p in pipeline.rglob("*") if p.is_file()}
    assert before == after


def test_via_point_flag(tmp_path):
    rd = tmp_path / "r"
    assert run("run", "--scenario", "constant", "--count", 2, "--run-dir", rd, *FAST) == 0
    assert run("reproduce", "--run-dir", rd, "--via", "0.5:10.0:1e-6") == 0
    log = ScanLog.load(rd / "logs" / "scan")
    scan = log.scan_mask()
    s = np.array([log.plan.progress(x) for x in log.x_d[scan]])
    assert log.f_target_mean[scan][np.argmin(abs(s - 0.5))] == pytest.approx(10.0, abs=0.05)
    assert log.metadata["via_points"][0]["mean"] == [10.0]


def test_divergence_exit_code(pipeline, tmp_path):
    import shutil
    rd = tmp_path / "copy"
    shutil.copytree(pipeline, rd)
    assert run("reproduce", "--run-dir", rd, "--dt", 0.1) == cli.EXIT_DIVERGED
    manifest = json.loads((rd / "logs" / "scan" / "manifest.json").read_text())
    assert manifest["metadata"]["aborted"] is True
    assert run("evaluate", "--run-dir", rd) == cli.EXIT_DATA


def test_corrupt_demo_is_a_data_error(tmp_path, capsys):
    rd = tmp_path / "r"
    assert run("generate", "--count", 2, "--run-dir", rd, "--scan-length", 10) == 0
    train = json.loads((rd / "demos" / "manifest.json").read_text())["train"][0]
    path = rd / "demos" / f"{train}.csv"
    lines = path.read_text().splitlines()
    lines[5] = lines[5].replace(",", ";", 1)
    path.write_text("\n".join(lines) + "\n")
    assert run("train", "--run-dir", rd) == cli.EXIT_DATA
    assert f"{train}.csv" in capsys.readouterr().err


def test_empty_validation_set(tmp_path):
    rd = tmp_path / "r"
    assert run("run", "--count", 1, "--run-dir", rd, "--scenario", "constant", *FAST) == cli.EXIT_DATA
    assert (rd / "logs" / "scan" / "scan_log.csv").exists()
    assert not (rd / "reports").exists()


def test_numerical_failure_exit_code(tmp_path, monkeypatch):
    rd = tmp_path / "r"
    assert run("generate", "--count", 2, "--run-dir", rd, "--scan-length", 10) == 0

    def boom(*a, **k):
        raise NumericalError("singular")

    monkeypatch.setattr(cli, "fit_gmm", boom)
    assert run("train", "--run-dir", rd) == cli.EXIT_NUMERIC


def test_report_concatenates(pipeline, tmp_path):
    out = tmp_path / "all.csv"
    assert run("report", pipeline, pipeline, "--out", out) == 0
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["run", "metric", "mean", "std"] and len(rows) == 7
    assert run("report", tmp_path, "--out", out) == cli.EXIT_DATA
