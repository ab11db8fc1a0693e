import csv
import json
import os
import subprocess
from pathlib import Path

import pytest

BIN = os.environ.get("GRADFE_BIN", "gradfe")
DATA = Path(os.environ.get("GRADFE_DATA_DIR", Path(__file__).resolve().parents[2] / "data"))
TOY = str(DATA / "toy_three_features.csv")

SMALL_RUN = ["--population", "16", "--budget", "40", "--max-order", "2", "--train-epochs", "4",
             "--finetune-epochs", "1", "--seed", "3"]


def gradfe(*args, env=None):
    full_env = dict(os.environ)
    full_env.setdefault("GRADFE_LOG", "quiet")
    if env:
        full_env.update(env)
    return subprocess.run([BIN, *args], capture_output=True, text=True, env=full_env, timeout=600)


def test_baseline_prints_json():
    r = gradfe("baseline", "--data", TOY, "--target", "target")
    assert r.returncode == 0, r.stderr
    out = json.loads(r.stdout)
    assert out["task"] == "regression"
    assert out["rows"] == 200 and out["features"] == 3
    assert len(out["fold_scores"]) == 5
    assert out["metric"] == pytest.approx(sum(out["fold_scores"]) / 5)


def test_eval_reports_canonical_form():
    r = gradfe("eval", "--data", TOY, "--target", "target", "--feature", "x1 x0 multiply")
    assert r.returncode == 0, r.stderr
    out = json.loads(r.stdout)
    assert out["canonical"] == "x0 x1 multiply"
    assert out["order"] == 1
    assert out["metric"] > out["base"]


def test_folds_flag():
    r = gradfe("baseline", "--data", TOY, "--target", "target", "--folds", "3")
    assert r.returncode == 0, r.stderr
    assert len(json.loads(r.stdout)["fold_scores"]) == 3


@pytest.mark.parametrize("args", [
    ["baseline", "--data", TOY, "--target", "nope"],
    ["eval", "--data", TOY, "--target", "target", "--feature", "x0 multiply"],
    ["eval", "--data", TOY, "--target", "target", "--feature", ""],
    ["baseline", "--data", TOY, "--target", "target", "--task", "banana"],
    ["baseline", "--data", TOY, "--target", "target", "--folds", "1"],
    ["run", "--data", TOY, "--target", "target", "--population", "32", "--budget", "16"],
    ["run", "--data", TOY, "--target", "target", "--max-order", "0"],
    ["frobnicate"],
])
def test_config_errors_exit_2(args):
    assert gradfe(*args).returncode == 2


def test_missing_file_exits_3(tmp_path):
    assert gradfe("baseline", "--data", str(tmp_path / "absent.csv"), "--target", "y").returncode == 3


def test_malformed_csv_exits_3(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b,y\n1,2,3\n4,5\n")
    assert gradfe("baseline", "--data", str(bad), "--target", "y").returncode == 3


def test_log_level_quiet_silences_stderr():
    quiet = gradfe("baseline", "--data", TOY, "--target", "target", env={"GRADFE_LOG": "quiet"})
    info = gradfe("baseline", "--data", TOY, "--target", "target", env={"GRADFE_LOG": "info"})
    assert quiet.stderr == ""
    assert "loaded 200 rows" in info.stderr


def strip_timings(report):
    report = dict(report)
    report.pop("timings")
    return report


def test_run_outputs_and_worker_determinism(tmp_path):
    reports = []
    for workers in ("1", "4"):
        out = tmp_path / f"w{workers}"
        r = gradfe("run", "--data", TOY, "--target", "target", "--workers", workers, "--out", str(out), *SMALL_RUN)
        assert r.returncode == 0, r.stderr
        for name in ("report.json", "augmented.csv", "loss_history.csv", "optimizer.ckpt"):
            assert (out / name).is_file(), name
        reports.append(json.loads((out / "report.json").read_text()))

    a, b = reports
    assert strip_timings(a) == strip_timings(b)
    assert a["budget"]["spent"] <= 40
    assert a["timings"]["workers"] == 1 and b["timings"]["workers"] == 4

    with open(tmp_path / "w1" / "augmented.csv", newline="") as f:
        rows = list(csv.reader(f))
    header = rows[0]
    assert header[:3] == ["x0", "x1", "x2"] and header[-1] == "target"
    assert len(header) == 4 + len(a["selection"]["features"])
    assert len(set(header)) == len(header)
    assert len(rows) == 201

    with open(tmp_path / "w1" / "loss_history.csv", newline="") as f:
        assert next(csv.reader(f)) == ["epoch", "L_pp", "L_rec", "lambda", "total"]


def test_random_mode_writes_no_checkpoint(tmp_path):
    out = tmp_path / "rand"
    r = gradfe("run", "--data", TOY, "--target", "target", "--mode", "random", "--out", str(out), *SMALL_RUN)
    assert r.returncode == 0, r.stderr
    assert not (out / "optimizer.ckpt").exists()
    report = json.loads((out / "report.json").read_text())
    assert all(c["origin"] != "optimized" for c in report["candidates"])
