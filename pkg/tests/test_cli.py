import hashlib
import json
import subprocess
import sys

import pytest

from lungcad.cli import COMMANDS, build_parser, run

TINY_ARCH = {"input": [3, 32, 32], "layers": [
    {"type": "conv", "out": 4, "k": 3, "s": 1, "p": 1, "bias": False},
    {"type": "bn"}, {"type": "relu"}, {"type": "maxpool", "k": 2, "s": 2},
    {"type": "gap"}, {"type": "fc", "out": 2},
]}


def pipeline(wd, threads=1):
    """synth -> tile -> features -> svm -> predict -> eval -> heatmap (+ a short CNN run)."""
    wd.mkdir(parents=True, exist_ok=True)
    (wd / "tiny.json").write_text(json.dumps(TINY_ARCH))
    g = ["--workdir", str(wd), "--threads", str(threads)]
    steps = [
        ["synth", "--slides", "4", "--size", "648x648", "--regions", "1", "--seed", "7", "--out", "data"],
        ["tile", "--manifest", "data/manifest.json", "--out", "tiles", "--test-fraction", "0.25"],
        ["extract-features", "--inventory", "tiles/inventory.csv", "--manifest", "data/manifest.json",
         "--split", "train", "--out", "train.csv"],
        ["extract-features", "--inventory", "tiles/inventory.csv", "--manifest", "data/manifest.json",
         "--split", "test", "--out", "test.csv"],
        ["train-svm", "--features", "train.csv", "--out", "svm.json"],
        ["predict", "--model", "svm.json", "--features", "test.csv", "--out", "svm_scores.csv"],
        ["train-cnn", "--inventory", "tiles/inventory.csv", "--manifest", "data/manifest.json",
         "--arch", "tiny.json", "--epochs", "1", "--batch", "9", "--lr", "1e-3", "--out", "cnn.json"],
        ["predict", "--model", "cnn.json", "--inventory", "tiles/inventory.csv", "--manifest", "data/manifest.json",
         "--out", "cnn_scores.csv"],
        ["eval", "--scores", "svm_scores.csv", "cnn_scores.csv", "--out", "report"],
    ]
    for step in steps:
        assert run(step[:1] + g + step[1:]) == 0, step
    test_slide = next(r.split(",")[1] for r in (wd / "svm_scores.csv").read_text().splitlines()[1:])
    assert run(["heatmap", *g, "--scores", "svm_scores.csv", "--manifest", "data/manifest.json",
                "--slide-id", test_slide, "--out", "heat.png", "--field", "heat.f32"]) == 0
    return {str(p.relative_to(wd)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(wd.rglob("*")) if p.is_file() and "logs" not in p.parts}


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    wd = tmp_path_factory.mktemp("cli_a")
    return wd, pipeline(wd)


def test_full_pipeline(pipeline_run):
    wd, digests = pipeline_run
    for f in ("data/manifest.json", "tiles/inventory.csv", "svm.json", "cnn.json", "report/report.json",
              "report/report.csv", "heat.png", "heat.f32", "heat.f32.json"):
        assert f in digests
    doc = json.loads((wd / "report" / "report.json").read_text())
    assert [m["model"] for m in doc["models"]] == ["GLCM+SVM", "CNN"]
    assert {"FP@0.05", "FP@0.1", "FP@0.5", "auc"} <= set(doc["models"][0])


def test_run_log(pipeline_run):
    wd, digests = pipeline_run
    log = json.loads((wd / "logs" / "train-svm.runlog.json").read_text())
    assert log["command"] == "train-svm" and log["exit_code"] == 0 and log["seed"] == 1
    assert {"numpy", "python", "lungcad"} <= set(log["versions"])
    assert log["wall_time_s"] >= 0
    (path, digest), = log["outputs"].items()
    assert path.endswith("svm.json") and digest == digests["svm.json"]


def test_deterministic_and_thread_independent(pipeline_run, tmp_path):
    _, digests = pipeline_run
    assert pipeline(tmp_path / "b", threads=3) == digests


def test_synth(tmp_path):
    assert run(["synth", "--workdir", str(tmp_path), "--slides", "2", "--size", "648x648", "--seed", "7",
                "--out", "d"]) == 0
    assert (tmp_path / "d" / "manifest.json").is_file()


def test_stride_zero(tmp_path, capsys):
    code = run(["tile", "--workdir", str(tmp_path), "--manifest", "m.json", "--out", "t", "--stride", "0"])
    assert code == 3
    err = capsys.readouterr().err.strip().splitlines()
    rec = json.loads(err[-1])
    assert rec["flag"] == "--stride" and "--stride" in rec["message"]
    assert json.loads((tmp_path / "logs" / "tile.runlog.json").read_text())["exit_code"] == 3


def test_unparsable_number(tmp_path, capsys):
    code = run(["tile", "--workdir", str(tmp_path), "--manifest", "m.json", "--out", "t", "--stride", "abc"])
    assert code == 3
    assert "--stride" in capsys.readouterr().err


def test_unknown_subcommand(capsys):
    assert run(["frobnicate"]) == 2
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["kind"] == "usage"


def test_missing_required(capsys):
    assert run(["eval"]) == 2


def test_runtime_failure(tmp_path, capsys):
    code = run(["tile", "--workdir", str(tmp_path), "--manifest", "missing.json", "--out", "t"])
    assert code == 1
    line = capsys.readouterr().err.strip().splitlines()[-1]
    assert json.loads(line)["kind"] == "runtime"


def test_threads_validated(tmp_path):
    assert run(["synth", "--workdir", str(tmp_path), "--threads", "0", "--out", "d"]) == 3


@pytest.mark.parametrize("command", sorted(COMMANDS))
def test_help_lists_defaults(command, capsys):
    assert run([command, "--help"]) == 0
    out = capsys.readouterr().out
    sub = next(a for a in build_parser()._actions if a.dest == "command").choices[command]
    for action in sub._actions:
        for opt in action.option_strings:
            if opt.startswith("--"):
                assert opt in out


def test_help_shows_training_defaults(capsys):
    run(["train-cnn", "--help"])
    out = capsys.readouterr().out
    for text in ("(default: 1e-05)", "(default: 0.0001)", "(default: 10)", "(default: 64)"):
        assert text in out
    run(["tile", "--help"])
    out = capsys.readouterr().out
    assert "(default: 256)" in out and "(default: 196)" in out
    run(["eval", "--help"])
    assert "(default: 0.05,0.1,0.5)" in capsys.readouterr().out


def test_grad_check_command(tmp_path, capsys):
    assert run(["grad-check", "--workdir", str(tmp_path), "--out", "g.json"]) == 0
    res = json.loads((tmp_path / "g.json").read_text())
    assert all(r["max"] < 1e-4 for r in res.values())


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "lungcad.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "lungcad" in proc.stdout
