import csv
import json
import shutil
import subprocess
import sys
import time
from pathlib import Path

import pytest

from coin import cli
from coin.trainer import _Trainer

ROOT = Path(__file__).resolve().parents[1]
TINY = ROOT / "configs" / "tiny.ini"
COMMANDS = ["gen-data", "train", "eval", "sweep", "report"]


def run(*argv):
    return subprocess.run([sys.executable, "-m", "coin.cli", *map(str, argv)], capture_output=True, text=True)


@pytest.mark.parametrize("command", COMMANDS)
def test_help_exits_zero(command):
    res = run(command, "--help")
    assert res.returncode == 0 and "usage:" in res.stdout


def test_console_script_installed():
    exe = shutil.which("coin")
    assert exe is not None
    assert subprocess.run([exe, "--help"], capture_output=True).returncode == 0


@pytest.mark.parametrize("command", COMMANDS)
def test_unknown_flag_is_usage_error(command):
    res = run(command, "--frobnicate")
    assert res.returncode == 1
    assert "--frobnicate" in res.stderr


def test_missing_required_method_is_usage_error():
    res = run("train")
    assert res.returncode == 1 and "--method" in res.stderr


def test_bad_sweep_method_is_usage_error(tmp_path):
    res = run("sweep", "--methods", "coin,ppo", "--out", tmp_path)
    assert res.returncode == 1 and "ppo" in res.stderr


def test_missing_checkpoint_is_usage_error(tmp_path):
    assert cli.main(["eval", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 1


def test_tiny_pipeline_end_to_end(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    start = time.perf_counter()
    data_dir = tmp_path / "data"
    assert cli.main(["gen-data", "--config", str(TINY), "--out", str(data_dir)]) == 0
    traces = data_dir / "traces.csv"
    assert traces.exists()
    train_dir = tmp_path / "train"
    assert cli.main(["train", "--config", str(TINY), "--data", str(traces), "--method", "coin",
                     "--out", str(train_dir)]) == 0
    assert (train_dir / "coin" / "seed0" / "policy.json").exists()
    capsys.readouterr()
    assert cli.main(["eval", "--config", str(TINY), "--data", str(traces), str(train_dir)]) == 0
    text = capsys.readouterr().out
    body = [line for line in text.splitlines()[2:] if line.strip()]
    assert len(body) == 1 and body[0].startswith("coin")
    # output root honoured when --out is absent
    made = list((tmp_path / "root").iterdir())
    assert len(made) == 1 and made[0].name.startswith("eval-")
    assert (made[0] / "report.csv").exists() and (made[0] / "manifest.json").exists()
    assert time.perf_counter() - start < 60


def test_manifest_and_exact_rerun(tmp_path):
    first = tmp_path / "a"
    assert cli.main(["train", "--config", str(TINY), "--method", "bc", "--seeds", "3,4", "--epochs", "3",
                     "--out", str(first)]) == 0
    manifest = json.loads((first / "manifest.json").read_text())
    assert manifest["seeds"] == [3, 4] and manifest["status"] == "ok"
    assert manifest["resolved_config"]["train"]["epochs"] == 3
    assert (first / "config.ini").exists()
    second = tmp_path / "b"
    assert cli.main(["train", "--config", str(first / "config.ini"), "--method", "bc", "--seeds", "3,4",
                     "--out", str(second)]) == 0
    for s in (3, 4):
        a = (first / "bc" / f"seed{s}" / "log.csv").read_bytes()
        assert a == (second / "bc" / f"seed{s}" / "log.csv").read_bytes()
    assert (first / "config.ini").read_text() == (second / "config.ini").read_text()


def test_inputs_not_mutated(tmp_path):
    cfg = tmp_path / "in.ini"
    shutil.copy(TINY, cfg)
    assert cli.main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
    traces = tmp_path / "d" / "traces.csv"
    before = (cfg.read_bytes(), traces.read_bytes())
    assert cli.main(["train", "--config", str(cfg), "--data", str(traces), "--method", "bc",
                     "--epochs", "2", "--out", str(tmp_path / "t")]) == 0
    assert (cfg.read_bytes(), traces.read_bytes()) == before


def test_training_abort_exits_two(tmp_path, monkeypatch):
    def boom(self, *a, **k):
        raise FloatingPointError("non-finite policy loss")

    monkeypatch.setattr(_Trainer, "_policy_update", boom)
    out = tmp_path / "t"
    assert cli.main(["train", "--config", str(TINY), "--method", "coin", "--out", str(out)]) == 2
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "aborted"
    runs = json.loads((out / "runs.json").read_text())
    assert runs[0]["checkpoint"] and Path(runs[0]["checkpoint"]).exists()


def test_invalid_config_exits_two(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nepochs = 0\n")
    assert cli.main(["train", "--config", str(bad), "--method", "bc", "--out", str(tmp_path / "o")]) == 2


def test_sweep_and_report(tmp_path, capsys):
    out = tmp_path / "s"
    assert cli.main(["sweep", "--config", str(TINY), "--methods", "coin,bc", "--g-train", "0.1,0.3",
                     "--seeds", "0,1", "--epochs", "2", "--episodes", "3", "--out", str(out)]) == 0
    rows = list(csv.reader((out / "report.csv").read_text().splitlines()))[1:]
    assert sorted(r[0] for r in rows) == sorted(
        ["coin[g=0.1,delta=0.05]", "coin[g=0.3,delta=0.05]", "bc"])
    capsys.readouterr()
    rep = tmp_path / "r"
    assert cli.main(["report", str(out), "--out", str(rep)]) == 0
    conv = (rep / "convergence.csv").read_text().splitlines()
    assert conv[0] == "method,runs,tail_mse,tail_metric" and len(conv) == 4
    assert all(line.split(",")[1] == "2" for line in conv[1:])
    assert len(list(rep.glob("*_curve.csv"))) == 3


def test_airline_train_and_eval(tmp_path, capsys):
    out = tmp_path / "a"
    assert cli.main(["train", "--env", "airline", "--config", str(TINY), "--method", "bc_hard",
                     "--epochs", "2", "--out", str(out)]) == 0
    capsys.readouterr()
    assert cli.main(["eval", "--env", "airline", "--config", str(TINY), "--g", "0.02",
                     str(out), "--out", str(tmp_path / "e")]) == 0
    assert "Ticket-Cost-R" in capsys.readouterr().out


@pytest.mark.parametrize("name,kind", [("tiny.ini", "cloud"), ("benchmark_cloud.ini", "cloud"),
                                       ("airline.ini", "airline")])
def test_shipped_configs_resolve(name, kind):
    sections = cli.load_sections(ROOT / "configs" / name)
    assert cli.snapshot(kind, sections)["train"]
    assert cli.make_env(kind, sections).kind == kind
