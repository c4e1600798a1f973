import json
import subprocess
import sys
from pathlib import Path

import pytest
import yaml

from noise2map.cli import build_parser, main, resolve_seed
from noise2map.config import ExperimentConfig
from noise2map.exceptions import ConfigError

FIXTURES = Path(__file__).resolve().parents[1] / "fixtures"


def tree(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    ws = tmp_path_factory.mktemp("cli")
    for task in ("ss", "cd"):
        assert main(["synth", "--seed", "3", "--n", "10", "--size", "16", "--task", task,
                     "--n-val", "2", "--n-test", "2", "--out", str(ws / task)]) == 0
    cfg = {
        "task": "ss", "out": str(ws / "runs"),
        "train": {"epochs": 1, "batch_size": 3, "grad_accum": 1, "lr": 1e-3},
        "pretrain": {"epochs": 1, "batch_size": 3},
        "loss": {"class_weights": [1, 3]},
        "data": {"ss_root": str(ws / "ss"), "cd_root": str(ws / "cd")},
    }
    (ws / "exp.yaml").write_text(yaml.safe_dump(cfg))
    return ws


def test_synth_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--seed", "1", "--n", "4", "--size", "16", "--out", str(tmp_path / name)]) == 0
    assert tree(tmp_path / "a") == tree(tmp_path / "b")


def test_train_eval_sweep(workspace, capsys):
    out = workspace / "ss_run"
    assert main(["train", "--config", str(workspace / "exp.yaml"), "--task", "ss", "--out", str(out)]) == 0
    assert (out / "last.pt").exists() and (out / "best.pt").exists()
    assert (out / "train_log.tsv").read_text().startswith("step\tepoch\ttask\tloss\tlr\tt_mean\n")

    report = workspace / "report.json"
    assert main(["eval", "--config", str(workspace / "exp.yaml"), "--checkpoint", str(out / "best.pt"),
                 "--split", "test", "--out", str(report)]) == 0
    d = json.loads(report.read_text())
    assert d["task"] == "ss" and d["schedule"]["inference_timestep"] == 1000 and d["seed"] == 0
    assert list(d) == ["task", "dataset", "per_class", "mean_f1", "mean_iou", "param_count", "schedule", "seed"]

    export = workspace / "sweep"
    assert main(["sweep", "--config", str(workspace / "exp.yaml"), "--checkpoint", str(out / "best.pt"),
                 "--timesteps", "0,500,1000", "--export-dir", str(export)]) == 0
    assert (export / "f1_vs_timestep.csv").read_text().count("\n") == 4
    assert len(list(export.glob("*_grid.png"))) == 2
    assert len(list((export / "masks").glob("*_t500.png"))) == 2


def test_multitask_and_pretrain(workspace):
    cfg = str(workspace / "exp.yaml")
    assert main(["train", "--config", cfg, "--task", "mt", "--out", str(workspace / "mt")]) == 0
    tasks = {l.split("\t")[2] for l in (workspace / "mt" / "train_log.tsv").read_text().splitlines()[1:]}
    assert tasks == {"cd", "ss", "mt"}
    assert main(["pretrain", "--config", cfg, "--out", str(workspace / "pt")]) == 0
    assert main(["train", "--config", cfg, "--task", "cd", "--from-checkpoint", str(workspace / "pt" / "last.pt"),
                 "--out", str(workspace / "ft")]) == 0


def test_resume(workspace):
    cfg = str(workspace / "exp.yaml")
    run = workspace / "resume"
    assert main(["train", "--config", cfg, "--out", str(run)]) == 0
    assert main(["train", "--config", cfg, "--out", str(run), "--resume", str(run / "last.pt")]) == 0


def test_rank_prints_noise2map_first(capsys, tmp_path):
    out = tmp_path / "rank.json"
    assert main(["rank", str(FIXTURES / "table1_ss.csv"), "--json", str(out)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[1].split()[:2] == ["1", "Noise2Map-SS"]
    ranking = json.loads(out.read_text())
    assert ranking[0]["model"] == "Noise2Map-SS" and ranking[-1]["model"] == "DPT"


def test_errors_are_one_line(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("task: ss\ncolour: red\ntrain: {epochs: 1, momentum: 0.9}\nloss: {gamma: 2}\n")
    assert main(["train", "--config", str(bad)]) != 0
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error[config]:")
    for key in ("colour", "train.momentum", "loss.gamma"):
        assert key in err[0]
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.pt"), "--config", str(workspace / "exp.yaml")]) != 0
    assert capsys.readouterr().err.startswith("error[")


def test_help_lists_defaults():
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices
    assert set(sub) == {"synth", "pretrain", "train", "eval", "sweep", "rank"}
    text = sub["synth"].format_help()
    for flag in ("--seed", "--n ", "--size", "--change-fraction", "--out"):
        assert flag in text
    assert "(default: 64)" in text
    for name, p in sub.items():
        for action in p._actions:
            if action.option_strings and action.dest != "help":
                assert action.help, (name, action.dest)


def test_seed_precedence(monkeypatch):
    monkeypatch.delenv("NOISE2MAP_SEED", raising=False)
    assert resolve_seed(None) == 0
    assert resolve_seed(None, 5) == 5
    monkeypatch.setenv("NOISE2MAP_SEED", "9")
    assert resolve_seed(None, 5) == 9
    assert resolve_seed(2, 5) == 2
    monkeypatch.setenv("NOISE2MAP_SEED", "x")
    with pytest.raises(ConfigError):
        resolve_seed(None)


def test_config_round_trip(tmp_path):
    cfg = ExperimentConfig.from_dict({"task": "mt", "loss": {"lambda_cd": 0.7, "lambda_ss": 1.3}})
    cfg.dump(tmp_path / "c.yaml")
    back = ExperimentConfig.load(tmp_path / "c.yaml")
    assert back == cfg
    assert back.multitask_weights().lambda_cd == 0.7
    assert back.unet_config().tasks == ("cd", "ss")
    assert back.train_config().lr == 1e-4 and back.train_config().grad_accum == 2
    assert back.schedule_config("cd").T == 1000


def test_config_value_errors():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"task": "xx"})
    with pytest.raises(ConfigError, match="train"):
        ExperimentConfig.from_dict({"train": {"grad_accum": 0}})


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "noise2map", "rank", str(FIXTURES / "table1_cd.csv"),
                           "--json", "/dev/null"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout.splitlines()[1].split()[1] == "Noise2Map-CD"
