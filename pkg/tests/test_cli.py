import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from boxcorr import cli
from boxcorr import tensor as T
from boxcorr.ablation import parse_axis, parse_grid, run_ablation
from boxcorr.augmentation import ConfigError
from boxcorr.config import dump_config
from boxcorr.verify import GradCase, run_suite

from conftest import TINY, tiny_config


def tiny_args():
    return [arg for k, v in TINY.items() for arg in ("--set", f"{k}={json.dumps(v)}")]


def read_summary(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- verify


def test_verify_geometry_clean(capsys):
    assert cli.main(["verify", "geometry"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["suite"] == "geometry" and report["failures"] == [] and report["checks"]


def test_verify_losses_writes_report(tmp_path, capsys):
    out = tmp_path / "v" / "losses.json"
    assert cli.main(["verify", "losses", "--out", str(out)]) == 0
    assert json.loads(out.read_text())["failures"] == []


def test_grad_suite_reports_a_corrupted_derivative():
    def broken_exp(x):
        return T._result(np.exp(x.data), (x,), lambda g: (g * 2.0 * np.exp(x.data),), "broken_exp")

    case = GradCase("broken_exp", lambda x: T.sum_(broken_exp(x)), lambda rng: [rng.normal(size=(3,))])
    report = run_suite("grad", grad_cases_override=[case])
    assert report["failures"] == ["grad:broken_exp"]
    assert not report["checks"][0]["passed"]


def test_verify_exit_code_follows_failures(monkeypatch, capsys):
    import boxcorr.verify as v

    monkeypatch.setattr(v, "run_suite", lambda suite: {"suite": suite, "checks": [], "failures": ["grad:x"], "seconds": 0.0})
    assert cli.main(["verify", "all"]) == cli.EXIT_FAILURES
    monkeypatch.setattr(v, "run_suite", lambda suite: {"suite": suite, "checks": [], "failures": [], "seconds": 0.0})
    assert cli.main(["verify", "all"]) == cli.EXIT_OK


def test_verify_rejects_unknown_suite():
    with pytest.raises(SystemExit):
        cli.main(["verify", "nonsense"])


# ---------------------------------------------------------------- train


def test_train_tiny_run(tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["train", "--out", str(out), "--quiet", *tiny_args()]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert set(stats) >= {"retrieval_top1", "min_std", "mean_cos"}
    for name in ("config.json", "metrics.csv", "report.json", "training_curves.png", "checkpoints/final.ckpt"):
        assert (out / name).exists(), name
    assert len((out / "metrics.csv").read_text().splitlines()) > 1
    # completed runs are immutable
    assert cli.main(["train", "--out", str(out), "--quiet", *tiny_args()]) == cli.EXIT_USAGE


def test_train_from_config_file_reproduces(tmp_path, capsys):
    dump_config(tiny_config(), tmp_path / "cfg.json")
    for name in ("a", "b"):
        assert cli.main(["train", "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / name), "--quiet"]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert (tmp_path / "a" / "config.json").read_bytes() == (tmp_path / "cfg.json").read_bytes()


def test_train_rejects_non_overlapping_views(tmp_path, capsys):
    code = cli.main(["train", "--out", str(tmp_path / "x"), "--set", "s_view=0.4"])
    err = capsys.readouterr().err
    assert code == cli.EXIT_USAGE
    assert "s_view" in err and "0.5" in err
    assert not (tmp_path / "x").exists()


def test_train_rejects_unknown_key(tmp_path, capsys):
    assert cli.main(["train", "--out", str(tmp_path / "x"), "--set", "warp_factor=9"]) == cli.EXIT_USAGE
    assert "warp_factor" in capsys.readouterr().err


def test_train_seed_flag_changes_the_run(tmp_path, capsys):
    for seed in (0, 1):
        assert cli.main(["train", "--out", str(tmp_path / str(seed)), "--seed", str(seed), "--quiet", *tiny_args()]) == 0
    assert (tmp_path / "0" / "metrics.csv").read_bytes() != (tmp_path / "1" / "metrics.csv").read_bytes()


def test_abort_exit_code(tmp_path, monkeypatch, capsys):
    import boxcorr.training as tr
    from boxcorr.tensor import NonFiniteError

    def poisoned(*args, **kwargs):
        raise NonFiniteError("exp: non-finite output")

    monkeypatch.setattr(tr, "forward_losses", poisoned)
    assert cli.main(["train", "--out", str(tmp_path / "r"), "--quiet", *tiny_args()]) == cli.EXIT_ABORTED


# ---------------------------------------------------------------- ablate


def test_parse_grid_shapes():
    points = parse_grid({"K": [4, 8], "lambda": {"values": [0.01], "set": {"aux_mode": "prediction"}}})
    assert [(p.key, p.value) for p in points] == [("K", 4), ("K", 8), ("lambda", 0.01)]
    assert points[2].overrides == {"aux_mode": "prediction", "lambda": 0.01}
    assert points[0].dirname(0) == "00_K_4"
    assert parse_axis("K=4,8,16") == ("K", [4, 8, 16])
    assert parse_axis("roi=ra1,avg") == ("roi", ["ra1", "avg"])
    for bad in ({}, {"K": []}):
        with pytest.raises(ConfigError):
            parse_grid(bad)


def test_ablate_two_points_and_idempotent_rerun(tmp_path, capsys):
    out = tmp_path / "abl"
    args = ["ablate", "--grid", '{"K": [4, 8]}', "--out", str(out), "--quiet", *tiny_args()]
    assert cli.main(args) == 0
    dirs = sorted(p.name for p in out.iterdir() if p.is_dir())
    assert dirs == ["00_K_4", "01_K_8"]
    rows = read_summary(out / "summary.csv")
    assert len(rows) == 2 and [r["reused"] for r in rows] == ["0", "0"]
    assert [r["chance"] for r in rows] == ["0.25", "0.125"]
    assert (out / "ablation_summary.png").exists()
    stamp = (out / "00_K_4" / "checkpoints" / "final.ckpt").stat().st_mtime_ns
    assert cli.main(args) == 0
    again = read_summary(out / "summary.csv")
    assert [r["reused"] for r in again] == ["1", "1"]
    assert [r["retrieval_top1"] for r in again] == [r["retrieval_top1"] for r in rows]
    assert (out / "00_K_4" / "checkpoints" / "final.ckpt").stat().st_mtime_ns == stamp


def test_ablate_empty_grid_rejected(tmp_path, capsys):
    assert cli.main(["ablate", "--grid", "{}", "--out", str(tmp_path / "e")]) == cli.EXIT_USAGE
    assert "grid" in capsys.readouterr().err


def test_ablate_axis_flags_and_parallel_processes(tmp_path):
    out = tmp_path / "par"
    rows = run_ablation(tiny_config(), parse_grid({"V": [2, 3]}), out, parallel=2)
    assert [r["faults"] for r in rows] == [0, 0]
    serial = run_ablation(tiny_config(), parse_grid({"V": [2, 3]}), tmp_path / "ser")
    for a, b in zip(rows, serial):
        name = a["run_dir"]
        assert (out / name / "metrics.csv").read_bytes() == (tmp_path / "ser" / name / "metrics.csv").read_bytes()


# ---------------------------------------------------------------- eval


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("evalrun") / "run"
    from boxcorr.training import run_training

    run_training(tiny_config(), out)
    return out / "checkpoints" / "final.ckpt"


def test_eval_is_deterministic(trained, tmp_path, capsys):
    reports = []
    for name in ("a", "b"):
        assert cli.main(["eval", str(trained), "--seed", "7", "--out", str(tmp_path / name), "--quiet"]) == 0
        reports.append((tmp_path / name / "report.json").read_bytes())
        assert (tmp_path / name / "eval.png").exists()
    assert reports[0] == reports[1]
    assert json.loads(reports[0])["eval_seed"] == 7


def test_eval_default_output_location(trained, capsys):
    assert cli.main(["eval", str(trained), "--quiet"]) == 0
    assert (trained.parent.parent.parent / "run" / "eval-seed1" / "report.json").exists()


def test_eval_corrupted_checkpoint(trained, tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    raw = bytearray(trained.read_bytes())
    raw[0] = ord("[")
    bad.write_bytes(bytes(raw))
    assert cli.main(["eval", str(bad)]) == cli.EXIT_USAGE
    assert "byte offset" in capsys.readouterr().err


# ---------------------------------------------------------------- entry point


def test_module_entry_point_runs():
    res = subprocess.run([sys.executable, "-m", "boxcorr.cli", "verify", "losses"], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert json.loads(res.stdout)["failures"] == []
