import csv
import os
import subprocess
import sys

import pytest

from stmambasync import cli, duality
from stmambasync.duality import CheckResult

TINY = ["--nodes", "3", "--days", "2", "--d-embed", "2", "--d-adaptive", "2", "--d-state", "3",
        "--heads", "2", "--window", "4", "--horizon", "3", "--batch", "32"]


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_synth_writes_identical_files(tmp_path):
    for out in ("a", "b"):
        assert run("synth", "--nodes", 4, "--days", 14, "--seed", 1, "--out", tmp_path / out) == 0
    for name in ("data.csv", "data.meta"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@pytest.mark.parametrize("argv", [
    ["synth", "--nodes", "0"],
    ["train", "--lr", "-1"],
    ["train", "--patience", "0"],
    ["train", "--split", "6:2"],
    ["train", "--bogus"],
    ["frobnicate"],
    [],
])
def test_validation_errors_exit_1(argv, tmp_path, capsys):
    assert cli.main(argv + ["--out", str(tmp_path)] if argv else argv) == 1
    assert "error" in capsys.readouterr().err


def test_train_writes_reports(tmp_path):
    out = tmp_path / "run"
    assert run("train", *TINY, "--epochs", 2, "--out", out) == 0
    for name in ("config.txt", "best.ckpt", "last.ckpt", "epochs.csv", "timings.csv",
                 "metrics.csv", "loss.png", "per_step.png"):
        assert (out / name).stat().st_size > 0, name
    assert [r["epoch"] for r in rows(out / "epochs.csv")] == ["1", "2"]
    assert len(rows(out / "metrics.csv")) == 3
    config = (out / "config.txt").read_text()
    assert "d_state=3\n" in config and "seed=0\n" in config and "mape_floor=0.001\n" in config


def test_train_mamba_only_variant(tmp_path):
    assert run("train", *TINY, "--attn-layers", 0, "--mamba-layers", 1, "--epochs", 1,
               "--out", tmp_path) == 0


def test_config_file_with_flag_override(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# tiny run\nepochs = 3\nseed=4\nd-state=5\n")
    assert run("train", *TINY, "--config", cfg, "--epochs", 1, "--out", tmp_path / "o") == 0
    echoed = (tmp_path / "o" / "config.txt").read_text()
    assert "epochs=1\n" in echoed and "seed=4\n" in echoed and "d_state=3\n" in echoed
    cfg.write_text("nonsense_key=1\n")
    assert run("train", "--config", cfg, "--out", tmp_path / "p") == 1


def test_train_from_csv_and_eval(tmp_path):
    run("synth", "--nodes", 3, "--days", 2, "--out", tmp_path / "d")
    data = tmp_path / "d" / "data.csv"
    common = [*TINY, "--window", 12, "--horizon", 12]
    assert run("train", *common, "--data", data, "--epochs", 1, "--out", tmp_path / "r") == 0
    assert run("eval", "--checkpoint", tmp_path / "r" / "best.ckpt", "--data", data,
               "--out", tmp_path / "e") == 0
    table = rows(tmp_path / "e" / "per_step.csv")
    assert [r["step"] for r in table] == [str(k) for k in range(1, 13)]
    assert (tmp_path / "e" / "per_step.png").exists()


def test_train_rejects_bad_csv(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n3\n")
    assert run("train", "--data", bad, "--out", tmp_path / "o") == 1


def test_resume_continues_identically(tmp_path):
    assert run("train", *TINY, "--epochs", 3, "--seed", 2, "--out", tmp_path / "full") == 0
    assert run("train", *TINY, "--epochs", 2, "--seed", 2, "--out", tmp_path / "part") == 0
    assert run("train", *TINY, "--epochs", 3, "--seed", 2, "--out", tmp_path / "part",
               "--resume", tmp_path / "part" / "last.ckpt") == 0
    assert ((tmp_path / "full" / "epochs.csv").read_bytes()
            == (tmp_path / "part" / "epochs.csv").read_bytes())


def test_eval_missing_checkpoint_is_runtime_error(tmp_path):
    assert run("eval", "--checkpoint", tmp_path / "nope.ckpt", "--out", tmp_path) == 2
    assert run("bench", "--checkpoint", tmp_path / "nope.ckpt", "--out", tmp_path) == 2


def test_bench_counts_are_reproducible(tmp_path):
    args = ["bench", "--nodes", 5, "--d-embed", 4, "--repeats", 2, "--windows", 8]
    assert run(*args, "--out", tmp_path / "a") == 0
    assert run(*args, "--out", tmp_path / "b") == 0
    assert (tmp_path / "a" / "flops.csv").read_bytes() == (tmp_path / "b" / "flops.csv").read_bytes()
    stages = [r["stage"] for r in rows(tmp_path / "a" / "timings.csv")]
    assert stages == ["embedding", "attention", "mamba", "head", "total"]
    assert (tmp_path / "a" / "flops.png").exists()


def test_bench_from_checkpoint(tmp_path):
    run("train", *TINY, "--epochs", 1, "--out", tmp_path / "r")
    assert run("bench", "--checkpoint", tmp_path / "r" / "best.ckpt", "--repeats", 1,
               "--out", tmp_path / "b") == 0


def test_ablate_writes_table_and_figures(tmp_path):
    assert run("ablate", *TINY, "--epochs", 1, "--grid", "1,1;0,1", "--out", tmp_path) == 0
    assert len(rows(tmp_path / "ablation.csv")) == 2
    assert (tmp_path / "tradeoff.png").exists() and (tmp_path / "per_step.png").exists()
    assert run("ablate", "--grid", "1;x", "--out", tmp_path) == 1


def test_verify_exit_codes(tmp_path, monkeypatch, capsys):
    assert run("verify", "--instances", 10, "--out", tmp_path) == 0
    assert "FAIL" not in capsys.readouterr().out
    assert len(rows(tmp_path / "verify.csv")) > 10
    monkeypatch.setattr(duality, "run_suite", lambda *a: [CheckResult("broken", 1.0, 1e-8)])
    assert run("verify") == 3


def test_module_entry_point_respects_thread_cap(tmp_path):
    env = dict(os.environ, STMS_THREADS="2")
    proc = subprocess.run([sys.executable, "-m", "stmambasync", "synth", "--nodes", "2",
                           "--days", "1", "--out", str(tmp_path)],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "data.csv").exists()
