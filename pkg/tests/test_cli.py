import argparse
import csv
import subprocess
import sys

import pytest

from drama import cli, harness


def test_parse_list():
    assert cli.parse_list("1,2,4") == (1.0, 2.0, 4.0)
    assert cli.parse_list("0-3,7", int) == (0, 1, 2, 3, 7)
    with pytest.raises(argparse.ArgumentTypeError):
        cli.parse_list(",")


def test_train_then_eval(tmp_path, capsys):
    out = tmp_path / "run"
    rc = cli.main(["train", "--episodes", "1", "--warmup", "64", "--lambda", "2", "--seeds", "3", "--out", str(out)])
    assert rc == 0
    ckpt = out / "checkpoint.json"
    assert ckpt.exists() and (out / "learning_curve.csv").exists()
    model = harness.load_model(ckpt)
    assert model.train_config.lambdas == (2.0,) and model.train_config.episodes == 1

    rc = cli.main([
        "eval", "--checkpoint", str(ckpt), "--policy", "drama,spf", "--lambda", "1",
        "--seeds", "0-1", "--episodes", "64", "--out", str(out), "--trace",
    ])
    assert rc == 0
    rows = list(csv.DictReader((out / "load_sweep.csv").open()))
    assert len(rows) == 4 and {r["policy"] for r in rows} == {"drama", "spf"}
    assert (out / "load_sweep_summary.csv").exists()
    assert (out / "trace.txt").read_text().strip()
    assert "delivery=" in capsys.readouterr().out


def test_eval_overhead_variant_flags(tmp_path):
    out = tmp_path / "o"
    cli.main(["train", "--episodes", "1", "--warmup", "10000", "--out", str(out)])
    rc = cli.main([
        "eval", "--checkpoint", str(out / "checkpoint.json"), "--policy", "drama", "--quantize-bits", "1",
        "--msg-interval", "10", "--seeds", "0", "--episodes", "16", "--out", str(out),
    ])
    assert rc == 0
    (row,) = list(csv.DictReader((out / "load_sweep.csv").open()))[:1]
    assert float(row["overhead_bits"]) == 0.8


@pytest.mark.parametrize(
    "argv, message",
    [
        (["eval", "--policy", "drama", "--episodes", "4"], "needs a checkpoint"),
        (["eval", "--checkpoint", "/nonexistent/c.json"], "not found"),
        (["eval", "--topology", "/nonexistent.topo"], "No such file"),
    ],
)
def test_errors_exit_with_status_one(tmp_path, capsys, argv, message):
    assert cli.main(argv + ["--out", str(tmp_path)]) == 1
    assert message in capsys.readouterr().err


def test_bad_topology_file_reports_line(tmp_path, capsys):
    bad = tmp_path / "bad.topo"
    bad.write_text("[routers]\n0-3\n[links]\n0 1\n0 9\n")
    assert cli.main(["eval", "--topology", str(bad), "--out", str(tmp_path)]) == 1
    assert "drama: error:" in capsys.readouterr().err


def test_structural_override_must_match_checkpoint(tmp_path, capsys):
    out = tmp_path / "s"
    cli.main(["train", "--episodes", "1", "--warmup", "10000", "--out", str(out)])
    rc = cli.main(["eval", "--checkpoint", str(out / "checkpoint.json"), "--policy", "drama", "--comm-rounds", "1", "--out", str(out)])
    assert rc == 1 and "ecl2" in capsys.readouterr().err


def test_module_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "drama", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "train" in res.stdout and "eval" in res.stdout
