import csv
import io

import pytest

from hctx.cli import build_parser, main


def run(capsys, *argv):
    code = main(list(argv))
    return code, capsys.readouterr()


def test_help_lists_subcommands(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    out = capsys.readouterr().out
    for cmd in ("train", "eval", "verify", "bench"):
        assert cmd in out


def test_train_flags_parse():
    a = build_parser().parse_args([
        "train", "--d-model", "32", "--heads", "2", "--layers", "1", "--chunk-size", "8",
        "--memory-slots", "4", "--write-policy", "gated_fifo", "--disable-path", "full",
        "--disable-path", "mem", "--rope-spread", "4", "--task", "copy", "--steps", "5", "--batch", "2",
        "--lr", "1e-3", "--warmup", "2", "--clip", "0.5", "--seed", "3", "--out", "x", "--precision", "f64"])
    assert a.disable_path == ["full", "mem"] and a.write_policy == "gated_fifo" and a.precision == "f64"
    assert a.window is None and not a.bptt


def test_window_flags_parse():
    a = build_parser().parse_args(["train", "--window", "32", "--bptt", "--out", "x"])
    assert a.window == 32 and a.bptt


def test_train_then_eval(tmp_path, capsys):
    out = tmp_path / "run"
    code, cap = run(capsys, "train", "--vocab", "32", "--d-model", "16", "--heads", "2", "--layers", "1",
                    "--chunk-size", "8", "--memory-slots", "4", "--seq-len", "40", "--gap-chunks", "2",
                    "--steps", "3", "--batch", "2", "--warmup", "1", "--eval-samples", "8",
                    "--max-positions", "64", "--out", str(out))
    assert code == 0
    row = next(csv.DictReader(io.StringIO(cap.out)))
    assert set(row) >= {"accuracy", "loss", "lambda3_l0"}
    for f in ("metrics.csv", "checkpoint.hctx", "training_curves.png", "lambdas.png"):
        assert (out / f).stat().st_size > 0

    code, cap = run(capsys, "eval", str(out / "checkpoint.hctx"), "--n-samples", "8")
    assert code == 0
    row = next(csv.DictReader(io.StringIO(cap.out)))
    assert row["task"] == "kv_recall" and int(row["n_scored"]) == 8


def test_verify_identities(capsys):
    code, cap = run(capsys, "verify", "--criteria", "2", "4", "--seeds", "2")
    assert code == 0
    assert "[FAIL]" not in cap.out and "checks passed" in cap.out


def test_bench_writes_csv_and_figure(tmp_path, capsys):
    code, cap = run(capsys, "bench", "--lengths", "64", "128", "--chunk-size", "16", "--repeats", "1",
                    "--out", str(tmp_path))
    assert code in (0, 1)  # tiny lengths are too noisy to pin the scaling verdict
    assert cap.out.startswith("mode,seq_len,median_s")
    assert (tmp_path / "bench.csv").exists() and (tmp_path / "bench_scaling.png").stat().st_size > 0


def test_bad_config_reports_error(tmp_path, capsys):
    code, cap = run(capsys, "train", "--d-model", "30", "--heads", "4", "--steps", "1", "--out", str(tmp_path))
    assert code == 2 and "error" in cap.err
