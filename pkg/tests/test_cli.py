import csv
import json
from pathlib import Path

import pytest

from nmtscale import cli


def files_of(d: Path) -> dict:
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


@pytest.fixture(scope="session")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert cli.main(["synth", "toy", "--out", str(root / "toy"), "--pairs", "300"]) == 0
    assert cli.main(["synth", "calibrated", "--out", str(root / "cal"), "--pairs", "20000"]) == 0
    return root


def toy_args(data, *extra):
    return ["--corpus", str(data / "toy/corpus.tsv"), "--vocab", str(data / "toy/vocab.txt"),
            "--max-tokens", "64", "--num-layers", "2", "--warmup-steps", "20", "--lr-peak", "0.01",
            *extra]


def cal_args(data, *extra):
    return ["--corpus", str(data / "cal/corpus.tsv"), "--measurements", str(data / "cal/measurements.csv"), *extra]


def test_synth_outputs(data):
    assert (data / "toy/vocab.txt").read_text().splitlines()[0] == "<pad>"
    assert len((data / "cal/corpus.tsv").read_text().splitlines()) == 20000
    assert (data / "cal/measurements.csv").read_text().startswith("num_sentences,")


def test_train_outputs_and_determinism(data, tmp_path):
    args = toy_args(data, "--workers", "2", "--cumul", "2", "--steps", "15", "--seed", "1")
    assert cli.main(["train", *args, "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["train", *args, "--out", str(tmp_path / "b")]) == 0
    a, b = files_of(tmp_path / "a"), files_of(tmp_path / "b")
    assert set(a) == {"config.txt", "metrics.jsonl", "checkpoint.json", "summary.json"}
    assert a == b
    recs = [json.loads(line) for line in a["metrics.jsonl"].decode().splitlines()]
    assert [r["step"] for r in recs] == list(range(1, 16))
    assert {"step", "loss_per_token", "lr", "scale", "skipped", "tokens"} <= set(recs[0])
    assert recs[-1]["loss_per_token"] < recs[0]["loss_per_token"]


def test_echoed_config_reproduces(data, tmp_path):
    assert cli.main(["train", *toy_args(data, "--steps", "5", "--workers", "1", "--cumul", "2"),
                     "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["train", "--config", str(tmp_path / "a/config.txt"), "--out", str(tmp_path / "b")]) == 0
    assert files_of(tmp_path / "a") == files_of(tmp_path / "b")


def test_accumulation_equivalent_checkpoints(data, tmp_path):
    outs = []
    for w, c in [(4, 1), (1, 4), (2, 2)]:
        out = tmp_path / f"w{w}c{c}"
        assert cli.main(["train", *toy_args(data, "--workers", str(w), "--cumul", str(c), "--steps", "10"),
                         "--out", str(out)]) == 0
        outs.append((out / "checkpoint.json").read_bytes())
    assert outs[0] == outs[1] == outs[2]


def test_fp16_train_records_scale(data, tmp_path):
    assert cli.main(["train", *toy_args(data, "--fp16", "true", "--workers", "1", "--cumul", "2", "--steps", "4",
                                        "--init-scale", "256"), "--out", str(tmp_path)]) == 0
    recs = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert all(r["scale"] == 256.0 for r in recs)
    assert json.loads((tmp_path / "summary.json").read_text())["final_scale"] == 256.0


def rows_of(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def test_simulate_report(data, tmp_path, capsys):
    rc = cli.main(["simulate", *cal_args(data, "--grid-workers", "1,8", "--grid-cumul", "1,16", "--steps", "100"),
                   "--out", str(tmp_path)])
    assert rc == 0
    assert capsys.readouterr().out == (tmp_path / "report.csv").read_text()
    rows = {r["config"]: r for r in rows_of(tmp_path / "report.csv")}
    assert len(rows) == 8
    key = "cumul={},overlap={},policy=token_budget,workers={}"
    assert float(rows[key.format(16, True, 8)]["idle_fraction"]) < float(rows[key.format(1, True, 8)]["idle_fraction"])
    for c in (1, 16):
        assert float(rows[key.format(c, True, 1)]["idle_fraction"]) == 0.0
        for w in (1, 8):
            assert float(rows[key.format(c, True, w)]["wall_time"]) <= float(rows[key.format(c, False, w)]["wall_time"])
    traces = sorted(p.name for p in (tmp_path / "traces").iterdir())
    assert "token_budget_W8_c16_overlap-on.jsonl" in traces and len(traces) == 8


def test_simulate_needs_timing_inputs(data, tmp_path):
    assert cli.main(["simulate", "--corpus", str(data / "cal/corpus.tsv"), "--out", str(tmp_path)]) == 1
    assert cli.main(["simulate", *cal_args(data), "--measurements", str(tmp_path / "none.csv"),
                     "--out", str(tmp_path)]) == 2


def test_batch_stats(data, tmp_path):
    assert cli.main(["batch-stats", *cal_args(data), "--out", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert set(summary) == {"token_budget", "shape", "time_balanced"}
    assert summary["time_balanced"]["cv"] < summary["token_budget"]["cv"]
    hist = rows_of(tmp_path / "histogram_token_budget.csv")
    assert list(hist[0]) == ["bin_low", "bin_high", "count"]
    assert sum(int(r["count"]) for r in hist) == summary["token_budget"]["count"]


def test_filter_and_score(data, tmp_path, capsys):
    ck = tmp_path / "model"
    assert cli.main(["train", *toy_args(data, "--steps", "3", "--workers", "1", "--cumul", "1"),
                     "--out", str(ck)]) == 0
    capsys.readouterr()
    out = tmp_path / "f"
    assert cli.main(["filter", "--corpus", str(data / "toy/corpus.tsv"), "--vocab", str(data / "toy/vocab.txt"),
                     "--score-checkpoint", str(ck / "checkpoint.json"), "--top-k", "5", "--out", str(out)]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats == json.loads((out / "filter_stats.json").read_text())
    assert stats["input"] == 300 and stats["kept"] == len((out / "filtered.tsv").read_text().splitlines())
    assert len(rows_of(out / "scores.csv")) == stats["kept"]
    assert len((out / "selected.tsv").read_text().splitlines()) == 5


def test_mix(data, tmp_path, capsys):
    corpus = str(data / "toy/corpus.tsv")
    args = ["mix", "--clean-corpus", corpus, "--noisy-corpus", corpus, "--mix-ratio", "1:4", "--n-samples", "20000"]
    assert cli.main([*args, "--out", str(tmp_path / "a")]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["clean"] + stats["noisy"] == 20000
    assert abs(stats["clean_fraction"] - 0.2) < 0.015
    assert cli.main([*args, "--out", str(tmp_path / "b")]) == 0
    assert files_of(tmp_path / "a") == files_of(tmp_path / "b")
    assert cli.main([*args[:-4], "--mix-ratio", "1:0", "--out", str(tmp_path / "c")]) == 1


def test_lr_schedule(tmp_path, capsys):
    assert cli.main(["lr-schedule", "--steps", "4000", "--out", str(tmp_path)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "step,lr" and len(lines) == 4001
    assert lines[-1] == "4000,0.0005"
    assert cli.main(["lr-schedule", "--steps", "2", "--lr-2x", "true", "--out", str(tmp_path)]) == 0
    assert capsys.readouterr().out.splitlines()[2] == "2,5e-07"


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["train", "--workers", "0"], ["train", "--bogus", "1"],
                                  ["train", "--set", "nokey"], ["train", "--set", "bogus=1"]])
def test_usage_errors(argv, tmp_path):
    assert cli.main(argv + (["--out", str(tmp_path)] if argv[:1] == ["train"] else [])) == 1


def test_data_errors(data, tmp_path):
    bad = tmp_path / "bad.tsv"
    bad.write_text("just one side\n")
    assert cli.main(["train", "--corpus", str(bad), "--vocab", str(data / "toy/vocab.txt"),
                     "--out", str(tmp_path)]) == 2
    assert cli.main(["filter", "--corpus", str(tmp_path / "missing.tsv"), "--out", str(tmp_path)]) == 2


def test_invariant_violation_exit_code(data, tmp_path, monkeypatch):
    real = cli.make_batches

    def lossy(*a, **kw):
        return real(*a, **kw)[1:]

    monkeypatch.setattr(cli, "make_batches", lossy)
    assert cli.main(["batch-stats", *cal_args(data), "--out", str(tmp_path)]) == 3


def test_help_exits_cleanly(capsys):
    assert cli.main(["--help"]) == 0
    assert "train" in capsys.readouterr().out
