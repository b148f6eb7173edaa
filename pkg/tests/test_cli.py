"""CLI behavior: artifacts, exit codes, config file, thread env var."""

import json
import os
from pathlib import Path

import pytest

from pabdm.cli import (
    EXIT_DATA,
    EXIT_OK,
    EXIT_USAGE,
    main,
)


@pytest.fixture()
def corpus_dir(tmp_path):
    out = tmp_path / "corpus"
    rc = main(["gen-corpus", "--task", "brackets", "--count", "12", "--seed", "3",
               "--out", str(out)])
    assert rc == EXIT_OK
    return out


def corpus_path(corpus_dir) -> str:
    return str(corpus_dir / "corpus.jsonl")


def test_gen_corpus_writes_jsonl_and_records(corpus_dir):
    rows = [json.loads(l) for l in (corpus_dir / "corpus.jsonl").read_text().splitlines()]
    assert len(rows) == 12
    assert all(set(r) == {"prompt", "target"} for r in rows)
    config = json.loads((corpus_dir / "config.json").read_text())
    assert config["task"] == "brackets"
    assert config["seed"] == 3
    assert "created_unix" not in config  # timestamps live in the sidecar only
    meta = json.loads((corpus_dir / "meta.json").read_text())
    assert meta["command"] == "gen-corpus"
    assert "created_unix" in meta


def test_train_then_decode_roundtrip(tmp_path, corpus_dir):
    train_out = tmp_path / "train"
    rc = main(["train", "--task", "brackets", "--corpus", corpus_path(corpus_dir),
               "--objective", "full", "--steps", "8", "--batch-size", "4",
               "--block-size", "8", "--out", str(train_out)])
    assert rc == EXIT_OK
    assert (train_out / "model.ckpt").exists()
    assert (train_out / "history.csv").exists()
    assert (train_out / "training_curves.png").exists()

    dec_out = tmp_path / "dec"
    rc = main(["decode", "--model", str(train_out / "model.ckpt"), "--task", "brackets",
               "--corpus", corpus_path(corpus_dir), "--limit", "4", "--block-size", "8",
               "--max-len", "32", "--out", str(dec_out)])
    assert rc == EXIT_OK
    for name in ("results.csv", "summary.csv", "traces.jsonl", "commit_hist.png"):
        assert (dec_out / name).exists()
    lines = (dec_out / "results.csv").read_text().splitlines()
    assert len(lines) == 5  # header + 4 samples
    trace_rows = [json.loads(l) for l in (dec_out / "traces.jsonl").read_text().splitlines()]
    assert {r["sample"] for r in trace_rows} == {0, 1, 2, 3}


def test_ablate_and_sweep_render_figures(tmp_path, corpus_dir):
    abl = tmp_path / "abl"
    rc = main(["ablate", "--task", "brackets", "--corpus", corpus_path(corpus_dir),
               "--limit", "6", "--block-size", "8", "--max-len", "48",
               "--tau-infer", "0.9", "--out", str(abl)])
    assert rc == EXIT_OK
    body = (abl / "ablation.csv").read_text().splitlines()
    assert body[0].startswith("variant,")
    assert [l.split(",")[0] for l in body[1:]] == ["adaptive", "block", "no_reset", "no_cache"]
    assert (abl / "ablation.png").exists()

    sw = tmp_path / "sweep"
    rc = main(["sweep-threshold", "--task", "brackets", "--corpus", corpus_path(corpus_dir),
               "--limit", "6", "--block-size", "8", "--max-len", "48",
               "--taus", "0.5,0.9,0.99", "--out", str(sw)])
    assert rc == EXIT_OK
    assert (sw / "sweep.csv").read_text().count("\n") == 4
    assert (sw / "sweep.png").exists()


def test_simulate_outputs(tmp_path):
    out = tmp_path / "sim"
    rc = main(["simulate", "--scenario", "decay", "--count", "5", "--length", "16,24",
               "--block-size", "8", "--out", str(out)])
    assert rc == EXIT_OK
    for name in ("summary.csv", "traces.jsonl", "commit_hist.png"):
        assert (out / name).exists()


def test_reruns_are_byte_identical(tmp_path, corpus_dir):
    outs = []
    for tag in ("a", "b"):
        out = tmp_path / f"sim_{tag}"
        rc = main(["simulate", "--scenario", "decay_dips", "--count", "6",
                   "--length", "16,24", "--block-size", "8", "--seed", "7",
                   "--out", str(out)])
        assert rc == EXIT_OK
        outs.append(out)
    # config.json differs only in the out path; the data files must not
    for name in ("summary.csv", "traces.jsonl"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


# --- exit codes ---


def test_usage_errors_exit_1(tmp_path, capsys):
    assert main(["decode", "--task", "brackets"]) == EXIT_USAGE  # missing required
    assert main(["gen-corpus", "--task", "nope", "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["sweep-threshold", "--task", "brackets", "--corpus", "x",
                 "--taus", "1.5", "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["no-such-command"]) == EXIT_USAGE
    capsys.readouterr()


def test_missing_or_malformed_data_exits_2(tmp_path, corpus_dir, capsys):
    rc = main(["train", "--task", "brackets", "--corpus", str(tmp_path / "missing.jsonl"),
               "--steps", "1", "--out", str(tmp_path / "t")])
    assert rc == EXIT_DATA
    bad = tmp_path / "bad.jsonl"
    bad.write_text("not json\n")
    rc = main(["ablate", "--task", "brackets", "--corpus", str(bad),
               "--out", str(tmp_path / "a")])
    assert rc == EXIT_DATA
    garbage = tmp_path / "model.ckpt"
    garbage.write_bytes(b"nonsense")
    rc = main(["decode", "--model", str(garbage), "--task", "brackets",
               "--corpus", corpus_path(corpus_dir), "--out", str(tmp_path / "d")])
    assert rc == EXIT_DATA
    capsys.readouterr()


def test_internal_errors_exit_3(tmp_path, corpus_dir, monkeypatch, capsys):
    import pabdm.cli as cli

    def boom(*a, **k):
        raise RuntimeError("wires crossed")

    monkeypatch.setattr(cli, "generate_corpus", boom)
    rc = main(["gen-corpus", "--task", "brackets", "--out", str(tmp_path / "g")])
    assert rc == 3
    capsys.readouterr()


# --- config file and env ---


def test_config_file_supplies_defaults_flags_win(tmp_path, corpus_dir):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        "# corpus generation defaults\n"
        "task=brackets\n"
        "count=9\n"
        "seed=5\n"
    )
    out_a = tmp_path / "a"
    rc = main(["gen-corpus", "--config", str(cfg), "--out", str(out_a)])
    assert rc == EXIT_OK
    assert len((out_a / "corpus.jsonl").read_text().splitlines()) == 9

    out_b = tmp_path / "b"
    rc = main(["gen-corpus", "--config", str(cfg), "--count", "4", "--out", str(out_b)])
    assert rc == EXIT_OK
    assert len((out_b / "corpus.jsonl").read_text().splitlines()) == 4
    config = json.loads((out_b / "config.json").read_text())
    assert config["count"] == 4
    assert config["seed"] == 5  # still from the file


def test_config_file_errors_exit_2(tmp_path, capsys):
    assert main(["gen-corpus", "--task", "brackets", "--config",
                 str(tmp_path / "nope.cfg"), "--out", str(tmp_path / "o")]) == EXIT_DATA
    bad = tmp_path / "bad.cfg"
    bad.write_text("count 9\n")
    assert main(["gen-corpus", "--task", "brackets", "--config", str(bad),
                 "--out", str(tmp_path / "o")]) == EXIT_DATA
    unknown = tmp_path / "unknown.cfg"
    unknown.write_text("warp_factor=9\n")
    assert main(["gen-corpus", "--task", "brackets", "--config", str(unknown),
                 "--out", str(tmp_path / "o")]) == EXIT_DATA
    capsys.readouterr()


def test_thread_env_var(tmp_path, corpus_dir, monkeypatch, capsys):
    monkeypatch.setenv("PABDM_THREADS", "zebra")
    assert main(["simulate", "--count", "2", "--length", "8,12",
                 "--out", str(tmp_path / "s1")]) == EXIT_USAGE
    monkeypatch.setenv("PABDM_THREADS", "0")
    assert main(["simulate", "--count", "2", "--length", "8,12",
                 "--out", str(tmp_path / "s2")]) == EXIT_USAGE
    capsys.readouterr()

    monkeypatch.setenv("PABDM_THREADS", "3")
    solo_out = tmp_path / "solo"
    pool_out = tmp_path / "pool"
    monkeypatch.delenv("PABDM_THREADS")
    assert main(["simulate", "--count", "6", "--length", "16,24", "--seed", "2",
                 "--out", str(solo_out)]) == EXIT_OK
    monkeypatch.setenv("PABDM_THREADS", "3")
    assert main(["simulate", "--count", "6", "--length", "16,24", "--seed", "2",
                 "--out", str(pool_out)]) == EXIT_OK
    assert (solo_out / "summary.csv").read_bytes() == (pool_out / "summary.csv").read_bytes()
    assert (solo_out / "traces.jsonl").read_bytes() == (pool_out / "traces.jsonl").read_bytes()
