from __future__ import annotations

import json
import os

import pytest

from mixtrace import cli, synthgen
from mixtrace.config import RunConfig
from mixtrace.errors import NumericError

from conftest import SMALL_WORLD, small_config_text


def run(*argv) -> int:
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    d = tmp_path_factory.mktemp("chain")
    synth = "".join(f"{k} = {getattr(SMALL_WORLD, k)}\n" for k in ("num_entities", "num_background_accounts", "num_noise_groups"))
    (d / "world.cfg").write_text(synth)
    (d / "run.cfg").write_text(small_config_text(epochs=3))
    assert run("synth", "--config", d / "world.cfg", "--seed", 5, "--out-tx", d / "raw.jsonl",
               "--out-labels", d / "labels.jsonl") == 0
    assert run("purify", "--in", d / "raw.jsonl", "--out", d / "purified.jsonl",
               "--mixers", d / "mixers.json", "--relayers", d / "relayers.json") == 0
    assert run("build", "--purified", d / "purified.jsonl", "--labels", d / "labels.jsonl",
               "--config", d / "run.cfg", "--out", d / "graph.json") == 0
    assert run("train", "--graph", d / "graph.json", "--config", d / "run.cfg", "--out", d / "model.ckpt") == 0
    assert run("eval", "--graph", d / "graph.json", "--checkpoint", d / "model.ckpt", "--out", d / "report.json") == 0
    return d


def test_chain_writes_all_artifacts(chain):
    for name in ("raw.jsonl", "labels.jsonl", "mixers.json", "relayers.json", "purified.jsonl",
                 "graph.json", "model.ckpt", "report.json", "report.scores.csv"):
        assert (chain / name).stat().st_size > 0
    assert not [f for f in os.listdir(chain) if f.startswith(".tmp-")]


def test_synth_matches_library(chain):
    w = synthgen.generate(SMALL_WORLD)
    lines = (chain / "raw.jsonl").read_text().splitlines()
    assert [json.loads(x) for x in lines] == [t.to_json() for t in w.transactions]


def test_artifacts_carry_config_hash_and_seed(chain):
    report = json.loads((chain / "report.json").read_text())
    bundle = json.loads((chain / "graph.json").read_text())
    assert report["seed"] == RunConfig().seed and len(report["config_hash"]) == 64
    assert report["checkpoint_config_hash"] == report["config_hash"]
    assert bundle["meta"]["config_hash"] == report["config_hash"]
    assert report["per_pair_scores"] == "report.scores.csv"
    assert set(report["metrics"]) >= {"auc", "mrr", "f1"}


def test_eval_rerun_is_identical(chain):
    assert run("eval", "--graph", chain / "graph.json", "--checkpoint", chain / "model.ckpt",
               "--out", chain / "again.json") == 0
    a = json.loads((chain / "report.json").read_text())
    b = json.loads((chain / "again.json").read_text())
    b["per_pair_scores"] = a["per_pair_scores"]
    assert a == b
    assert (chain / "report.scores.csv").read_text() == (chain / "again.scores.csv").read_text()


def test_predict_scores_pairs(chain, tmp_path):
    labels = [json.loads(x) for x in (chain / "labels.jsonl").read_text().splitlines()][:3]
    pairs = tmp_path / "pairs.jsonl"
    pairs.write_text("".join(json.dumps({"addr_a": l["addr_a"], "addr_b": l["addr_b"]}) + "\n" for l in labels))
    out = tmp_path / "pred.csv"
    assert run("predict", "--graph", chain / "graph.json", "--checkpoint", chain / "model.ckpt",
               "--pairs", pairs, "--out", out) == 0
    rows = out.read_text().splitlines()
    assert rows[0] == "addr_a,addr_b,probability" and len(rows) == 4
    assert all(0.0 <= float(r.split(",")[2]) <= 1.0 for r in rows[1:])


def test_config_prints_resolved(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("seed = 9\n")
    assert run("config", "--config", cfg, "--no-window") == 0
    out = capsys.readouterr().out
    assert "seed = 9" in out and "no_window = true" in out


def test_missing_input_is_usage_error(tmp_path, capsys):
    assert run("purify", "--in", tmp_path / "nope.jsonl", "--out", tmp_path / "o.jsonl",
               "--mixers", tmp_path / "nope.json") == 2
    assert "missing" in capsys.readouterr().err


def test_bad_arguments_are_usage_errors():
    assert run("train") == 2
    assert run("frobnicate") == 2


def test_unknown_config_key_is_validation_error(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("learning_rate = 0.1\n")
    assert run("config", "--config", cfg) == 3
    assert "learning_rate" in capsys.readouterr().err


def test_corrupted_checkpoint_is_integrity_error(chain, tmp_path):
    blob = bytearray((chain / "model.ckpt").read_bytes())
    blob[len(blob) // 2] ^= 0x01
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(bytes(blob))
    assert run("eval", "--graph", chain / "graph.json", "--checkpoint", bad, "--out", tmp_path / "r.json") == 4
    assert not (tmp_path / "r.json").exists()


def test_numeric_failure_exit_code(monkeypatch, tmp_path):
    def boom(args):
        raise NumericError("matmul", "non-finite output")
    monkeypatch.setattr(cli, "cmd_config", boom)
    assert run("config") == 5


def test_no_window_flag_trains(chain, tmp_path):
    out = tmp_path / "m.ckpt"
    assert run("train", "--graph", chain / "graph.json", "--config", chain / "run.cfg",
               "--epochs", 1, "--no-window", "--out", out) == 0
    assert out.stat().st_size > 0
