import json
from pathlib import Path

import numpy as np
import pytest

from hydra_peft import adapters as ad
from hydra_peft import corpus as cp
from hydra_peft.cli import main
from hydra_peft.linalg import SeededRng


@pytest.fixture
def corpus_file(tmp_path):
    docs = cp.synth_corpus(3, 30, 0.8, seed=7)
    path = tmp_path / "corpus.jsonl"
    cp.save_jsonl(path, docs)
    return path


def test_params_reference_lines(capsys):
    assert main(["params", "--scheme", "lora", "--rank", "8", "--d", "4096",
                 "--k", "4096", "--layers", "32", "--matrices-per-layer", "2",
                 "--base-total", "6738000000"]) == 0
    assert capsys.readouterr().out == "4194304 (0.062%)\n"

    assert main(["params", "--scheme", "hydra", "--rank", "8", "--experts", "10",
                 "--d", "4096", "--k", "4096", "--layers", "32",
                 "--matrices-per-layer", "2", "--base-total", "6738000000"]) == 0
    assert capsys.readouterr().out == "23073792 (0.342%)\n"


def test_params_split_equals_monolithic(capsys):
    common = ["--d", "4096", "--k", "4096", "--layers", "32",
              "--matrices-per-layer", "2", "--base-total", "6738000000"]
    main(["params", "--scheme", "split", "--rank", "8", "--heads", "4"] + common)
    split_out = capsys.readouterr().out
    main(["params", "--scheme", "lora", "--rank", "32"] + common)
    assert capsys.readouterr().out == split_out


def test_unknown_flag_is_usage_error():
    assert main(["params", "--scheme", "lora", "--whatever", "1"]) == 1


def test_cluster_selects_planted_count(tmp_path, corpus_file, capsys):
    out = tmp_path / "cluster.json"
    assert main(["cluster", "--corpus", str(corpus_file), "--k-max", "6",
                 "--seed", "3", "--out", str(out)]) == 0
    assert capsys.readouterr().out == "k_selected: 3\n"
    payload = json.loads(out.read_text())
    assert payload["k_selected"] == 3
    assert payload["sse_curve"][0][0] == 1
    assert len(payload["assignments"]) == 90


def test_cluster_override(tmp_path, corpus_file, capsys):
    out = tmp_path / "cluster.json"
    assert main(["cluster", "--corpus", str(corpus_file), "--k-max", "6",
                 "--seed", "3", "--k", "4", "--out", str(out)]) == 0
    assert capsys.readouterr().out == "k_selected: 4\n"


def test_cluster_missing_file_is_runtime_error(tmp_path):
    assert main(["cluster", "--corpus", str(tmp_path / "nope.jsonl"),
                 "--out", str(tmp_path / "o.json")]) == 2


def test_cluster_bad_jsonl_line(tmp_path, capsys):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"id": "a", "text": "x"}\n{broken\n', encoding="utf-8")
    assert main(["cluster", "--corpus", str(path),
                 "--out", str(tmp_path / "o.json")]) == 2
    assert "line 2" in capsys.readouterr().err


def _train_cfg(corpus_file, **overrides):
    cfg = {"scheme": "hydra", "rank": 3, "experts": 3, "steps": 40,
           "learning_rate": 0.1, "batch_size": 8, "seed": 5, "eval_interval": 20,
           "d_model": 12, "seq_len": 8, "pretrain_steps": 10,
           "dataset": {"corpus": str(corpus_file)}}
    cfg.update(overrides)
    return cfg


def test_train_end_to_end_from_cluster_output(tmp_path, corpus_file, capsys):
    cluster_out = tmp_path / "cluster.json"
    main(["cluster", "--corpus", str(corpus_file), "--k-max", "6", "--seed", "3",
          "--out", str(cluster_out)])
    capsys.readouterr()
    k = json.loads(cluster_out.read_text())["k_selected"]

    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(_train_cfg(corpus_file, experts=k)))
    out_dir = tmp_path / "run"
    assert main(["train", "--config", str(cfg_path), "--out", str(out_dir)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["seed"] == 5
    assert (out_dir / "checkpoint.txt").exists()
    csv = (out_dir / "report.csv").read_text().strip().split("\n")
    assert csv[0].startswith("step,loss,acc,gate_0")

    # evaluate the checkpoint back
    assert main(["eval", "--config", str(cfg_path),
                 "--checkpoint", str(out_dir / "checkpoint.txt")]) == 0
    evald = json.loads(capsys.readouterr().out)
    assert evald["loss"] == summary["final_loss"]


def test_train_rejects_zero_steps(tmp_path, corpus_file, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(_train_cfg(corpus_file, steps=0)))
    assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "x")]) == 1


def test_train_zero_lr_flat_curve(tmp_path, corpus_file, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(_train_cfg(corpus_file, learning_rate=0.0, steps=20)))
    out_dir = tmp_path / "flat"
    assert main(["train", "--config", str(cfg_path), "--out", str(out_dir)]) == 0
    capsys.readouterr()
    rows = (out_dir / "report.csv").read_text().strip().split("\n")[1:]
    losses = {row.split(",")[1] for row in rows}
    assert len(losses) == 1


def test_merge_infer_on_trained_checkpoint(tmp_path, capsys):
    hy = ad.HydraAdapter.init(6, 5, 2, 3, SeededRng(1))
    rng = SeededRng(2)
    for e in hy.experts:
        e[:] = rng.normal(e.size).reshape(e.shape)
    hy.w_gate[:] = rng.normal(hy.w_gate.size).reshape(hy.w_gate.shape)
    path = tmp_path / "hydra.txt"
    ad.save_adapter(path, hy)
    assert main(["merge-infer", "--checkpoint", str(path), "--trials", "32",
                 "--seed", "4"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("max |merge - moe|:")


def test_merge_infer_rejects_plain_adapter(tmp_path):
    lora = ad.LoraAdapter.init(4, 4, 2, SeededRng(0))
    path = tmp_path / "lora.txt"
    ad.save_adapter(path, lora)
    assert main(["merge-infer", "--checkpoint", str(path)]) == 1


def test_analyze_requires_two_checkpoints(tmp_path):
    lora = ad.LoraAdapter.init(4, 4, 2, SeededRng(0))
    path = tmp_path / "one.txt"
    ad.save_adapter(path, lora)
    assert main(["analyze", "--checkpoints", str(path),
                 "--out", str(tmp_path / "a")]) == 1


def test_analyze_writes_reports(tmp_path, capsys):
    paths = []
    for i in range(3):
        lora = ad.LoraAdapter.init(4, 4, 2, SeededRng(i))
        lora.b[:] = SeededRng(10 + i).normal(8).reshape(4, 2)
        p = tmp_path / f"task{i}.txt"
        ad.save_adapter(p, lora)
        paths.append(str(p))
    out_dir = tmp_path / "analysis"
    assert main(["analyze", "--checkpoints", *paths, "--out", str(out_dir),
                 "--svg"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["d_b"] > 0
    assert (out_dir / "distances.csv").exists()
    assert (out_dir / "embedding.csv").exists()
    assert (out_dir / "embedding.svg").exists()


def test_bench_obs1_single_seed(tmp_path, capsys):
    out = tmp_path / "bench.json"
    assert main(["bench", "--suite", "obs1", "--seeds", "1", "--out", str(out)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["suite"] == "obs1"
    payload = json.loads(out.read_text())
    assert len(payload["rows"]) == 1


def test_cluster_rerun_is_byte_identical(tmp_path, corpus_file, capsys):
    out1, out2 = tmp_path / "c1.json", tmp_path / "c2.json"
    for out in (out1, out2):
        main(["cluster", "--corpus", str(corpus_file), "--k-max", "6",
              "--seed", "3", "--out", str(out)])
    capsys.readouterr()
    assert out1.read_bytes() == out2.read_bytes()
