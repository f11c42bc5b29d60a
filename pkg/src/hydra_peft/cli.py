"""Command-line surface for the whole pipeline.

Subcommands: cluster, train, eval, params, merge-infer, analyze, bench.
Machine-readable results go to stdout; progress/diagnostics to stderr.

Exit codes: 0 success, 1 usage error (bad flags or config values), 2 runtime
failure (missing or unparseable files, aborted training), 3 violated
numerical invariant.

All randomness flows from explicit --seed flags or the config seed; reruns
with identical inputs write byte-identical outputs. HYDRA_PEFT_THREADS caps
worker processes for `bench`.
"""

from __future__ import annotations

import argparse
import json
import multiprocessing
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import adapters as ad_mod
from . import analysis
from . import clustering
from . import corpus as corpus_mod
from . import trainer
from .adapters import HydraAdapter
from .errors import (CheckpointError, ContractError, InvariantError, ParseError,
                     ShapeError, TrainingAborted, UsageError)
from .linalg import SeededRng


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # argparse exits 2 by default; flag problems are usage errors here
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _out(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def _note(msg: str) -> None:
    sys.stderr.write(msg + "\n")


# -- subcommands -------------------------------------------------------------


def cmd_cluster(args) -> int:
    docs = corpus_mod.load_jsonl(args.corpus)
    init = clustering.init_hydra_from_corpus(docs, k_max=args.k_max, seed=args.seed,
                                             override=args.k)
    payload = {
        "k_selected": init.n_components,
        "sse_curve": None if init.curve is None else [[k, s] for k, s in init.curve.points],
        "assignments": init.assignments,
    }
    Path(args.out).write_text(json.dumps(payload, sort_keys=True) + "\n",
                              encoding="utf-8")
    sys.stdout.write(f"k_selected: {init.n_components}\n")
    return 0


def cmd_train(args) -> int:
    cfg = trainer.TrainConfig.from_json(Path(args.config).read_text(encoding="utf-8"))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _note(f"training scheme={cfg.scheme} rank={cfg.rank} steps={cfg.steps} seed={cfg.seed}")
    model, _, report = trainer.run_from_config(cfg)
    trainer.model_checkpoint(out_dir / "checkpoint.txt", model, cfg)
    (out_dir / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    summary = {"config": json.loads(json.dumps(cfg.__dict__)), **report.summary()}
    (out_dir / "report.json").write_text(json.dumps(summary, sort_keys=True) + "\n",
                                         encoding="utf-8")
    _out(report.summary())
    return 0


def cmd_eval(args) -> int:
    cfg = trainer.TrainConfig.from_json(Path(args.config).read_text(encoding="utf-8"))
    model, data = trainer.build_from_config(cfg)
    _, tensors = ad_mod.read_checkpoint(args.checkpoint)
    trainer.restore_into_model(model, cfg, tensors)
    loss, acc, gates = trainer.evaluate(model, data)
    _out({"loss": loss, "acc": acc,
          "gates": {k: list(map(float, v)) for k, v in gates.items()}})
    return 0


def cmd_params(args) -> int:
    n = {"hydra": args.experts, "split": args.heads}.get(args.scheme, 1)
    count, pct = ad_mod.param_count(args.scheme, args.d, args.k, args.rank, n,
                                    args.matrices_per_layer, args.layers,
                                    args.base_total)
    sys.stdout.write(f"{count} ({pct:.3f}%)\n")
    return 0


def cmd_merge_infer(args) -> int:
    ad = ad_mod.load_adapter(args.checkpoint)
    if not isinstance(ad, HydraAdapter):
        raise UsageError("merge-infer needs a multi-expert (hydra) checkpoint")
    d = ad.experts[0].shape[0]
    k = ad.a_shared.shape[1]
    rng = SeededRng(args.seed).derive("merge-infer")
    if args.input is not None:
        xs = [np.asarray(json.loads(Path(args.input).read_text(encoding="utf-8")),
                         dtype=np.float64)]
        if xs[0].shape != (k,):
            raise UsageError(f"input vector must have length {k}")
    else:
        xs = [rng.normal(k) for _ in range(args.trials)]
    worst = 0.0
    for x in xs:
        w0 = rng.normal(d * k).reshape(d, k) * (1.0 / np.sqrt(k))
        moe, _ = ad_mod.hydra_forward(x, w0, ad)
        merged = ad_mod.merge_infer(x, w0, ad)
        worst = max(worst, float(np.abs(moe - merged).max()))
    sys.stdout.write(f"max |merge - moe|: {worst:.3e}\n")
    if worst > 1e-12:
        raise InvariantError(
            f"merged inference deviates from expert-sum inference by {worst:.3e}")
    return 0


def cmd_analyze(args) -> int:
    loaded = []
    for path in args.checkpoints:
        _, tensors = ad_mod.read_checkpoint(path)
        loaded.append((Path(path).stem, tensors))
    report = analysis.breakdown(loaded)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "distances.csv").write_text(report.distance_csv(), encoding="utf-8")
    (out_dir / "embedding.csv").write_text(report.embedding_csv(), encoding="utf-8")
    if args.svg:
        (out_dir / "embedding.svg").write_text(analysis.scatter_svg(report),
                                               encoding="utf-8")
    _out({"d_a": report.d_a, "d_b": report.d_b, "ratio": report.ratio,
          "degenerate": report.degenerate})
    return 0


# -- bench suites ------------------------------------------------------------


def _obs1_configs():
    single = trainer.TrainConfig(scheme="lora", rank=8, steps=240, learning_rate=0.2,
                                 batch_size=16, pretrain_steps=60, pretrain_lr=0.1)
    split = replace(single, scheme="split", rank=4, experts=2)
    return single, split


def _het_config(seed: int) -> trainer.TrainConfig:
    return trainer.TrainConfig(scheme="lora", rank=6, steps=800, learning_rate=0.01,
                               optimizer="adam", batch_size=24, seed=seed,
                               eval_interval=200)


def _bench_one(job) -> dict:
    suite, seed = job
    if suite == "obs1":
        single, split = _obs1_configs()
        rep = trainer.run_observation1([seed], single, split)
        return rep.rows[0]
    if suite == "obs2":
        rep = trainer.run_observation2([seed])
        return rep.rows[0]
    rows = trainer.run_heterogeneity([1, 2, 4], _het_config(seed))
    return {"seed": seed, "rows": rows, "win": bool(rows[-1]["gap"] > rows[0]["gap"])}


def cmd_bench(args) -> int:
    seeds = list(range(args.seeds))
    jobs = [(args.suite, s) for s in seeds]
    workers = int(os.environ.get("HYDRA_PEFT_THREADS", "1"))
    if workers > 1 and len(jobs) > 1:
        with multiprocessing.Pool(min(workers, len(jobs))) as pool:
            rows = pool.map(_bench_one, jobs)
    else:
        rows = [_bench_one(j) for j in jobs]
    if args.suite == "obs1":
        wins = sum(r["win"] for r in rows)
    elif args.suite == "obs2":
        wins = sum(r["ratio"] > 1.0 for r in rows)
    else:
        wins = sum(r["win"] for r in rows)
    payload = {"suite": args.suite, "seeds": seeds, "wins": wins, "rows": rows}
    if args.out:
        Path(args.out).write_text(json.dumps(payload, sort_keys=True) + "\n",
                                  encoding="utf-8")
    _out({"suite": args.suite, "wins": wins, "n": len(seeds)})
    for r in rows:
        _note(json.dumps(r, sort_keys=True))
    return 0


# -- wiring ------------------------------------------------------------------


def build_parser() -> _Parser:
    p = _Parser(prog="hydra-peft", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("cluster", help="pick the expert count for a corpus")
    c.add_argument("--corpus", required=True)
    c.add_argument("--k-max", type=int, default=8)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--k", type=int, default=None, help="override the selected count")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_cluster)

    t = sub.add_parser("train", help="train from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint against its config")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint", required=True)
    e.set_defaults(func=cmd_eval)

    pa = sub.add_parser("params", help="trainable-parameter accounting")
    pa.add_argument("--scheme", required=True, choices=ad_mod.SCHEMES)
    pa.add_argument("--rank", type=int, required=True)
    pa.add_argument("--experts", type=int, default=1)
    pa.add_argument("--heads", type=int, default=1)
    pa.add_argument("--d", type=int, required=True)
    pa.add_argument("--k", type=int, required=True)
    pa.add_argument("--layers", type=int, required=True)
    pa.add_argument("--matrices-per-layer", type=int, required=True)
    pa.add_argument("--base-total", type=int, required=True)
    pa.set_defaults(func=cmd_params)

    m = sub.add_parser("merge-infer", help="check merged vs expert-sum inference")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--input", default=None, help="JSON file with one input vector")
    m.add_argument("--trials", type=int, default=16)
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=cmd_merge_infer)

    a = sub.add_parser("analyze", help="distance/embedding breakdown of checkpoints")
    a.add_argument("--checkpoints", nargs="+", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--svg", action="store_true")
    a.set_defaults(func=cmd_analyze)

    b = sub.add_parser("bench", help="run a statistical suite over seeds")
    b.add_argument("--suite", required=True, choices=("obs1", "obs2", "het"))
    b.add_argument("--seeds", type=int, default=10)
    b.add_argument("--out", default=None)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        _note(f"usage error: {e}")
        return 1
    except InvariantError as e:
        _note(f"invariant violation: {e}")
        return 3
    except (OSError, ParseError, CheckpointError, TrainingAborted, ShapeError,
            ContractError) as e:
        _note(f"error: {e}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
