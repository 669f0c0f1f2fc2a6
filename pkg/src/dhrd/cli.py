"""dhrd command line: generate data, export/import teacher prompts, train,
evaluate, ablate, sweep loss weights, and benchmark throughput.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import datagen, evalbench, sequences, trainer
from .datagen import TaskKind, TaskSpec
from .losses import LossWeights
from .model import DecodeSettings, load_checkpoint
from .sequences import AblationSetting
from .trainer import RunConfig

logger = logging.getLogger(__name__)

SWEEP_GRID = [(1.0, 0.0), (1.0, 0.5), (1.0, 1.0), (0.5, 1.0)]  # (beta, alpha)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n\n{self.format_usage()}")


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key=value config file; flags override it")
    p.add_argument("--train", help="training JSONL (data.train)")
    p.add_argument("--val", help="validation JSONL (data.val)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--alpha", type=float, help="weight on the reasoning LM loss (loss.alpha)")
    p.add_argument("--beta", type=float, help="weight on the classification loss (loss.beta)")
    p.add_argument("--seed", type=int, help="root seed, split per purpose (seed)")
    p.add_argument("--epochs", type=int, help="training epochs (optim.epochs)")
    p.add_argument("--lr", type=float, help="peak learning rate (optim.lr)")
    p.add_argument("--d-model", type=int, help="model width (model.d_model)")
    p.add_argument("--n-layers", type=int, help="decoder blocks (model.n_layers)")
    p.add_argument("--max-len", type=int, help="maximum sequence length (model.max_len)")
    p.add_argument("--setting", choices=[s.value for s in AblationSetting], help="ablation transform (ablation.setting)")


def build_parser() -> _Parser:
    p = _Parser(prog="dhrd", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset (train/val/test JSONL)")
    g.add_argument("--task", choices=[k.value for k in TaskKind], required=True)
    g.add_argument("--n", type=int, default=1000, help="training split size")
    g.add_argument("--n-val", type=int, default=None, help="validation split size (default n/5)")
    g.add_argument("--n-test", type=int, default=None, help="test split size (default n/5)")
    g.add_argument("--difficulty", type=int, default=0, help="task size parameter (0 = task default)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output directory")

    e = sub.add_parser("export-prompts", help="emit teacher prompts for a dataset")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="output JSONL of {id, prompt}")

    i = sub.add_parser("import-rationales", help="join teacher outputs back into a dataset")
    i.add_argument("--data", required=True)
    i.add_argument("--rationales", required=True, help="JSONL of {id, reasoning, answer}")
    i.add_argument("--out", required=True, help="output dataset JSONL")

    t = sub.add_parser("train", help="train a dual-head model")
    _add_train_flags(t)

    a = sub.add_parser("ablate", help="train under a rationale/label alignment ablation")
    _add_train_flags(a)

    s = sub.add_parser("sweep", help="run the (beta, alpha) grid and tabulate vs the pooled baseline")
    _add_train_flags(s)

    v = sub.add_parser("eval", help="score a checkpoint on a dataset")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--out", help="score CSV (default: stdout only)")

    b = sub.add_parser("bench", help="pooled-classification vs decoding throughput")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--limit", type=int, default=64, help="samples to benchmark")
    b.add_argument("--max-new-tokens", type=int, default=128)
    b.add_argument("--temperature", type=float, default=0.1)
    b.add_argument("--top-p", type=float, default=0.7)
    b.add_argument("--warmup", type=int, default=3)
    b.add_argument("--reps", type=int, default=10)
    b.add_argument("--out", help="JSONL report path")
    return p


def _resolve_run(args) -> RunConfig:
    cfg = trainer.parse_config_file(args.config) if args.config else {}
    overrides = {
        "data.train": args.train,
        "data.val": args.val,
        "out": args.out,
        "loss.alpha": args.alpha,
        "loss.beta": args.beta,
        "seed": args.seed,
        "optim.epochs": args.epochs,
        "optim.lr": args.lr,
        "model.d_model": args.d_model,
        "model.n_layers": args.n_layers,
        "model.max_len": args.max_len,
        "ablation.setting": args.setting,
    }
    for k, v in overrides.items():
        if v is not None:
            cfg[k] = str(v)
    return trainer.run_config_from_dict(cfg)


def cmd_gen(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = TaskSpec(
        kind=TaskKind(args.task),
        n_train=args.n,
        n_val=args.n_val if args.n_val is not None else args.n // 5,
        n_test=args.n_test if args.n_test is not None else args.n // 5,
        difficulty=args.difficulty,
        seed=args.seed,
    )
    for split in ("train", "val", "test"):
        rows = datagen.generate_split(spec, split)
        sequences.save_dataset(rows, out / f"{split}.jsonl")
    with open(out / "config.resolved.txt", "w") as f:
        for k, v in asdict(spec).items():
            f.write(f"gen.{k}={getattr(v, 'value', v)}\n")
    print(f"wrote {spec.n_train}/{spec.n_val}/{spec.n_test} records to {out}")
    return 0


def cmd_export_prompts(args) -> int:
    rows = datagen._load_jsonl(args.data)
    sequences.save_dataset(datagen.export_prompts(rows), args.out)
    print(f"exported {len(rows)} prompts to {args.out}")
    return 0


def cmd_import_rationales(args) -> int:
    examples, report = datagen.import_rationales(args.data, args.rationales)
    rows = datagen._load_jsonl(args.data)
    by_id = {r["id"]: r for r in datagen._load_jsonl(args.rationales)}
    joined = []
    for row in rows:
        teacher = by_id.get(row["id"])
        if teacher is None or teacher.get("answer") != row["label"]:
            continue
        row = dict(row)
        row["reasoning"] = teacher["reasoning"]
        joined.append(row)
    sequences.save_dataset(joined, args.out)
    print(f"joined={report['joined']} dropped={report['dropped']} missing={report['missing']}")
    return 0


def cmd_train(args) -> int:
    run = _resolve_run(args)
    summary = trainer.run_training(run)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_sweep(args) -> int:
    run = _resolve_run(args)
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = []
    for beta, alpha in SWEEP_GRID:
        sub = replace(run, weights=LossWeights(alpha=alpha, beta=beta), out_dir=str(out / f"b{beta:g}_a{alpha:g}"))
        summary = trainer.run_training(sub)
        results.append({"beta": beta, "alpha": alpha, "val_accuracy": summary["best_val_accuracy"]})
        logger.info("sweep (beta=%g, alpha=%g): %.2f", beta, alpha, summary["best_val_accuracy"])
    baseline = results[0]["val_accuracy"]
    header = f"{'beta':>6} {'alpha':>6} {'val_acc':>8} {'rel_delta_pct':>14}"
    print(header)
    with open(out / "sweep.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["beta", "alpha", "val_accuracy", "rel_delta_pct"])
        for r in results:
            rel = 100.0 * (r["val_accuracy"] - baseline) / baseline if baseline else float("nan")
            w.writerow([r["beta"], r["alpha"], f"{r['val_accuracy']:.4f}", f"{rel:.4f}"])
            print(f"{r['beta']:>6g} {r['alpha']:>6g} {r['val_accuracy']:>8.2f} {rel:>+14.2f}")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    examples = sequences.load_dataset(args.data)
    by_task = {}
    for ex in examples:
        by_task.setdefault(ex.task_id, []).append(ex)
    scores = []
    for task_id, exs in sorted(by_task.items()):
        preds, golds = _predict_labels(model, exs)
        metrics = [("accuracy", evalbench.accuracy(preds, golds))]
        if any(ex.group_id is not None for ex in exs):
            gids = [ex.group_id for ex in exs]
            metrics.append(("em", evalbench.exact_match_groups(preds, golds, gids)))
        scores.append(evalbench.TaskScore(task_id, metrics))
    for s in scores:
        for name, value in s.metrics:
            print(f"{s.task_id},{name},{value:.4f}")
    print(f"all,macro_avg,{evalbench.macro_average(scores):.4f}")
    if args.out:
        evalbench.write_score_report(args.out, scores)
    return 0


def _predict_labels(model, examples):
    acc_preds, golds = [], []
    from . import autodiff as ad

    with ad.no_grad():
        for batch in evalbench._batched_inputs(examples, 64):
            tokens, pad, pools = batch
            hidden = model.forward_hidden(tokens, pad)
            acc_preds.extend(model.classify(hidden, pools).data.argmax(axis=1).tolist())
    order = sorted(range(len(examples)), key=lambda i: len(examples[i].x_tokens))
    golds = [examples[i].label_index for i in order]
    return acc_preds, golds


def cmd_bench(args) -> int:
    model = load_checkpoint(args.checkpoint)
    examples = sequences.load_dataset(args.data)[: args.limit]
    settings = DecodeSettings(temperature=args.temperature, top_p=args.top_p, max_new_tokens=args.max_new_tokens)
    report = evalbench.run_benchmark(model, examples, settings, warmup=args.warmup, reps=args.reps)
    print(f"qps_classify={report.qps_classify:.2f} qps_decode={report.qps_decode:.2f} speedup={report.speedup:.1f}x")
    for row in report.extrapolation:
        print(f"  projected at {row['tokens_decoded']} tokens: {row['projected_speedup']:.1f}x")
    if args.out:
        evalbench.write_bench_report(args.out, report, model, examples)
    return 0


_HANDLERS = {
    "gen": cmd_gen,
    "export-prompts": cmd_export_prompts,
    "import-rationales": cmd_import_rationales,
    "train": cmd_train,
    "ablate": cmd_train,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    try:
        return _HANDLERS[args.command](args)
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
