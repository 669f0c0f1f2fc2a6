"""Scoring (accuracy / F1 / grouped EM / macro-average on a 0-100 scale) and
the pooled-classification vs autoregressive-decoding throughput benchmark.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, asdict, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import sequences as seq
from .model import DecodeSettings, DualHeadModel
from .sequences import Example


class EvalError(Exception):
    pass


class EmptyInput(EvalError):
    pass


class LengthMismatch(EvalError):
    pass


class EmptyDataset(EvalError):
    pass


@dataclass
class TaskScore:
    task_id: str
    metrics: List[Tuple[str, float]]

    def mean(self) -> float:
        return sum(v for _, v in self.metrics) / len(self.metrics)


@dataclass
class BenchReport:
    qps_classify: float
    qps_decode: float
    speedup: float
    n_samples: int
    wall_clock_s: float
    decode_settings: DecodeSettings
    mean_tokens_decoded: float = 0.0
    extrapolation: List[dict] = field(default_factory=list)


def _check_pair(preds, golds):
    if len(preds) == 0:
        raise EmptyInput("no predictions")
    if len(preds) != len(golds):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(golds)} golds")


def accuracy(preds: Sequence, golds: Sequence) -> float:
    _check_pair(preds, golds)
    correct = sum(p == g for p, g in zip(preds, golds))
    return 100.0 * correct / len(preds)


def f1_binary(preds: Sequence, golds: Sequence, positive_class) -> float:
    """100 * 2PR/(P+R); 0 when the denominator vanishes."""
    if len(preds) != len(golds):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(golds)} golds")
    tp = sum(p == positive_class and g == positive_class for p, g in zip(preds, golds))
    fp = sum(p == positive_class and g != positive_class for p, g in zip(preds, golds))
    fn = sum(p != positive_class and g == positive_class for p, g in zip(preds, golds))
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 100.0 * 2 * precision * recall / (precision + recall)


def exact_match_groups(preds: Sequence, golds: Sequence, group_ids: Sequence) -> float:
    """Fraction of groups whose records are all correct."""
    _check_pair(preds, golds)
    if len(group_ids) != len(preds):
        raise LengthMismatch("group_ids length differs from predictions")
    ok: Dict[object, bool] = {}
    for p, g, gid in zip(preds, golds, group_ids):
        ok[gid] = ok.get(gid, True) and (p == g)
    return 100.0 * sum(ok.values()) / len(ok)


def macro_average(scores: Sequence[TaskScore]) -> float:
    """Mean over tasks of each task's within-task metric mean."""
    if not scores:
        raise EmptyInput("no task scores")
    return sum(s.mean() for s in scores) / len(scores)


def write_score_report(path, scores: Sequence[TaskScore]):
    """CSV task,metric,value with a trailing macro_avg row."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["task", "metric", "value"])
        for s in scores:
            for name, value in s.metrics:
                w.writerow([s.task_id, name, f"{value:.4f}"])
        w.writerow(["all", "macro_avg", f"{macro_average(scores):.4f}"])


# ---------------------------------------------------------------------------
# CoT-path label extraction (the "Reasoning / CoT" baseline)


def extract_label_from_generation(text: str, labels: Sequence[str] = seq.LABELS) -> Optional[str]:
    """First label verbalization after "Final Answer:"; None if unparseable."""
    marker = "Final Answer:"
    pos = text.find(marker)
    tail = text[pos + len(marker) :] if pos >= 0 else ""
    best = None
    for lab in labels:
        at = tail.find(lab)
        if at >= 0 and (best is None or at < best[0]):
            best = (at, lab)
    return best[1] if best else None


# ---------------------------------------------------------------------------
# throughput


def _batched_inputs(examples: Sequence[Example], batch_size: int):
    order = sorted(range(len(examples)), key=lambda i: len(examples[i].x_tokens))
    batches = []
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        toks_pools = [seq.inference_input(examples[i]) for i in idx]
        t_max = max(len(t) for t, _ in toks_pools)
        tokens = np.full((len(idx), t_max), seq.tokenizer.PAD, dtype=np.int64)
        pad = np.zeros((len(idx), t_max), dtype=np.int64)
        for j, (toks, _) in enumerate(toks_pools):
            tokens[j, : len(toks)] = toks
            pad[j, : len(toks)] = 1
        batches.append((tokens, pad, np.array([p for _, p in toks_pools])))
    return batches


def bench_classify(model: DualHeadModel, examples: Sequence[Example], warmup: int = 3, reps: int = 10, batch_size: int = 32) -> Tuple[float, float]:
    """(qps, wall_clock_s) for full-dataset pooled-classification passes.

    Warmup passes run untimed; timing uses a monotonic clock.
    """
    if not examples:
        raise EmptyDataset("bench_classify needs a non-empty dataset")
    if warmup < 1 or reps < 1:
        raise EvalError("warmup and reps must be >= 1")
    batches = _batched_inputs(examples, batch_size)

    def one_pass():
        for tokens, pad, pools in batches:
            hidden = model.forward_hidden(tokens, pad)
            model.classify(hidden, pools).data.argmax(axis=1)

    with ad.no_grad():
        for _ in range(warmup):
            one_pass()
        t0 = time.monotonic()
        for _ in range(reps):
            one_pass()
        elapsed = time.monotonic() - t0
    return reps * len(examples) / elapsed, elapsed


def bench_decode(
    model: DualHeadModel,
    examples: Sequence[Example],
    settings: DecodeSettings,
    warmup: int = 3,
    reps: int = 1,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[float, float, float]:
    """(qps, wall_clock_s, mean_tokens_decoded) for per-sample decoding."""
    if not examples:
        raise EmptyDataset("bench_decode needs a non-empty dataset")
    if warmup < 1 or reps < 1:
        raise EvalError("warmup and reps must be >= 1")
    if rng is None:
        rng = np.random.default_rng(0)
    prefixes = [seq.inference_input(ex)[0] for ex in examples]

    for p in prefixes[:warmup]:
        model.generate(p, settings, rng)
    total_tokens = 0
    t0 = time.monotonic()
    for _ in range(reps):
        for p in prefixes:
            out = model.generate(p, settings, rng)
            total_tokens += len(out) - len(p)
    elapsed = time.monotonic() - t0
    n = reps * len(examples)
    return n / elapsed, elapsed, total_tokens / n


def run_benchmark(
    model: DualHeadModel,
    examples: Sequence[Example],
    settings: DecodeSettings,
    warmup: int = 3,
    reps: int = 10,
    decode_reps: int = 1,
    extrapolate_to: int = 500,
) -> BenchReport:
    """Both benches on the same model and dataset, plus a tokens-vs-speedup
    extrapolation from the measured per-token decode cost."""
    qps_c, _ = bench_classify(model, examples, warmup=warmup, reps=reps)
    t0 = time.monotonic()
    qps_d, decode_wall, mean_tokens = bench_decode(model, examples, settings, warmup=warmup, reps=decode_reps)
    wall = time.monotonic() - t0

    # decode time ~ per-token cost * tokens emitted; project the speedup trend
    per_sample_s = 1.0 / qps_d
    per_token_s = per_sample_s / max(mean_tokens, 1.0)
    extrapolation = []
    for tokens in (8, 32, 128, extrapolate_to):
        qps_at = 1.0 / (per_token_s * tokens)
        extrapolation.append({"tokens_decoded": tokens, "projected_speedup": qps_c / qps_at})

    return BenchReport(
        qps_classify=qps_c,
        qps_decode=qps_d,
        speedup=qps_c / qps_d,
        n_samples=len(examples),
        wall_clock_s=decode_wall,
        decode_settings=settings,
        mean_tokens_decoded=mean_tokens,
        extrapolation=extrapolation,
    )


def write_bench_report(path, report: BenchReport, model: DualHeadModel, examples: Sequence[Example]):
    """Append one JSONL record with config/data hashes and a timestamp."""
    rec = asdict(report)
    rec["decode_settings"] = asdict(report.decode_settings)
    cfg_blob = json.dumps(asdict(model.cfg), sort_keys=True).encode()
    data_blob = repr([(ex.x_tokens, ex.label_index) for ex in examples]).encode()
    rec["model_config_hash"] = hashlib.sha256(cfg_blob).hexdigest()[:16]
    rec["data_hash"] = hashlib.sha256(data_blob).hexdigest()[:16]
    rec["timestamp"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    with open(path, "a") as f:
        f.write(json.dumps(rec) + "\n")
