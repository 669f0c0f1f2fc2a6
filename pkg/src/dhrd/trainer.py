"""Training loop: AdamW with decoupled weight decay, cosine LR schedule with
linear warmup, gradient accumulation, per-epoch evaluation and checkpointing.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import sequences as seq
from .losses import LossReport, LossWeights
from .model import DualHeadModel, ModelConfig, save_checkpoint
from .sequences import AblationSetting, Batch, Example

logger = logging.getLogger(__name__)


class TrainerError(Exception):
    pass


class StepOutOfRange(TrainerError):
    pass


class NonFiniteGradient(TrainerError):
    pass


class ConfigError(TrainerError):
    pass


@dataclass
class OptimConfig:
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 20
    total_steps: int = 0  # 0 = derive from dataset size and epochs
    grad_accum: int = 2
    micro_batch: int = 4
    epochs: int = 3
    seed: int = 0
    schedule: str = "cosine"  # "cosine" or "trapezoid"

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.grad_accum < 1 or self.micro_batch < 1:
            raise ConfigError("grad_accum and micro_batch must be >= 1")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if self.schedule not in ("cosine", "trapezoid"):
            raise ConfigError("schedule must be 'cosine' or 'trapezoid'")


def lr_at(step: int, cfg: OptimConfig) -> float:
    """Linear ramp 0 -> lr over warmup, then decay to 0 at total_steps.

    cosine: half-cosine decay over the whole post-warmup span.
    trapezoid: hold the peak rate, then decay linearly over the last 20%
    of training — useful when the interesting feature is typically found
    late, which a mid-run cosine decay would starve.
    """
    total = cfg.total_steps
    if step < 0 or step > total:
        raise StepOutOfRange(f"step {step} outside [0, {total}]")
    if step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    if total == cfg.warmup_steps:
        return cfg.lr
    if cfg.schedule == "trapezoid":
        decay_start = cfg.warmup_steps + 0.8 * (total - cfg.warmup_steps)
        if step <= decay_start:
            return cfg.lr
        return cfg.lr * (total - step) / (total - decay_start)
    progress = (step - cfg.warmup_steps) / (total - cfg.warmup_steps)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def _decayable(name: str) -> bool:
    """Weight matrices and embeddings decay; biases and norm affines do not."""
    leaf = name.split(".")[-1]
    return not (leaf.startswith("b") or "ln" in name or leaf == "g")


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict."""

    def __init__(self, params: Dict[str, ad.Tensor], cfg: OptimConfig):
        self.params = params
        self.cfg = cfg
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data, dtype=np.float64) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data, dtype=np.float64) for k, p in params.items()}

    def step(self, lr: float):
        cfg = self.cfg
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - cfg.beta1 ** t
        bc2 = 1.0 - cfg.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            g = g.astype(np.float64)
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
            new = p.data.astype(np.float64) - lr * update
            if cfg.weight_decay and _decayable(name):
                new -= lr * cfg.weight_decay * p.data.astype(np.float64)
            p.data = new.astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def compute_batch_losses(model: DualHeadModel, batch: Batch, w: LossWeights) -> Tuple[ad.Tensor, LossReport]:
    """One forward over the appropriate stream(s); returns (total, report).

    With alpha == 0 only the classification stream is run: causal attention
    makes the pooled logits identical with or without the suffix tokens, so
    this is the pooled-baseline objective computed at lower cost.
    """
    if w.alpha == 0:
        hidden = model.forward_hidden(batch.cls_tokens, batch.cls_pad_mask)
        z = model.classify(hidden, batch.pool_indices)
        l_cls = L.cls_loss(z, batch.label_indices)
        total = ad.scale(l_cls, w.beta)
        return total, LossReport(float(l_cls.data), 0.0, float(total.data), 0)

    hidden = model.forward_hidden(batch.full_tokens, batch.full_pad_mask)
    z = model.classify(hidden, batch.pool_indices)
    l_cls = L.cls_loss(z, batch.label_indices)
    logits = model.lm_logits(hidden)
    l_reason, n = L.reason_loss(logits, batch.lm_targets, batch.lm_mask)
    total = L.total_loss(l_cls, l_reason, w)
    return total, LossReport(float(l_cls.data), float(l_reason.data), float(total.data), n)


def train_step(
    model: DualHeadModel,
    micro_batches: Sequence[Batch],
    w: LossWeights,
    opt: AdamW,
    lr: float,
) -> LossReport:
    """Accumulate averaged gradients over the micro-batches, then update once.

    A NaN/Inf gradient aborts the step (no update) rather than clipping.
    """
    opt.zero_grad()
    k = len(micro_batches)
    agg = LossReport(0.0, 0.0, 0.0, 0)
    for batch in micro_batches:
        total, rep = compute_batch_losses(model, batch, w)
        ad.backward(ad.scale(total, 1.0 / k))
        agg.loss_cls += rep.loss_cls / k
        agg.loss_reason += rep.loss_reason / k
        agg.loss_total += rep.loss_total / k
        agg.n_targets += rep.n_targets
    for name, p in model.params.items():
        if p.grad is not None and not np.isfinite(p.grad).all():
            opt.zero_grad()
            raise NonFiniteGradient(f"non-finite gradient in {name}")
    opt.step(lr)
    return agg


# ---------------------------------------------------------------------------
# full training runs


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    ablation: AblationSetting = AblationSetting.CONSISTENT_REASONING_LABEL
    train_path: str = ""
    val_path: str = ""
    out_dir: str = "runs/default"
    seed: int = 0


ER_PURPOSES = ("init", "data", "shuffle", "sampling")


def split_seed(root: int) -> Dict[str, int]:
    ss = np.random.SeedSequence(root)
    children = ss.spawn(len(ER_PURPOSES))
    return {name: int(c.generate_state(1)[0]) for name, c in zip(ER_PURPOSES, children)}


def make_micro_batches(
    train_seqs: List[seq.TrainSequence], micro_batch: int, rng: np.random.Generator
) -> List[Batch]:
    """Shuffle, then sort within coarse buckets so batches have similar lengths
    (keeps padding cheap without de-randomizing the epoch)."""
    order = rng.permutation(len(train_seqs))
    bucket = micro_batch * 32
    ordered: List[int] = []
    for start in range(0, len(order), bucket):
        chunk = sorted(order[start : start + bucket], key=lambda i: train_seqs[i].L)
        ordered.extend(chunk)
    batches = []
    for start in range(0, len(ordered), micro_batch):
        idx = ordered[start : start + micro_batch]
        batches.append(seq.collate([train_seqs[i] for i in idx]))
    perm = rng.permutation(len(batches))
    return [batches[i] for i in perm]


def train_loop(
    model: DualHeadModel,
    train_seqs: List[seq.TrainSequence],
    ocfg: OptimConfig,
    weights: LossWeights,
    data_rng: np.random.Generator,
    on_step=None,
    on_epoch=None,
) -> int:
    """Epoch/accumulation loop shared by run_training and the estimator.

    on_step(step, epoch, lr, report) fires after each optimizer update;
    on_epoch(epoch, model) after each epoch. Returns the step count.
    """
    opt = AdamW(model.params, ocfg)
    step = 0
    for epoch in range(ocfg.epochs):
        batches = make_micro_batches(train_seqs, ocfg.micro_batch, data_rng)
        for start in range(0, len(batches), ocfg.grad_accum):
            group = batches[start : start + ocfg.grad_accum]
            lr = lr_at(min(step, ocfg.total_steps), ocfg)
            try:
                rep = train_step(model, group, weights, opt, lr)
            except NonFiniteGradient as e:
                logger.warning("step %d aborted: %s", step, e)
                step += 1
                continue
            if on_step is not None:
                on_step(step, epoch, lr, rep)
            step += 1
        if on_epoch is not None:
            on_epoch(epoch, model)
    return step


def resolve_total_steps(ocfg: OptimConfig, n_sequences: int) -> OptimConfig:
    """Fill total_steps from dataset size and epochs when left at 0."""
    if ocfg.total_steps != 0:
        return ocfg
    micro_per_epoch = math.ceil(n_sequences / ocfg.micro_batch)
    steps_per_epoch = math.ceil(micro_per_epoch / ocfg.grad_accum)
    return OptimConfig(**{**asdict(ocfg), "total_steps": max(1, steps_per_epoch * ocfg.epochs)})


def evaluate_accuracy(model: DualHeadModel, examples: Sequence[Example], batch_size: int = 64) -> float:
    """Classification accuracy (0-100) on x-only inputs."""
    order = sorted(range(len(examples)), key=lambda i: len(examples[i].x_tokens))
    correct = 0
    with ad.no_grad():
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            seqs = []
            for i in idx:
                toks, pool = seq.inference_input(examples[i])
                seqs.append((toks, pool, examples[i].label_index))
            t_max = max(len(t) for t, _, _ in seqs)
            tokens = np.full((len(seqs), t_max), seq.tokenizer.PAD, dtype=np.int64)
            pad = np.zeros((len(seqs), t_max), dtype=np.int64)
            for j, (toks, _, _) in enumerate(seqs):
                tokens[j, : len(toks)] = toks
                pad[j, : len(toks)] = 1
            hidden = model.forward_hidden(tokens, pad)
            z = model.classify(hidden, np.array([p for _, p, _ in seqs]))
            preds = z.data.argmax(axis=1)
            correct += int((preds == np.array([l for _, _, l in seqs])).sum())
    return 100.0 * correct / len(examples)


def run_training(run: RunConfig) -> dict:
    """Train per config; writes metrics.csv, eval.csv, per-epoch checkpoints,
    and a best-by-validation record into run.out_dir. Returns a summary dict."""
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = split_seed(run.seed)

    if not run.train_path or not os.path.exists(run.train_path):
        raise ConfigError(f"train_path missing or not found: {run.train_path!r}")
    train_examples = seq.load_dataset(run.train_path)
    val_examples = seq.load_dataset(run.val_path) if run.val_path else []
    train_examples = seq.apply_ablation(train_examples, run.ablation, seed=seeds["shuffle"])
    train_seqs = [seq.build_sequence(ex) for ex in train_examples]

    max_needed = max(sq.L for sq in train_seqs)
    if max_needed > run.model.max_len:
        raise ConfigError(f"max_len {run.model.max_len} < longest training sequence {max_needed}")

    model = DualHeadModel(ModelConfig(**{**asdict(run.model), "seed": seeds["init"]}))
    ocfg = resolve_total_steps(run.optim, len(train_seqs))
    data_rng = np.random.default_rng(seeds["data"])

    _write_resolved_config(out / "config.resolved.txt", run, ocfg)
    mf = open(out / "metrics.csv", "w", newline="")
    metrics = csv.writer(mf)
    metrics.writerow(["step", "epoch", "lr", "loss_cls", "loss_reason", "loss_total", "N"])
    ef = open(out / "eval.csv", "w", newline="")
    evals = csv.writer(ef)
    evals.writerow(["epoch", "task", "metric", "value"])

    task_id = train_examples[0].task_id if train_examples else "task"
    best = {"epoch": -1, "value": -1.0, "checkpoint": ""}
    history = []

    def on_step(step, epoch, lr, rep):
        metrics.writerow(
            [step, epoch, f"{lr:.10g}", f"{rep.loss_cls:.6f}", f"{rep.loss_reason:.6f}", f"{rep.loss_total:.6f}", rep.n_targets]
        )

    def on_epoch(epoch, model):
        nonlocal best
        ckpt = out / f"epoch{epoch}.ckpt"
        save_checkpoint(model, ckpt)
        if not val_examples:
            best = {"epoch": epoch, "value": float("nan"), "checkpoint": ckpt.name}
        if val_examples:
            acc = evaluate_accuracy(model, val_examples)
            evals.writerow([epoch, task_id, "accuracy", f"{acc:.4f}"])
            history.append(acc)
            if acc > best["value"]:
                best = {"epoch": epoch, "value": acc, "checkpoint": ckpt.name}
            logger.info("epoch %d: val accuracy %.2f", epoch, acc)

    step = train_loop(model, train_seqs, ocfg, run.weights, data_rng, on_step=on_step, on_epoch=on_epoch)
    if ocfg.epochs == 0:
        ckpt = out / "epoch0.ckpt"
        save_checkpoint(model, ckpt)
        best = {"epoch": 0, "value": float("nan"), "checkpoint": ckpt.name}
    mf.close()
    ef.close()
    with open(out / "best.txt", "w") as f:
        f.write(f"{best['checkpoint']}\n")
    return {
        "out_dir": str(out),
        "best_epoch": best["epoch"],
        "best_val_accuracy": best["value"],
        "val_history": history,
        "steps": step,
        "checkpoint": str(out / best["checkpoint"]) if best["checkpoint"] else "",
    }


def _write_resolved_config(path: Path, run: RunConfig, ocfg: OptimConfig):
    with open(path, "w") as f:
        for k, v in asdict(run.model).items():
            f.write(f"model.{k}={v}\n")
        for k, v in asdict(ocfg).items():
            f.write(f"optim.{k}={v}\n")
        f.write(f"loss.alpha={run.weights.alpha}\n")
        f.write(f"loss.beta={run.weights.beta}\n")
        f.write(f"ablation.setting={run.ablation.value}\n")
        f.write(f"data.train={run.train_path}\n")
        f.write(f"data.val={run.val_path}\n")
        f.write(f"seed={run.seed}\n")


def parse_config_file(path) -> dict:
    """Flat key=value config file -> dict of strings."""
    cfg = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            k, v = line.split("=", 1)
            cfg[k.strip()] = v.strip()
    return cfg


def run_config_from_dict(cfg: dict) -> RunConfig:
    """Build a RunConfig from flat string keys (model.*, optim.*, loss.*, data.*)."""
    model_kwargs: Dict[str, object] = {}
    optim_kwargs: Dict[str, object] = {}
    run = RunConfig()
    int_model = {"d_model", "n_layers", "n_heads", "d_ff", "vocab_size", "n_classes", "max_len", "mlp_hidden", "seed"}
    float_model = {"init_std"}
    float_optim = {"lr", "weight_decay", "beta1", "beta2", "eps"}
    int_optim = {"warmup_steps", "total_steps", "grad_accum", "micro_batch", "epochs", "seed"}
    alpha, beta = run.weights.alpha, run.weights.beta
    for key, raw in cfg.items():
        try:
            if key.startswith("model."):
                k = key[6:]
                if k in float_model:
                    model_kwargs[k] = float(raw)
                elif k in int_model:
                    model_kwargs[k] = int(raw)
                else:
                    raise ConfigError(f"unknown config key {key!r}")
            elif key.startswith("optim."):
                k = key[6:]
                if k in float_optim:
                    optim_kwargs[k] = float(raw)
                elif k in int_optim:
                    optim_kwargs[k] = int(raw)
                else:
                    raise ConfigError(f"unknown config key {key!r}")
            elif key == "loss.alpha":
                alpha = float(raw)
            elif key == "loss.beta":
                beta = float(raw)
            elif key == "ablation.setting":
                run.ablation = AblationSetting(raw)
            elif key == "data.train":
                run.train_path = raw
            elif key == "data.val":
                run.val_path = raw
            elif key == "out":
                run.out_dir = raw
            elif key == "seed":
                run.seed = int(raw)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        except ValueError as e:
            raise ConfigError(f"bad value for {key!r}: {raw!r}") from e
    run.model = ModelConfig(**model_kwargs) if model_kwargs else run.model
    run.optim = OptimConfig(**optim_kwargs) if optim_kwargs else run.optim
    run.weights = LossWeights(alpha=alpha, beta=beta)
    return run
