"""sklearn-style front door: a dual-head text classifier with fit/predict.

Wraps the training stack so it composes with pipelines, grid search, and
cross-validation. X is a sequence of input strings (or dicts carrying an
optional "reasoning" field); y is any binary label set.
"""

from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from . import autodiff as ad
from . import sequences as seq
from . import tokenizer
from . import trainer
from .losses import LossWeights
from .model import DualHeadModel, ModelConfig
from .sequences import Example


class DualHeadClassifier(BaseEstimator, ClassifierMixin):
    """Pooled-classifier transformer trained with an auxiliary rationale LM loss.

    Rationales (when present in X) are consumed only at fit time; predict
    runs the classification head on the input text alone.
    """

    def __init__(
        self,
        d_model: int = 64,
        n_layers: int = 2,
        n_heads: int = 4,
        d_ff: int = 256,
        max_len: int = 256,
        init_std: float = 0.3,
        alpha: float = 1.0,
        beta: float = 1.0,
        lr: float = 1e-3,
        weight_decay: float = 0.01,
        warmup_steps: int = 5,
        grad_accum: int = 8,
        micro_batch: int = 4,
        epochs: int = 3,
        seed: int = 0,
    ):
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.max_len = max_len
        self.init_std = init_std
        self.alpha = alpha
        self.beta = beta
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.grad_accum = grad_accum
        self.micro_batch = micro_batch
        self.epochs = epochs
        self.seed = seed

    # -- helpers ------------------------------------------------------------

    def _to_example(self, x, label_index: int) -> Example:
        if isinstance(x, dict):
            text, reasoning = x["input"], x.get("reasoning", "")
        else:
            text, reasoning = str(x), ""
        label = str(self.classes_[label_index])
        return Example(
            x_tokens=tokenizer.encode(text),
            r_tokens=tokenizer.encode(f"Reasoning: {reasoning}") if reasoning else [],
            label_index=label_index,
            label_tokens=tokenizer.encode(f"Final Answer: {label}"),
        )

    # -- estimator API ------------------------------------------------------

    def fit(self, X: Sequence, y: Sequence):
        self.classes_ = np.unique(np.asarray(y))
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        index_of = {c: i for i, c in enumerate(self.classes_)}
        examples = [self._to_example(x, index_of[label]) for x, label in zip(X, y)]
        train_seqs = [seq.build_sequence(ex) for ex in examples]

        seeds = trainer.split_seed(self.seed)
        cfg = ModelConfig(
            d_model=self.d_model,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            d_ff=self.d_ff,
            n_classes=len(self.classes_),
            max_len=self.max_len,
            init_std=self.init_std,
            seed=seeds["init"],
        )
        longest = max(sq.L for sq in train_seqs)
        if longest > cfg.max_len:
            raise ValueError(f"max_len={cfg.max_len} shorter than longest training sequence ({longest})")
        ocfg = trainer.resolve_total_steps(
            trainer.OptimConfig(
                lr=self.lr,
                weight_decay=self.weight_decay,
                warmup_steps=self.warmup_steps,
                grad_accum=self.grad_accum,
                micro_batch=self.micro_batch,
                epochs=self.epochs,
                seed=self.seed,
            ),
            len(train_seqs),
        )
        self.model_ = DualHeadModel(cfg)
        trainer.train_loop(
            self.model_,
            train_seqs,
            ocfg,
            LossWeights(alpha=self.alpha, beta=self.beta),
            np.random.default_rng(seeds["data"]),
        )
        return self

    def decision_function(self, X: Sequence) -> np.ndarray:
        if not hasattr(self, "model_"):
            raise NotFittedError("fit this classifier before predicting")
        logits = []
        with ad.no_grad():
            for start in range(0, len(X), 64):
                chunk = X[start : start + 64]
                toks = [tokenizer.encode(x["input"] if isinstance(x, dict) else str(x)) for x in chunk]
                t_max = max(len(t) for t in toks)
                tokens = np.full((len(toks), t_max), tokenizer.PAD, dtype=np.int64)
                pad = np.zeros((len(toks), t_max), dtype=np.int64)
                for j, t in enumerate(toks):
                    tokens[j, : len(t)] = t
                    pad[j, : len(t)] = 1
                hidden = self.model_.forward_hidden(tokens, pad)
                pools = np.array([len(t) - 1 for t in toks])
                logits.append(self.model_.classify(hidden, pools).data)
        return np.concatenate(logits, axis=0)

    def predict(self, X: Sequence) -> np.ndarray:
        scores = self.decision_function(X)  # raises NotFittedError when unfitted
        return self.classes_[scores.argmax(axis=1)]
