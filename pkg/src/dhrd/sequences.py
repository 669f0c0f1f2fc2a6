"""Training-sequence construction, dual-stream batching, and alignment ablations.

A training sequence interleaves the classification input, an optional
rationale, and the verbalized label around reserved control tokens. The
classification stream (input only) and the full LM stream are padded
independently when batched; LM-loss masks are zero on every pad so padding
never inflates the normalizer.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import tokenizer
from .tokenizer import ANS, PAD, REASON


class SequenceError(Exception):
    pass


class ReservedTokenInPayload(SequenceError):
    pass


class EmptyBatch(SequenceError):
    pass


class TooSmallForDerangement(SequenceError):
    pass


class MalformedLine(SequenceError):
    pass


LABELS = ("No", "Yes")  # binary label space; index 1 == "Yes"


@dataclass
class Example:
    """One labeled instance: input tokens, optional rationale, gold label."""

    x_tokens: List[int]
    r_tokens: List[int]
    label_index: int
    label_tokens: List[int]
    task_id: str = "task"
    group_id: Optional[int] = None

    def validate(self, n_classes: int = len(LABELS)):
        if not self.x_tokens:
            raise SequenceError("x_tokens must be non-empty")
        if not self.label_tokens:
            raise SequenceError("label_tokens must be non-empty")
        if not 0 <= self.label_index < n_classes:
            raise SequenceError(f"label_index {self.label_index} out of range [0, {n_classes})")


@dataclass
class TrainSequence:
    """Concatenated, masked token sequence for one example."""

    s: List[int]
    L_x: int
    lm_targets: List[int]
    lm_mask: List[int]
    pool_index: int
    label_index: int

    @property
    def L(self) -> int:
        return len(self.s)


@dataclass
class Batch:
    """Two independently padded streams over the same examples."""

    cls_tokens: np.ndarray  # [B, T_cls] int
    cls_pad_mask: np.ndarray  # [B, T_cls] 1 = real token
    full_tokens: np.ndarray  # [B, T_full] int
    full_pad_mask: np.ndarray  # [B, T_full]
    lm_targets: np.ndarray  # [B, T_full] int
    lm_mask: np.ndarray  # [B, T_full] 0/1
    pool_indices: np.ndarray  # [B]
    label_indices: np.ndarray  # [B]

    @property
    def size(self) -> int:
        return self.cls_tokens.shape[0]


class AblationSetting(Enum):
    CONSISTENT_REASONING_LABEL = "ConsistentReasoningLabel"
    ONLY_LABEL = "OnlyLabel"
    SHUFFLE_REASONING = "ShuffleReasoning"
    SHUFFLE_REASONING_LABEL = "ShuffleReasoningLabel"


def _check_payload(tokens: Sequence[int], what: str):
    for t in tokens:
        if t in tokenizer.RESERVED:
            raise ReservedTokenInPayload(f"reserved token id {t} inside {what}")


def build_sequence(ex: Example, reason_token: int = REASON, ans_token: int = ANS) -> TrainSequence:
    """Concatenate [x, <REASON>, r, <ANS>, y]; no rationale -> [x, <ANS>, y].

    lm_targets[t] is the token expected at t+1 and lm_mask[t] marks whether
    that target is supervised. Only the suffix (rationale and label tokens)
    is supervised: forcing the LM head to also model the input bytes injects
    irreducible-entropy gradients that crowd out classifier learning in a
    small trunk trained from scratch. The classifier pools at the last real
    input position, |x| - 1.
    """
    ex.validate()
    if reason_token == ans_token:
        raise SequenceError("reason_token and ans_token must differ")
    _check_payload(ex.x_tokens, "x_tokens")
    _check_payload(ex.r_tokens, "r_tokens")
    _check_payload(ex.label_tokens, "label_tokens")

    if ex.r_tokens:
        s = list(ex.x_tokens) + [reason_token] + list(ex.r_tokens) + [ans_token] + list(ex.label_tokens)
    else:
        s = list(ex.x_tokens) + [ans_token] + list(ex.label_tokens)
    L = len(s)
    L_x = len(ex.x_tokens)
    lm_targets = s[1:] + [PAD]
    lm_mask = [0] * L_x + [1] * (L - 1 - L_x) + [0]
    return TrainSequence(
        s=s,
        L_x=len(ex.x_tokens),
        lm_targets=lm_targets,
        lm_mask=lm_mask,
        pool_index=len(ex.x_tokens) - 1,
        label_index=ex.label_index,
    )


def inference_input(ex: Example) -> Tuple[List[int], int]:
    """Test-time input: x alone, pooled at its last token. No control tokens."""
    ex.validate()
    return list(ex.x_tokens), len(ex.x_tokens) - 1


def collate(seqs: Sequence[TrainSequence], pad_token: int = PAD) -> Batch:
    """Pad the classification and full streams independently to their own maxima."""
    if not seqs:
        raise EmptyBatch("collate needs at least one sequence")
    B = len(seqs)
    t_cls = max(sq.L_x for sq in seqs)
    t_full = max(sq.L for sq in seqs)

    cls_tokens = np.full((B, t_cls), pad_token, dtype=np.int64)
    cls_pad = np.zeros((B, t_cls), dtype=np.int64)
    full_tokens = np.full((B, t_full), pad_token, dtype=np.int64)
    full_pad = np.zeros((B, t_full), dtype=np.int64)
    lm_targets = np.full((B, t_full), pad_token, dtype=np.int64)
    lm_mask = np.zeros((B, t_full), dtype=np.int64)

    for i, sq in enumerate(seqs):
        cls_tokens[i, : sq.L_x] = sq.s[: sq.L_x]
        cls_pad[i, : sq.L_x] = 1
        full_tokens[i, : sq.L] = sq.s
        full_pad[i, : sq.L] = 1
        lm_targets[i, : sq.L] = sq.lm_targets
        lm_mask[i, : sq.L] = sq.lm_mask

    return Batch(
        cls_tokens=cls_tokens,
        cls_pad_mask=cls_pad,
        full_tokens=full_tokens,
        full_pad_mask=full_pad,
        lm_targets=lm_targets,
        lm_mask=lm_mask,
        pool_indices=np.array([sq.pool_index for sq in seqs], dtype=np.int64),
        label_indices=np.array([sq.label_index for sq in seqs], dtype=np.int64),
    )


def _seeded_derangement(n: int, seed: int) -> List[int]:
    """A permutation of range(n) with no fixed point, reproducible from seed."""
    if n < 2:
        raise TooSmallForDerangement("need at least 2 elements to derange")
    rng = random.Random(seed)
    perm = list(range(n))
    while True:
        rng.shuffle(perm)
        if all(perm[i] != i for i in range(n)):
            return perm


def apply_ablation(dataset: Sequence[Example], setting: AblationSetting, seed: int = 0) -> List[Example]:
    """Alignment ablations: identity, drop rationales, or derange them.

    ShuffleReasoning moves rationales only; ShuffleReasoningLabel moves the
    (rationale, label) pair jointly, corrupting the classification target too.
    """
    if setting is AblationSetting.CONSISTENT_REASONING_LABEL:
        return [replace(ex) for ex in dataset]
    if setting is AblationSetting.ONLY_LABEL:
        return [replace(ex, r_tokens=[]) for ex in dataset]

    perm = _seeded_derangement(len(dataset), seed)
    if setting is AblationSetting.SHUFFLE_REASONING:
        return [replace(ex, r_tokens=list(dataset[perm[i]].r_tokens)) for i, ex in enumerate(dataset)]
    if setting is AblationSetting.SHUFFLE_REASONING_LABEL:
        return [
            replace(
                ex,
                r_tokens=list(dataset[perm[i]].r_tokens),
                label_tokens=list(dataset[perm[i]].label_tokens),
                label_index=dataset[perm[i]].label_index,
            )
            for i, ex in enumerate(dataset)
        ]
    raise SequenceError(f"unknown ablation setting {setting}")


# ---------------------------------------------------------------------------
# dataset file format: JSONL with input / reasoning / label strings


def example_from_record(rec: dict) -> Example:
    """Turn one dataset record into tokenized Example fields.

    The rationale segment is verbalized as "Reasoning: ..." and the label
    segment as "Final Answer: <label>", matching the train-time suffix the
    model sees between the control tokens.
    """
    label = rec["label"]
    if label not in LABELS:
        raise MalformedLine(f"label {label!r} not in {LABELS}")
    reasoning = rec.get("reasoning", "")
    return Example(
        x_tokens=tokenizer.encode(rec["input"]),
        r_tokens=tokenizer.encode(f"Reasoning: {reasoning}") if reasoning else [],
        label_index=LABELS.index(label),
        label_tokens=tokenizer.encode(f"Final Answer: {label}"),
        task_id=rec.get("task_id", "task"),
        group_id=rec.get("group_id"),
    )


def load_dataset(path) -> List[Example]:
    """Read a JSONL dataset file into Examples."""
    examples = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                examples.append(example_from_record(rec))
            except (json.JSONDecodeError, KeyError) as e:
                raise MalformedLine(f"{path}:{lineno}: {e}") from e
    return examples


def save_dataset(records: Sequence[dict], path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for rec in records:
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")
