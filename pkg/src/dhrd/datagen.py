"""Synthetic tasks with programmatically faithful rationales.

Stands in for an external rationale-producing teacher: every generated
record carries a step-by-step explanation that an independent oracle can
replay to re-derive the gold label. Generation is a pure function of
(kind, difficulty, seed, index), and each split is exactly label-balanced.

Two tasks:

* parity — is the number of ones in a bit string even or odd? The rationale
  enumerates the running parity bit by bit.
* chain — does "X > Y" follow by transitivity from a list of pair facts
  with distractors? The rationale spells out the connecting path when
  entailed and names the break when not; an oracle can replay it by
  transitive closure.
"""

from __future__ import annotations

import json
import random
import string
from dataclasses import dataclass, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

from . import sequences
from .sequences import Example


class DatagenError(Exception):
    pass


class MissingId(DatagenError):
    pass


class TaskKind(Enum):
    PARITY = "parity"
    CHAIN_ENTAIL = "chain"


DEFAULT_DIFFICULTY = {TaskKind.PARITY: 6, TaskKind.CHAIN_ENTAIL: 3}

# offsets keep the three splits on disjoint record streams
_SPLIT_OFFSET = {"train": 0, "val": 1_000_003, "test": 2_000_003}

_CHAIN_POOL = string.ascii_uppercase[:20]
_DISTRACTOR_FRACTION = 0.3
# share of No cases whose target symbol never appears; the rest run a real
# pair against the link direction, which is the harder face of the task
_ABSENT_FRACTION = 0.3


@dataclass
class TaskSpec:
    kind: TaskKind
    n_train: int = 1000
    n_val: int = 200
    n_test: int = 200
    difficulty: int = 0  # 0 = task default
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.kind, str):
            self.kind = TaskKind(self.kind)
        if self.difficulty == 0:
            self.difficulty = DEFAULT_DIFFICULTY[self.kind]
        if self.difficulty < 1:
            raise DatagenError("difficulty must be >= 1")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise DatagenError("split sizes must be >= 0")


@dataclass
class PromptedRecord:
    passage: str
    question: str
    answer: str
    reasoning: str
    label: str  # "Yes" / "No"


def _rng(spec: TaskSpec, index: int) -> random.Random:
    return random.Random(f"{spec.kind.value}:{spec.difficulty}:{spec.seed}:{index}")


def gen_parity(spec: TaskSpec, index: int) -> PromptedRecord:
    """One parity record; even indices are labeled Yes, odd indices No."""
    rng = _rng(spec, index)
    bits = "".join(rng.choice("01") for _ in range(spec.difficulty))
    ones = bits.count("1")
    true_word = "even" if ones % 2 == 0 else "odd"
    want_yes = index % 2 == 0
    candidate = true_word if want_yes else ("odd" if true_word == "even" else "even")

    running = []
    count = 0
    for b in bits:
        count += int(b)
        running.append("even" if count % 2 == 0 else "odd")
    reasoning = (
        f"Scanning the bits left to right, the running parity is {', '.join(running)}. "
        f"The total count of ones is {ones}, which is {true_word}. "
        f"The candidate answer states {candidate}."
    )
    return PromptedRecord(
        passage=bits,
        question="Is the count of ones in the bit string even or odd?",
        answer=candidate,
        reasoning=reasoning,
        label="Yes" if want_yes else "No",
    )


def _closure_from(start: str, facts: Sequence[Tuple[str, str]]) -> List[str]:
    """Symbols reachable from `start` by following facts, in discovery order."""
    reach = [start]
    frontier = [start]
    while frontier:
        nxt = []
        for a, b in facts:
            if a in frontier and b not in reach:
                reach.append(b)
                nxt.append(b)
        frontier = nxt
    return reach


def gen_chain_entail(spec: TaskSpec, index: int) -> PromptedRecord:
    """One transitivity record over a chain of `difficulty` symbols.

    The passage lists one chain in order ("A > B. B > C. C > D.") followed
    by distractor links over fresh symbols. Yes cases ask about a downstream
    pair; No cases either name a symbol that never appears or run the
    hypothesis upstream against the link direction.

    The rationale spells out the connecting path when the pair is entailed,
    and names the break otherwise (the missing symbol, or the only direction
    the pair actually holds in). Its tokens are copies of input symbols plus
    a case-discriminative verdict word, so supervising it trains exactly the
    attention and comparison features the pooled classifier needs — and
    shuffling it against the input turns that supervision contradictory.
    """
    rng = _rng(spec, index)
    k = max(3, spec.difficulty)
    n_distract = round(_DISTRACTOR_FRACTION * (k - 1))
    symbols = rng.sample(_CHAIN_POOL, k + 1 + 2 * n_distract)
    chain, absent = symbols[:k], symbols[k]
    extra = symbols[k + 1:]
    links = [(chain[i], chain[i + 1]) for i in range(k - 1)]
    links += [(extra[2 * t], extra[2 * t + 1]) for t in range(n_distract)]

    want_yes = index % 2 == 0
    if want_yes:
        i = rng.randint(0, k - 2)
        j = rng.randint(i + 1, k - 1)
        x, y = chain[i], chain[j]
        reasoning = "path: " + " > ".join(chain[i:j + 1]) + "."
    elif rng.random() < _ABSENT_FRACTION:
        x, y = rng.choice(chain[:-1]), absent
        reasoning = f"break: {y} is missing."
    else:
        j = rng.randint(0, k - 2)
        i = rng.randint(j + 1, k - 1)
        x, y = chain[i], chain[j]
        reasoning = f"break: only {y} > {x}."

    return PromptedRecord(
        passage=" ".join(f"{a} > {b}." for a, b in links),
        question=f"Does {x} > {y} follow?",
        answer=f"{x} > {y}",
        reasoning=reasoning,
        label="Yes" if want_yes else "No",
    )


_GENERATORS = {TaskKind.PARITY: gen_parity, TaskKind.CHAIN_ENTAIL: gen_chain_entail}


def generate_record(spec: TaskSpec, index: int) -> PromptedRecord:
    return _GENERATORS[spec.kind](spec, index)


def format_unifiedqa(rec: PromptedRecord) -> Tuple[str, str, str]:
    """(classification input, train-time reasoning suffix, label verbalization)."""
    input_text = (
        f"Passage: {rec.passage}\n"
        f"Question: {rec.question}\n"
        f"Answer: {rec.answer}\n"
        "Is the answer correct Yes or No?"
    )
    if rec.reasoning:
        reason_text = f"Reasoning: {rec.reasoning}\nFinal Answer: {rec.label}"
    else:
        reason_text = f"Final Answer: {rec.label}"
    return input_text, reason_text, rec.label


def generate_split(spec: TaskSpec, split: str) -> List[dict]:
    """Dataset rows (JSONL dicts) for one split; exactly balanced when the
    split size is even."""
    n = {"train": spec.n_train, "val": spec.n_val, "test": spec.n_test}[split]
    base = replace(spec, seed=spec.seed + _SPLIT_OFFSET[split])
    rows = []
    for idx in range(n):
        rec = generate_record(base, idx)
        input_text, _, label_text = format_unifiedqa(rec)
        rows.append(
            {
                "id": idx,
                "input": input_text,
                "reasoning": rec.reasoning,
                "label": label_text,
                "task_id": spec.kind.value,
            }
        )
    return rows


SENTINEL = "[END OF REASONING]"

_TEACHER_TEMPLATE = """Instruction: Given the passage, question, and candidate answer, write a short explanation (2-5 sentences) that justifies the gold label. Let's think step by step.
Rules:
(1) Do not include "Yes/No", "True/False", or synonyms in the explanation.
(2) End the explanation with the sentinel shown in the I/O format.
(3) The explanation should be a short paragraph.
(4) On a new line, output the answer line shown in the I/O format.
I/O Format:
Passage: ...
Question: ...
Answer: ...
Reasoning: <concise explanation not revealing the label> {sentinel}
Answer: <Yes|No>
Input:
Passage: {passage}
Question: {question}
Answer: {answer}
Gold label: {label}"""


def emit_teacher_prompt(rec: PromptedRecord) -> str:
    """Guarded prompt for an external rationale teacher. Never leaks the
    record's own reasoning; the teacher is asked for a fresh one."""
    return _TEACHER_TEMPLATE.format(
        sentinel=SENTINEL,
        passage=rec.passage,
        question=rec.question,
        answer=rec.answer,
        label=rec.label,
    )


def export_prompts(rows: Sequence[dict]) -> List[dict]:
    """{id, prompt} records for rows produced by generate_split."""
    out = []
    for row in rows:
        if "id" not in row:
            raise MissingId("dataset row lacks an id")
        rec = _record_from_row(row)
        out.append({"id": row["id"], "prompt": emit_teacher_prompt(rec)})
    return out


def _record_from_row(row: dict) -> PromptedRecord:
    """Re-parse a dataset row's input text back into template fields."""
    lines = row["input"].split("\n")
    fields = {}
    for line in lines:
        for key in ("Passage", "Question", "Answer"):
            if line.startswith(key + ": "):
                fields[key] = line[len(key) + 2 :]
    return PromptedRecord(
        passage=fields.get("Passage", ""),
        question=fields.get("Question", ""),
        answer=fields.get("Answer", ""),
        reasoning=row.get("reasoning", ""),
        label=row["label"],
    )


def import_rationales(dataset_path, rationale_path) -> Tuple[List[Example], Dict[str, int]]:
    """Join teacher outputs back onto the dataset by shared id.

    Records whose teacher answer disagrees with the gold label are dropped
    (a disagreeing rationale cannot justify the gold label); ids present in
    only one file are counted as missing.
    """
    dataset = _load_jsonl(dataset_path)
    rationales = _load_jsonl(rationale_path)
    by_id = {}
    for rec in rationales:
        if "id" not in rec:
            raise MissingId(f"{rationale_path}: record lacks an id")
        by_id[rec["id"]] = rec

    examples: List[Example] = []
    report = {"joined": 0, "dropped": 0, "missing": 0}
    for row in dataset:
        if "id" not in row:
            raise MissingId(f"{dataset_path}: record lacks an id")
        teacher = by_id.get(row["id"])
        if teacher is None:
            report["missing"] += 1
            continue
        if teacher.get("answer") != row["label"]:
            report["dropped"] += 1
            continue
        joined = dict(row)
        joined["reasoning"] = teacher["reasoning"]
        examples.append(sequences.example_from_record(joined))
        report["joined"] += 1
    report["missing"] += len(set(by_id) - {row.get("id") for row in dataset})
    return examples, report


def _load_jsonl(path) -> List[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise sequences.MalformedLine(f"{path}:{lineno}: {e}") from e
    return rows


# ---------------------------------------------------------------------------
# independent oracles (kept here so tests and the import round-trip share them)


def parity_oracle(rec: PromptedRecord) -> str:
    """Re-derive the label of a parity record from passage + answer alone."""
    ones = rec.passage.count("1")
    true_word = "even" if ones % 2 == 0 else "odd"
    return "Yes" if rec.answer == true_word else "No"


def chain_oracle(rec: PromptedRecord) -> str:
    """Re-derive the label of a chain record by transitive closure."""
    facts = []
    for part in rec.passage.split("."):
        part = part.strip()
        if ">" in part:
            a, b = part.split(">")
            facts.append((a.strip(), b.strip()))
    x, y = (part.strip() for part in rec.answer.split(">"))
    return "Yes" if y in _closure_from(x, facts) else "No"


def answer_with_oracle(prompt_rows: Sequence[dict], spec: TaskSpec, split: str) -> List[dict]:
    """Play the teacher: answer exported prompts with the construction-time
    generator (same seed space), emitting {id, reasoning, answer} records."""
    base = replace(spec, seed=spec.seed + _SPLIT_OFFSET[split])
    out = []
    for row in prompt_rows:
        rec = generate_record(base, row["id"])
        out.append({"id": row["id"], "reasoning": rec.reasoning, "answer": rec.label})
    return out
