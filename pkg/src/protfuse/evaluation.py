"""Scoring of generated answers: ROUGE-L, critical-part extraction, label parsing.

ROUGE-L uses the balanced F-measure over an LCS of whitespace tokens after
lowercasing; punctuation is stripped except characters that occur inside
chemical formulas (alphanumerics, parentheses, and +/-/= signs survive).
That F1 choice shifts absolute scores relative to recall-weighted variants
and is therefore called out in the README.
"""

from __future__ import annotations

import json
import re
import statistics
from dataclasses import dataclass
from importlib import resources

from .instruction_data import (FOLD_NUM_CLASSES, LABEL_WORDS, PROPERTY_TASKS)

# Tasks whose references contain extractable critical spans; every part of a
# protein-function answer is critical, so that task is exempt.
CRITICAL_TASKS = ("catalytic_activity", "domain_motif", "functional_description")

_TOKEN_KEEP = re.compile(r"[^a-z0-9()+=\-]")
_FOLD_INT = re.compile(r"\b\d+\b")


class UnsupportedTaskError(ValueError):
    pass


class _Unparseable:
    """Sentinel for generated answers that match no label keyword."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "UNPARSEABLE"


UNPARSEABLE = _Unparseable()


@dataclass
class EvalReport:
    task_tag: str
    metric: str
    per_seed: tuple[float, ...]
    mean: float
    std: float
    num_examples: int

    def to_dict(self) -> dict:
        return {
            "task_tag": self.task_tag,
            "metric": self.metric,
            "per_seed": list(self.per_seed),
            "mean": self.mean,
            "std": self.std,
            "num_examples": self.num_examples,
        }


def tokenize_for_rouge(text: str) -> list[str]:
    tokens = []
    for raw in text.lower().split():
        tok = _TOKEN_KEEP.sub("", raw)
        if tok:
            tokens.append(tok)
    return tokens


def lcs_length(a: list[str], b: list[str]) -> int:
    """Longest common subsequence length by dynamic programming."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            if x == y:
                cur.append(prev[j - 1] + 1)
            else:
                cur.append(max(prev[j], cur[j - 1]))
        prev = cur
    return prev[len(b)]


def rouge_l(reference: str, hypothesis: str) -> float:
    """Balanced LCS F-measure in [0, 1]; both empty -> 1.0, exactly one empty -> 0.0."""
    ref = tokenize_for_rouge(reference)
    hyp = tokenize_for_rouge(hypothesis)
    if not ref and not hyp:
        return 1.0
    if not ref or not hyp:
        return 0.0
    lcs = lcs_length(ref, hyp)
    if lcs == 0:
        return 0.0
    precision = lcs / len(hyp)
    recall = lcs / len(ref)
    return 2 * precision * recall / (precision + recall)


_critical_rules_cache: dict[str, list[re.Pattern]] | None = None


def _critical_rules() -> dict[str, list[re.Pattern]]:
    global _critical_rules_cache
    if _critical_rules_cache is None:
        with resources.files("protfuse.data").joinpath("critical_rules.json").open(
                "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        _critical_rules_cache = {
            task: [re.compile(p) for p in patterns] for task, patterns in raw.items()
        }
    return _critical_rules_cache


def extract_critical(text: str, task_tag: str) -> str:
    """Keep only the task's critical spans (reactions, domain phrases, function clauses).

    Rules ship as editable regex data; text matching no rule reduces to "".
    """
    rules = _critical_rules()
    if task_tag not in rules:
        raise UnsupportedTaskError(
            f"critical-part extraction does not apply to task {task_tag!r}"
        )
    spans: list[tuple[int, str]] = []
    for pattern in rules[task_tag]:
        for m in pattern.finditer(text):
            spans.append((m.start(), m.group(0).strip()))
    spans.sort(key=lambda s: s[0])
    return " ".join(s for _, s in spans)


def parse_classification(answer: str, task_tag: str):
    """Scan a generated answer for the task's label keywords.

    The earliest match in the text wins (longer keyword on a tie at the same
    position). Fold answers parse as the first standalone integer within the
    class range. Returns UNPARSEABLE when nothing matches.
    """
    if task_tag not in PROPERTY_TASKS:
        raise UnsupportedTaskError(f"{task_tag!r} is not a classification task")
    text = answer.lower()
    if task_tag == "fold":
        for m in _FOLD_INT.finditer(text):
            value = int(m.group(0))
            if value < FOLD_NUM_CLASSES:
                return value
        return UNPARSEABLE
    best: tuple[int, int, str] | None = None
    for word in LABEL_WORDS[task_tag]:
        pos = text.find(word)
        if pos < 0:
            continue
        key = (pos, -len(word))
        if best is None or key < best[:2]:
            best = (pos, -len(word), word)
    return best[2] if best else UNPARSEABLE


def accuracy(predictions: list, golds: list) -> float:
    """Fraction of exact matches; UNPARSEABLE predictions count as incorrect."""
    if len(predictions) != len(golds):
        raise ValueError(f"{len(predictions)} predictions vs {len(golds)} golds")
    if not golds:
        raise ValueError("cannot compute accuracy of an empty set")
    correct = sum(
        1 for p, g in zip(predictions, golds) if p is not UNPARSEABLE and p == g
    )
    return correct / len(golds)


def aggregate_runs(per_seed_scores: list[float], task_tag: str = "", metric: str = "",
                   num_examples: int = 0, expected_runs: int = 3) -> EvalReport:
    """Mean and population standard deviation over per-seed scores (3 by default)."""
    if expected_runs is not None and len(per_seed_scores) != expected_runs:
        raise ValueError(f"expected {expected_runs} per-seed scores, got {len(per_seed_scores)}")
    mean = sum(per_seed_scores) / len(per_seed_scores)
    std = statistics.pstdev(per_seed_scores)
    return EvalReport(
        task_tag=task_tag,
        metric=metric,
        per_seed=tuple(per_seed_scores),
        mean=mean,
        std=std,
        num_examples=num_examples,
    )
