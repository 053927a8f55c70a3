"""Exact ROUGE-1/2/L on token-id sequences (no stemming, no casing rules)."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

from .model import EOS, BOS, PAD


class MetricKind(str, Enum):
    ROUGE1 = "rouge1"
    ROUGE2 = "rouge2"
    ROUGEL = "rougeL"
    MEAN = "mean"


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float


ZERO = RougeScore(0.0, 0.0, 0.0)


def _score(overlap: int, n_cand: int, n_ref: int) -> RougeScore:
    if n_cand == 0 or n_ref == 0 or overlap == 0:
        return ZERO
    p = overlap / n_cand
    r = overlap / n_ref
    return RougeScore(p, r, 2 * p * r / (p + r))


def ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate: Sequence, reference: Sequence, n: int) -> RougeScore:
    if n not in (1, 2):
        raise ValueError(f"rouge_n supports n=1 or n=2, got {n}")
    c, r = ngrams(candidate, n), ngrams(reference, n)
    overlap = sum((c & r).values())
    return _score(overlap, sum(c.values()), sum(r.values()))


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence, reference: Sequence) -> RougeScore:
    return _score(lcs_length(candidate, reference), len(candidate), len(reference))


def _content(seq) -> tuple:
    return tuple(t for t in seq if t not in (PAD, BOS, EOS))


def eval_score(candidate: Sequence, gold: Sequence, kind: MetricKind | str = MetricKind.MEAN) -> float:
    """F1 of the chosen variant; ``mean`` averages ROUGE-1, ROUGE-2 and ROUGE-L.

    Reserved ids (pad/bos/eos) are stripped first, so decoder output can be
    passed directly.
    """
    kind = MetricKind(kind)
    c, g = _content(candidate), _content(gold)
    if kind is MetricKind.ROUGE1:
        return rouge_n(c, g, 1).f1
    if kind is MetricKind.ROUGE2:
        return rouge_n(c, g, 2).f1
    if kind is MetricKind.ROUGEL:
        return rouge_l(c, g).f1
    return (rouge_n(c, g, 1).f1 + rouge_n(c, g, 2).f1 + rouge_l(c, g).f1) / 3
