"""Detection and text metrics: AUROC, yes/no detection scores, ROUGE-L."""
from __future__ import annotations

import re
from dataclasses import asdict, dataclass
from typing import Protocol, Sequence

import numpy as np

_YES = re.compile(r"\bYes\b")


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their mean rank."""
    _, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
    upper = np.cumsum(counts)
    mean_rank = upper - (counts - 1) / 2.0
    return mean_rank[inverse]


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Probability that a random positive outranks a random negative (ties count one half).

    Rank-sum (Mann-Whitney) form.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-D arrays of equal length")
    if not np.all(np.isin(y, (0, 1))):
        raise ValueError("labels must be 0 or 1")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs at least one positive and one negative sample")
    ranks = _average_ranks(s)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def says_yes(answer: str) -> bool:
    return _YES.search(answer) is not None


@dataclass(frozen=True)
class DetectionMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int
    undefined: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["undefined"] = list(self.undefined)
        return d


def metrics_from_counts(tp: int, fp: int, fn: int, tn: int) -> DetectionMetrics:
    undefined = []

    def ratio(num, den, name):
        if den == 0:
            undefined.append(name)
            return 0.0
        return num / den

    n = tp + fp + fn + tn
    acc = ratio(tp + tn, n, "accuracy")
    prec = ratio(tp, tp + fp, "precision")
    rec = ratio(tp, tp + fn, "recall")
    f1 = ratio(2 * prec * rec, prec + rec, "f1")
    return DetectionMetrics(acc, prec, rec, f1, tp, fp, fn, tn, tuple(undefined))


def detection_metrics(answers: Sequence[str], labels: Sequence[int]) -> DetectionMetrics:
    """An answer counts as a positive prediction iff it contains the standalone word ``Yes``."""
    if len(answers) != len(labels):
        raise ValueError("answers and labels differ in length")
    tp = fp = fn = tn = 0
    for a, y in zip(answers, labels):
        pred = says_yes(a)
        if pred and y == 1:
            tp += 1
        elif pred:
            fp += 1
        elif y == 1:
            fn += 1
        else:
            tn += 1
    return metrics_from_counts(tp, fp, fn, tn)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str) -> float:
    """ROUGE-L F1 over lowercased whitespace tokens."""
    c = candidate.lower().split()
    r = reference.lower().split()
    lcs = lcs_length(c, r)
    if lcs == 0:
        return 0.0
    p = lcs / len(c)
    rec = lcs / len(r)
    return 2 * p * rec / (p + rec)


class ExternalJudge(Protocol):
    """Model-based text similarity (sentence embeddings, LLM grading).  Not computed here."""

    name: str

    def score(self, candidate: str, reference: str) -> float | None: ...


class NullJudge:
    name = "null"

    def score(self, candidate: str, reference: str) -> float | None:
        return None
