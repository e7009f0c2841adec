"""Evaluation kernels: corpus and sentence BLEU with multiple references,
ROUGE-1/2/L (F1, best reference) and micro-F1 over label sets.

All functions take pre-tokenized input (lists of strings). Corpus BLEU is the
unsmoothed reporting metric; :func:`sentence_bleu` adds add-one smoothing on
orders >= 2 and exists only to produce reward signals.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, fields
from typing import Hashable, Sequence

from .errors import ContractError

Tokens = Sequence[str]


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# F1
# ---------------------------------------------------------------------------


def micro_f1(predictions: Sequence[set], golds: Sequence[set]) -> float:
    if len(predictions) != len(golds):
        raise ContractError(f"micro_f1: {len(predictions)} predictions vs {len(golds)} golds")
    tp = fp = fn = 0
    for p, g in zip(predictions, golds):
        p, g = set(p), set(g)
        tp += len(p & g)
        fp += len(p - g)
        fn += len(g - p)
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    return 2 * prec * rec / (prec + rec) if prec + rec else 0.0


def sample_f1(prediction: set[Hashable], gold: set[Hashable]) -> float:
    """F1 of a single prediction; two empty sets score 1."""
    prediction, gold = set(prediction), set(gold)
    denom = 2 * len(prediction & gold) + len(prediction ^ gold)
    return 1.0 if denom == 0 else 2 * len(prediction & gold) / denom


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------


def _check_refs(refs: Sequence[Tokens]) -> None:
    if len(refs) == 0:
        raise ContractError("empty reference set")


def _clipped(hyp: Tokens, refs: Sequence[Tokens], n: int) -> tuple[int, int]:
    counts = ngrams(hyp, n)
    max_ref: Counter = Counter()
    for r in refs:
        for g, c in ngrams(r, n).items():
            if c > max_ref[g]:
                max_ref[g] = c
    matched = sum(min(c, max_ref[g]) for g, c in counts.items())
    return matched, sum(counts.values())


def closest_ref_length(hyp_len: int, refs: Sequence[Tokens]) -> int:
    """Reference length closest to ``hyp_len``; ties go to the shorter one."""
    return min((abs(len(r) - hyp_len), len(r)) for r in refs)[1]


def _brevity(c: int, r: int) -> float:
    if c == 0:
        return 0.0
    return 1.0 if c > r else math.exp(1.0 - r / c)


def _combine(matches: list[int], totals: list[int], smooth: bool) -> float:
    logs = []
    for n, (m, t) in enumerate(zip(matches, totals), start=1):
        if smooth and n > 1:
            m, t = m + 1, t + 1
        if t == 0:
            continue  # no n-grams of this order in the hypotheses
        if m == 0:
            return 0.0
        logs.append(math.log(m / t))
    if not logs:
        return 0.0
    return math.exp(sum(logs) / len(logs))


def bleu(hypotheses: Sequence[Tokens], reference_sets: Sequence[Sequence[Tokens]], max_n: int = 4) -> float:
    """Corpus BLEU: pooled clipped n-gram precisions, geometric mean over
    orders 1..max_n, closest-reference brevity penalty. No smoothing."""
    if len(hypotheses) != len(reference_sets):
        raise ContractError("bleu: one reference set per hypothesis is required")
    matches, totals = [0] * max_n, [0] * max_n
    c = r = 0
    for hyp, refs in zip(hypotheses, reference_sets):
        _check_refs(refs)
        for n in range(1, max_n + 1):
            m, t = _clipped(hyp, refs, n)
            matches[n - 1] += m
            totals[n - 1] += t
        c += len(hyp)
        r += closest_ref_length(len(hyp), refs)
    return _brevity(c, r) * _combine(matches, totals, smooth=False)


def sentence_bleu(hypothesis: Tokens, references: Sequence[Tokens], max_n: int = 4) -> float:
    """Sentence BLEU with add-one smoothing on orders >= 2 (reward use only)."""
    _check_refs(references)
    matches, totals = [], []
    for n in range(1, max_n + 1):
        m, t = _clipped(hypothesis, references, n)
        matches.append(m)
        totals.append(t)
    bp = _brevity(len(hypothesis), closest_ref_length(len(hypothesis), references))
    return bp * _combine(matches, totals, smooth=True)


# ---------------------------------------------------------------------------
# ROUGE
# ---------------------------------------------------------------------------


def _f1(overlap: int, hyp_total: int, ref_total: int) -> float:
    if overlap == 0:
        return 0.0
    p, r = overlap / hyp_total, overlap / ref_total
    return 2 * p * r / (p + r)


def _rouge_n_single(hyp: Tokens, ref: Tokens, n: int) -> float:
    h, r = ngrams(hyp, n), ngrams(ref, n)
    if not h or not r:
        return 1.0 if list(hyp) == list(ref) else 0.0
    overlap = sum((h & r).values())
    return _f1(overlap, sum(h.values()), sum(r.values()))


def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def _rouge_l_single(hyp: Tokens, ref: Tokens) -> float:
    if not hyp or not ref:
        return 1.0 if list(hyp) == list(ref) else 0.0
    return _f1(lcs_length(hyp, ref), len(hyp), len(ref))


def rouge_n(hypothesis: Tokens, reference_set: Sequence[Tokens], n: int) -> float:
    """Best-reference ROUGE-N F1."""
    _check_refs(reference_set)
    return max(_rouge_n_single(hypothesis, r, n) for r in reference_set)


def rouge_l(hypothesis: Tokens, reference_set: Sequence[Tokens]) -> float:
    """Best-reference LCS-based F1."""
    _check_refs(reference_set)
    return max(_rouge_l_single(hypothesis, r) for r in reference_set)


def corpus_rouge(hypotheses: Sequence[Tokens], reference_sets: Sequence[Sequence[Tokens]]) -> dict[str, float]:
    if len(hypotheses) != len(reference_sets):
        raise ContractError("rouge: one reference set per hypothesis is required")
    if not hypotheses:
        return {"rouge_1": 0.0, "rouge_2": 0.0, "rouge_l": 0.0}
    k = len(hypotheses)
    return {
        "rouge_1": sum(rouge_n(h, r, 1) for h, r in zip(hypotheses, reference_sets)) / k,
        "rouge_2": sum(rouge_n(h, r, 2) for h, r in zip(hypotheses, reference_sets)) / k,
        "rouge_l": sum(rouge_l(h, r) for h, r in zip(hypotheses, reference_sets)) / k,
    }


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("micro_f1", "bleu", "rouge_1", "rouge_2", "rouge_l")
COLUMN_TITLES = {"micro_f1": "Micro-F1", "bleu": "BLEU", "rouge_1": "ROUGE-1",
                 "rouge_2": "ROUGE-2", "rouge_l": "ROUGE-L"}


@dataclass
class EvalReport:
    micro_f1: float
    bleu: float
    rouge_1: float
    rouge_2: float
    rouge_l: float
    nlu_samples: int = 0
    nlg_samples: int = 0

    def __post_init__(self):
        for name in REPORT_COLUMNS:
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"EvalReport.{name} = {v} outside [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def to_text(self) -> str:
        return "".join(f"{k} = {v!r}\n" for k, v in self.to_dict().items())

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        d = {}
        for line in text.splitlines():
            if "=" in line:
                k, v = (s.strip() for s in line.split("=", 1))
                d[k] = int(v) if k.endswith("samples") else float(v)
        return cls.from_dict(d)
