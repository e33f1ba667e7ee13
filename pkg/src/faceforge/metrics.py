"""Diversity metrics (distinct-1/2), corpus BLEU, and frequency-rank tables.

distinct-n divides the number of distinct n-grams by the total number of
generated tokens (not n-grams) for both orders, matching the usual d-1/d-2
convention for response diversity. BLEU is corpus-level BLEU-4 with uniform
weights, add-one smoothed n-gram precisions, and the standard brevity
penalty.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Hashable, Sequence

from .errors import MetricError, UsageError

Token = Hashable
Response = Sequence[Token]


@dataclass(frozen=True)
class MetricsReport:
    d1: float
    d2: float
    bleu: float
    total_tokens: int
    distinct_unigrams: int
    distinct_bigrams: int

    def as_text(self) -> str:
        return "\n".join(
            f"{k}={v}" for k, v in (
                ("d1", f"{self.d1:.6f}"),
                ("d2", f"{self.d2:.6f}"),
                ("bleu", f"{self.bleu:.6f}"),
                ("total_tokens", self.total_tokens),
                ("distinct_unigrams", self.distinct_unigrams),
                ("distinct_bigrams", self.distinct_bigrams),
            )
        ) + "\n"

    def as_record(self) -> str:
        return (f"d1={self.d1:.6f} d2={self.d2:.6f} bleu={self.bleu:.6f} "
                f"total_tokens={self.total_tokens} "
                f"distinct_unigrams={self.distinct_unigrams} "
                f"distinct_bigrams={self.distinct_bigrams}")


def _ngrams(tokens: Response, n: int):
    return (tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def distinct_n(responses: Sequence[Response], n: int) -> float:
    """Distinct n-grams across all responses over total token count."""
    if n < 1:
        raise ValueError("n must be >= 1")
    total = sum(len(r) for r in responses)
    if not responses or total == 0:
        raise MetricError("no tokens to compute distinct-n over")
    grams: set[tuple] = set()
    for resp in responses:
        grams.update(_ngrams(resp, n))
    return len(grams) / total


def metrics_report(responses: Sequence[Response],
                   references: Sequence[Response] | None = None) -> MetricsReport:
    """Bundle d-1, d-2, and (when references are given) BLEU."""
    total = sum(len(r) for r in responses)
    if not responses or total == 0:
        raise MetricError("no tokens to report metrics over")
    uni: set[tuple] = set()
    bi: set[tuple] = set()
    for resp in responses:
        uni.update(_ngrams(resp, 1))
        bi.update(_ngrams(resp, 2))
    b = bleu(responses, references) if references is not None else 0.0
    return MetricsReport(
        d1=len(uni) / total, d2=len(bi) / total, bleu=b,
        total_tokens=total, distinct_unigrams=len(uni), distinct_bigrams=len(bi),
    )


def bleu(hypotheses: Sequence[Response], references: Sequence[Response],
         max_order: int = 4) -> float:
    """Corpus-level BLEU with add-one smoothed modified precisions."""
    if len(hypotheses) != len(references):
        raise UsageError(
            f"{len(hypotheses)} hypotheses vs {len(references)} references"
        )
    if not hypotheses:
        raise UsageError("empty corpus")
    matches = [0] * max_order
    totals = [0] * max_order
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_order + 1):
            hyp_counts = Counter(_ngrams(hyp, n))
            ref_counts = Counter(_ngrams(ref, n))
            matches[n - 1] += sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
            totals[n - 1] += max(0, len(hyp) - n + 1)
    if hyp_len == 0:
        return 0.0
    log_precision = sum(
        math.log((m + 1) / (t + 1)) for m, t in zip(matches, totals)
    ) / max_order
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_precision)


@dataclass(frozen=True)
class RankRow:
    token: Token
    rank: int
    count: int
    percent: float


@dataclass(frozen=True)
class RankTable:
    """Tokens of a position class ordered by descending count."""

    mode: str
    rows: tuple[RankRow, ...]

    def format(self) -> str:
        lines = [f"# {self.mode}", f"{'token':<16}{'rank':>6}{'count':>8}{'%':>8}"]
        for r in self.rows:
            lines.append(f"{str(r.token):<16}{r.rank:>6}{r.count:>8}{r.percent:>8.1f}")
        return "\n".join(lines) + "\n"


def rank_table(responses: Sequence[Response], after: Token | None = None) -> RankTable:
    """Count leading tokens, or tokens immediately following `after`.

    Percentages are relative to the class total. An `after` token that never
    occurs yields an empty table.
    """
    if not responses:
        raise MetricError("no responses to rank")
    counts: Counter = Counter()
    if after is None:
        mode = "leading"
        for resp in responses:
            if len(resp) > 0:
                counts[resp[0]] += 1
    else:
        mode = f"after({after})"
        for resp in responses:
            for i, tok in enumerate(resp[:-1]):
                if tok == after:
                    counts[resp[i + 1]] += 1
    total = sum(counts.values())
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    rows = tuple(
        RankRow(token=tok, rank=i + 1, count=c, percent=100.0 * c / total)
        for i, (tok, c) in enumerate(ordered)
    )
    return RankTable(mode=mode, rows=rows)
