"""Corpus-level BLEU."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field

from .errors import DataError

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercase, split punctuation off words, split on whitespace."""
    return _TOKEN_RE.findall(text.lower())


def ngram_counts(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


@dataclass
class BleuScore:
    score: float
    precisions: list[float]
    brevity_penalty: float
    hyp_length: int
    ref_length: int
    matches: list[int] = field(default_factory=list)
    totals: list[int] = field(default_factory=list)
    zero_length: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    def __str__(self):
        ps = "/".join(f"{100 * p:.1f}" for p in self.precisions)
        return (f"BLEU = {self.score:.2f} {ps} (BP = {self.brevity_penalty:.3f} "
                f"hyp_len = {self.hyp_length} ref_len = {self.ref_length})")


def corpus_bleu(hypotheses, references, max_n: int = 4, smoothing: str = "none",
                k: float = 0.1) -> BleuScore:
    """BLEU from clipped n-gram counts pooled over the corpus.

    ``smoothing="add-k"`` adds ``k`` to matches and totals for n >= 2.
    """
    hypotheses, references = list(hypotheses), list(references)
    if len(hypotheses) != len(references):
        raise DataError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise DataError("corpus_bleu needs at least one sentence pair")
    if smoothing not in ("none", "add-k"):
        raise DataError(f"unknown smoothing {smoothing!r}")

    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h, r = tokenize(hyp), tokenize(ref)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc, rc = ngram_counts(h, n), ngram_counts(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)

    if hyp_len == 0:
        return BleuScore(0.0, [0.0] * max_n, 0.0, 0, ref_len, matches, totals, zero_length=True)

    precisions = []
    for n, (m, t) in enumerate(zip(matches, totals), start=1):
        if smoothing == "add-k" and n >= 2:
            precisions.append((m + k) / (t + k))
        else:
            precisions.append(m / t if t else 0.0)
    bp = min(1.0, math.exp(1.0 - ref_len / hyp_len))
    if min(precisions) <= 0.0:
        score = 0.0
    else:
        score = 100.0 * (bp * math.exp(math.fsum(math.log(p) for p in precisions) / max_n))
    return BleuScore(score, precisions, bp, hyp_len, ref_len, matches, totals)
