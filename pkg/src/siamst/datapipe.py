"""Text normalization and corpus filtering for speech-translation data."""

from __future__ import annotations

import json
import logging
import math
import re
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .ctc import CHARACTERS
from .errors import CalibrationInfeasibleError, ConfigurationError, DataError

logger = logging.getLogger(__name__)

TARGET_CORPUS_WER = 0.11
ST_WER_THRESHOLD = 0.5
MIN_CHARACTERS = 4
LENGTH_RATIO_BOUNDS = (0.5, 2.0)
TFIDF_THRESHOLD = 0.8


@dataclass
class ParallelExample:
    id: str
    talk_id: str = ""
    duration: float | None = None
    transcript: str = ""
    translation: str = ""
    features: str | None = None  # path to a matrix file, relative to the manifest
    source_tag: str = ""
    synthetic: bool = False
    asr_hypothesis: str | None = None

    def __post_init__(self):
        if self.duration is not None and not self.duration > 0:
            raise DataError(f"example {self.id}: duration must be > 0")

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, record: dict) -> "ParallelExample":
        unknown = set(record) - set(cls.__dataclass_fields__)
        if unknown:
            raise DataError(f"unknown manifest fields: {sorted(unknown)}")
        if "id" not in record:
            raise DataError("manifest record without id")
        return cls(**record)


# ---------------------------------------------------------------------------
# number spelling

_ONES = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
         "ten", "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen",
         "seventeen", "eighteen", "nineteen"]
_TENS = ["", "", "twenty", "thirty", "forty", "fifty", "sixty", "seventy", "eighty", "ninety"]


def _below_thousand(n: int) -> list[str]:
    words = []
    if n >= 100:
        words += [_ONES[n // 100], "hundred"]
        n %= 100
        if n == 0:
            return words
    if n < 20:
        words.append(_ONES[n])
    elif n % 10:
        words.append(f"{_TENS[n // 10]}-{_ONES[n % 10]}")
    else:
        words.append(_TENS[n // 10])
    return words


_SCALES = [(10 ** 9, "billion"), (10 ** 6, "million"), (10 ** 3, "thousand")]
SPELL_LIMIT = 10 ** 12 - 1


def spell_number(n: int) -> str:
    """English cardinal for 0 <= n < 10**12, e.g. 1996 -> 'one thousand nine hundred ninety-six'."""
    if not 0 <= n <= SPELL_LIMIT:
        raise ValueError(f"{n} outside 0..{SPELL_LIMIT}")
    if n < 1000:
        return " ".join(_below_thousand(n))
    words = []
    for scale, name in _SCALES:
        count, n = divmod(n, scale)
        if count:
            words += _below_thousand(count) + [name]
    if n:
        words += _below_thousand(n)
    return " ".join(words)


# ---------------------------------------------------------------------------
# normalization

_EVENT_TAG = re.compile(r"\([^)]*\)|\[[^\]]*\]")
_SPEAKER = re.compile(r"^\s*(?:[A-Z][\w.'-]*\s+){0,2}[A-Z][\w.'-]*\s*:\s*")
_INTEGER = re.compile(r"(?<![\w.])\d+(?!\w|\.\d)")
_DECIMAL = re.compile(r"(?<![\w.])(\d+)\.(\d+)(?!\w|\.\d)")
_DIGIT = re.compile(r"\d")
_THOUSANDS_SEP = re.compile(r"(?<=\d),(?=\d{3}(?!\d))")
_ALLOWED = set(CHARACTERS) | {"-"}
_QUOTES = str.maketrans({"“": '"', "”": '"', "‘": "'", "’": "'",
                         "–": "-", "—": "-", " ": " "})


def _spell_match(m: re.Match) -> str:
    digits = m.group(0)
    value = int(digits)
    if value <= SPELL_LIMIT and not (len(digits) > 1 and digits[0] == "0"):
        return spell_number(value)
    # very long numbers and zero-padded codes are read digit by digit
    return _digit_by_digit(digits)


def _digit_by_digit(digits: str) -> str:
    return " ".join(_ONES[int(d)] for d in digits)


def _spell_decimal(m: re.Match) -> str:
    whole = _spell_match(re.match(r"\d+", m.group(1)))
    return f"{whole} point {_digit_by_digit(m.group(2))}"


def normalize_text(text: str, mode: str = "asr") -> str:
    """Clean a transcript (``mode="asr"``) or a translation (``mode="mt"``).

    ASR mode removes event tags and leading speaker labels, spells out
    integers, lowercases and drops characters outside the CTC alphabet.
    Hyphens inside words survive so spelled numbers read naturally; use
    :func:`ctc_text` before building CTC targets.
    """
    if mode == "mt":
        text = text.translate(_QUOTES)
        text = re.sub(r"\s+([,.;:!?])", r"\1", text)
        return re.sub(r"\s+", " ", text).strip()
    if mode != "asr":
        raise ConfigurationError(f"unknown normalization mode {mode!r}")
    text = _EVENT_TAG.sub(" ", text.translate(_QUOTES))
    lines = [_SPEAKER.sub("", line) for line in text.splitlines()]
    text = " ".join(lines)
    text = _DECIMAL.sub(_spell_decimal, _THOUSANDS_SEP.sub("", text))
    text = _INTEGER.sub(_spell_match, text)
    # digits glued to letters ("1st", "mp3") are read one by one rather than dropped
    text = _DIGIT.sub(lambda m: f" {_ONES[int(m.group(0))]} ", text).lower()
    text = "".join(c if c in _ALLOWED else " " if c.isspace() else "" for c in text)
    text = re.sub(r"(?<![a-z'])-|-(?![a-z'])", " ", text)
    return re.sub(r"\s+", " ", text).strip()


def ctc_text(text: str) -> str:
    """Map normalized text onto the CTC alphabet (hyphens become spaces)."""
    return re.sub(r"\s+", " ", text.replace("-", " ")).strip()


# ---------------------------------------------------------------------------
# WER


def word_edit_distance(reference: Sequence[str], hypothesis: Sequence[str]) -> int:
    """Levenshtein distance over tokens with unit substitution/insertion/deletion costs."""
    prev = list(range(len(hypothesis) + 1))
    for i, r in enumerate(reference, start=1):
        cur = [i] + [0] * len(hypothesis)
        for j, h in enumerate(hypothesis, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(reference: str, hypothesis: str) -> float:
    ref = reference.split()
    if not ref:
        raise DataError("WER undefined for an empty reference")
    return word_edit_distance(ref, hypothesis.split()) / len(ref)


def corpus_wer(edits: Sequence[int], ref_lengths: Sequence[int]) -> float:
    total = int(np.sum(ref_lengths))
    if total == 0:
        raise DataError("corpus WER undefined for empty references")
    return float(np.sum(edits)) / total


def calibrate_wer_threshold(edits: Sequence[int], ref_lengths: Sequence[int],
                            target: float = TARGET_CORPUS_WER) -> float:
    """Largest per-example WER cut-off whose kept subset has corpus WER <= ``target``.

    Candidates are the distinct per-example WER values.  Keeping every
    example with WER <= t only ever adds examples whose WER is at least the
    current corpus WER, so corpus WER is non-decreasing in t and the sweep
    can stop at the first violation.
    """
    if not 0 < target <= 1:
        raise ConfigurationError(f"target corpus WER must lie in (0, 1], got {target}")
    edits = np.asarray(edits, dtype=np.int64)
    ref_lengths = np.asarray(ref_lengths, dtype=np.int64)
    if edits.size == 0 or np.any(ref_lengths <= 0):
        raise DataError("calibration needs examples with non-empty references")
    per_example = edits / ref_lengths
    if corpus_wer(edits, ref_lengths) <= target:
        return max(1.0, float(per_example.max()))
    order = np.argsort(per_example, kind="stable")
    sorted_wer = per_example[order]
    cum_edits = np.cumsum(edits[order])
    cum_words = np.cumsum(ref_lengths[order])
    # last index of each distinct WER value
    ends = np.flatnonzero(np.append(sorted_wer[1:] != sorted_wer[:-1], True))
    best = None
    for end in ends:
        if cum_edits[end] / cum_words[end] <= target:
            best = float(sorted_wer[end])
        else:
            break
    if best is None:
        raise CalibrationInfeasibleError(
            f"even the cleanest examples have corpus WER above {target}"
        )
    return best


# ---------------------------------------------------------------------------
# reports


@dataclass
class FilterReport:
    input_count: int = 0
    kept_count: int = 0
    removed: dict = field(default_factory=dict)
    corpus_wer_before: float | None = None
    corpus_wer_after: float | None = None
    thresholds: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def reconciles(self) -> bool:
        return self.kept_count + sum(self.removed.values()) == self.input_count

    def merge(self, other: "FilterReport") -> "FilterReport":
        """Chain a later stage whose input is this stage's output."""
        removed = Counter(self.removed)
        removed.update(other.removed)
        return FilterReport(
            self.input_count, other.kept_count, dict(removed),
            self.corpus_wer_before if self.corpus_wer_before is not None else other.corpus_wer_before,
            other.corpus_wer_after if other.corpus_wer_after is not None else self.corpus_wer_after,
            {**self.thresholds, **other.thresholds}, self.warnings + other.warnings,
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"input examples:  {self.input_count}", f"kept examples:   {self.kept_count}"]
        for rule, count in sorted(self.removed.items()):
            lines.append(f"removed by {rule}: {count}")
        if self.corpus_wer_before is not None:
            lines.append(f"corpus WER before: {self.corpus_wer_before:.4f}")
        if self.corpus_wer_after is not None:
            lines.append(f"corpus WER after:  {self.corpus_wer_after:.4f}")
        for name, value in sorted(self.thresholds.items()):
            lines.append(f"threshold {name}: {value}")
        lines += [f"warning: {w}" for w in self.warnings]
        return "\n".join(lines) + "\n"


def _example_edits(ex: ParallelExample, hyp: str) -> tuple[int, int]:
    """Word edits and reference length after normalizing both sides."""
    ref = normalize_text(ex.transcript).split()
    if not ref:
        raise DataError(f"example {ex.id}: empty transcript, WER undefined")
    return word_edit_distance(ref, normalize_text(hyp).split()), len(ref)


def _edits_and_lengths(examples, hypotheses, jobs: int = 1):
    pairs = list(zip(examples, hypotheses))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda p: _example_edits(*p), pairs))
    else:
        results = [_example_edits(ex, hyp) for ex, hyp in pairs]
    return [e for e, _ in results], [n for _, n in results]


def _hypotheses_for(examples, hypotheses):
    if hypotheses is not None:
        hypotheses = list(hypotheses)
        if len(hypotheses) != len(examples):
            raise DataError("one ASR hypothesis per example required")
        return hypotheses
    hyps = [ex.asr_hypothesis for ex in examples]
    if any(h is None for h in hyps):
        return None
    return hyps


def filter_siamese(examples: Sequence[ParallelExample], hypotheses=None,
                   target_wer: float = TARGET_CORPUS_WER, jobs: int = 1):
    """Calibrate a WER threshold for this dataset and drop examples above it.

    WER is computed on normalized transcripts and hypotheses.
    """
    examples = list(examples)
    hyps = _hypotheses_for(examples, hypotheses)
    if hyps is None:
        raise DataError("siamese filtering needs an ASR hypothesis for every example")
    edits, lengths = _edits_and_lengths(examples, hyps, jobs)
    threshold = calibrate_wer_threshold(edits, lengths, target_wer)
    keep = [e / n <= threshold for e, n in zip(edits, lengths)]
    kept = [ex for ex, k in zip(examples, keep) if k]
    kept_edits = [e for e, k in zip(edits, keep) if k]
    kept_lengths = [n for n, k in zip(lengths, keep) if k]
    report = FilterReport(
        len(examples), len(kept), {"wer": len(examples) - len(kept)},
        corpus_wer(edits, lengths), corpus_wer(kept_edits, kept_lengths),
        {"wer": threshold, "target_corpus_wer": target_wer},
    )
    return kept, report


def filter_st(examples: Sequence[ParallelExample], hypotheses=None,
              wer_threshold: float = ST_WER_THRESHOLD, min_chars: int = MIN_CHARACTERS,
              ratio_bounds: tuple[float, float] = LENGTH_RATIO_BOUNDS):
    """Length, length-ratio and fixed-threshold WER filtering (all bounds inclusive).

    Each removed example is attributed to the first rule it fails.  Corpus
    WER before/after covers the examples that reached the WER rule.
    """
    examples = list(examples)
    hyps = _hypotheses_for(examples, hypotheses)
    lo, hi = ratio_bounds
    removed = Counter({"too_short": 0, "length_ratio": 0, "wer": 0})
    kept, kept_hyps, all_edits, all_lengths = [], [], [], []
    for i, ex in enumerate(examples):
        src, tgt = ex.transcript.strip(), ex.translation.strip()
        if len(src) < min_chars or len(tgt) < min_chars:
            removed["too_short"] += 1
            continue
        ratio = len(src) / len(tgt)
        if not lo <= ratio <= hi:
            removed["length_ratio"] += 1
            continue
        if hyps is not None:
            edits, n_ref = _example_edits(ex, hyps[i])
            all_edits.append(edits)
            all_lengths.append(n_ref)
            if edits / n_ref > wer_threshold:
                removed["wer"] += 1
                continue
            kept_hyps.append((edits, n_ref))
        kept.append(ex)
    report = FilterReport(len(examples), len(kept), dict(removed),
                          thresholds={"wer": wer_threshold, "min_chars": min_chars,
                                      "ratio_min": lo, "ratio_max": hi})
    if hyps is not None and all_lengths:
        report.corpus_wer_before = corpus_wer(all_edits, all_lengths)
        if kept_hyps:
            e, n = zip(*kept_hyps)
            report.corpus_wer_after = corpus_wer(e, n)
    return kept, report


# ---------------------------------------------------------------------------
# TF-IDF near-duplicate filtering


class TalkTfidf:
    """TF-IDF space fitted on one talk's original translations.

    ``idf(t) = ln((1 + N) / (1 + df(t))) + 1`` where ``N`` is the number of
    originals and ``df`` counts originals containing ``t``; candidate-only
    terms get ``df = 0``.
    """

    def __init__(self, documents: Iterable[str]):
        docs = [d.lower().split() for d in documents]
        self.n_documents = len(docs)
        self.df = Counter(t for d in docs for t in set(d))

    def idf(self, term: str) -> float:
        return math.log((1 + self.n_documents) / (1 + self.df.get(term, 0))) + 1.0

    def vector(self, text: str) -> dict:
        tf = Counter(text.lower().split())
        return {t: c * self.idf(t) for t, c in tf.items()}

    @staticmethod
    def cosine(u: dict, v: dict) -> float:
        if len(u) > len(v):
            u, v = v, u
        dot = sum(w * v.get(t, 0.0) for t, w in u.items())
        nu = math.sqrt(sum(w * w for w in u.values()))
        nv = math.sqrt(sum(w * w for w in v.values()))
        return dot / (nu * nv) if nu and nv else 0.0


def tfidf_filter(originals: Sequence[ParallelExample], candidates: Sequence[ParallelExample],
                 threshold: float = TFIDF_THRESHOLD):
    """Keep candidates whose best TF-IDF cosine to their talk's pool is below ``threshold``.

    The pool starts as the talk's originals and grows with every kept
    candidate, so later candidate versions are also deduplicated against
    earlier ones.
    """
    by_talk = defaultdict(list)
    for ex in originals:
        by_talk[ex.talk_id].append(ex.translation)
    spaces = {talk: TalkTfidf(texts) for talk, texts in by_talk.items()}
    pools = {talk: [spaces[talk].vector(t) for t in texts] for talk, texts in by_talk.items()}

    kept = []
    report = FilterReport(len(candidates), thresholds={"tfidf": threshold})
    duplicates = 0
    for cand in candidates:
        space = spaces.get(cand.talk_id)
        if space is None:
            msg = f"candidate {cand.id}: talk {cand.talk_id!r} has no originals, kept unchecked"
            logger.warning(msg)
            report.warnings.append(msg)
            kept.append(cand)
            continue
        vec = space.vector(cand.translation)
        best = max((TalkTfidf.cosine(vec, other) for other in pools[cand.talk_id]), default=0.0)
        if best < threshold:
            kept.append(cand)
            pools[cand.talk_id].append(vec)
        else:
            duplicates += 1
    report.kept_count = len(kept)
    report.removed = {"tfidf_duplicate": duplicates}
    return kept, report
