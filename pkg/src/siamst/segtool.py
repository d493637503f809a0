"""Length-constrained divide-and-conquer segmentation and the (min, max) sweep."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, DataError

_TOL = 1e-9


@dataclass(frozen=True)
class SegmentationParams:
    min_length: float
    max_length: float

    def __post_init__(self):
        if not 0 < self.min_length <= self.max_length:
            raise ConfigurationError(
                f"need 0 < min_length <= max_length, got ({self.min_length}, {self.max_length})"
            )


@dataclass
class ProbabilityTrack:
    """Per-frame speech probabilities sampled at ``frame_rate`` frames/second."""

    probabilities: np.ndarray
    frame_rate: float

    def __post_init__(self):
        self.probabilities = np.asarray(self.probabilities, dtype=np.float64).reshape(-1)
        if self.probabilities.size == 0:
            raise DataError("probability track is empty")
        if self.frame_rate <= 0:
            raise DataError("frame_rate must be positive")
        if np.any((self.probabilities < 0) | (self.probabilities > 1)):
            raise DataError("probabilities must lie in [0, 1]")

    @property
    def frames(self) -> int:
        return self.probabilities.size

    @property
    def total_duration(self) -> float:
        return self.frames / self.frame_rate


@dataclass
class Segmentation:
    intervals: list[tuple[float, float]]
    undersized: bool = False
    # segments whose length falls outside [min, max] because no admissible cut existed
    violations: int = 0

    def __len__(self):
        return len(self.intervals)

    def __iter__(self):
        return iter(self.intervals)

    @property
    def lengths(self) -> list[float]:
        return [end - start for start, end in self.intervals]


def _split_point(probs: np.ndarray, lo: int, hi: int, min_frames: int) -> tuple[int, bool]:
    """Cut index in (lo, hi) at minimum probability leaving both sides >= ``min_frames``.

    When no cut satisfies the minimum, fall back to the cuts that leave the
    shorter side as long as possible (the centre) and take the least
    probable among them.
    """
    first, last = lo + min_frames, hi - min_frames
    admissible = first <= last
    if not admissible:
        mid = (lo + hi) / 2.0
        first, last = math.floor(mid), math.ceil(mid)
        first, last = max(first, lo + 1), min(last, hi - 1)
    window = probs[first:last + 1]
    # ties go to the earliest frame
    return first + int(np.argmin(window)), admissible


def segment(track: ProbabilityTrack, params: SegmentationParams) -> Segmentation:
    """Split the track recursively at low-probability frames until every piece fits ``max_length``.

    Whether a piece is split depends only on its length, and where it is
    split depends only on its frames and ``min_length``, so the result does
    not depend on the order in which pieces are processed.
    """
    fr = track.frame_rate
    if track.total_duration < params.min_length - _TOL:
        return Segmentation([(0.0, track.total_duration)], undersized=True)
    min_frames = max(1, math.ceil(params.min_length * fr - _TOL))
    max_frames = math.floor(params.max_length * fr + _TOL)
    probs = track.probabilities

    done: list[tuple[int, int]] = []
    pending = [(0, track.frames)]
    violations = 0
    while pending:
        lo, hi = pending.pop()
        if hi - lo <= max_frames or hi - lo < 2:
            done.append((lo, hi))
            continue
        cut, admissible = _split_point(probs, lo, hi, min_frames)
        if not admissible:
            violations += 1
        pending += [(lo, cut), (cut, hi)]
    done.sort()
    return Segmentation([(lo / fr, hi / fr) for lo, hi in done], violations=violations)


# ---------------------------------------------------------------------------
# sweep


def default_grid(upper: float = 30.0, step: float = 2.0, smallest: float = 0.2):
    """(min, max) pairs with min in {0.2, 2, 4, ...} and max in 2-second steps up to ``upper``."""
    values = [smallest] + [float(v) for v in np.arange(step, upper + _TOL, step)]
    return [SegmentationParams(mn, mx) for mn in values for mx in values[1:] if mn <= mx]


TED_GRID_UPPER = 30.0
ACL_GRID_UPPER = 18.0


@dataclass
class SweepRow:
    min_length: float
    max_length: float
    score: float | None
    segments: int
    mean_length: float
    error: str | None = None


@dataclass
class SweepResult:
    rows: list[SweepRow] = field(default_factory=list)

    @property
    def best(self) -> SweepRow:
        scored = [r for r in self.rows if r.score is not None]
        if not scored:
            raise DataError("no combination produced a score")
        return scored[0]

    def to_csv(self) -> str:
        lines = ["min,max,score,segments,mean_len"]
        for r in self.rows:
            score = "" if r.score is None else repr(r.score)
            lines.append(f"{r.min_length!r},{r.max_length!r},{score},{r.segments},{r.mean_length!r}")
        return "\n".join(lines) + "\n"


def _row_key(row: SweepRow):
    # best score first; ties prefer smaller max, then smaller min; failures last
    missing = row.score is None or math.isnan(row.score)
    return (missing, 0.0 if missing else -row.score, row.max_length, row.min_length)


def sweep(tracks: Sequence[ProbabilityTrack], references, grid: Sequence[SegmentationParams],
          scorer: Callable[[list[Segmentation], object], float], jobs: int = 1) -> SweepResult:
    """Score every (min, max) combination; ``scorer(segmentations, references) -> float``.

    A scorer exception records the row with a missing score.
    """
    grid = [p for p in grid if p.min_length <= p.max_length]
    if not grid:
        raise ConfigurationError("empty parameter grid")

    def evaluate(params: SegmentationParams) -> SweepRow:
        segs = [segment(t, params) for t in tracks]
        lengths = [length for s in segs for length in s.lengths]
        count = len(lengths)
        mean_len = float(np.mean(lengths)) if lengths else 0.0
        try:
            score = float(scorer(segs, references))
            error = None
        except Exception as exc:  # scorer is user code; keep sweeping
            score, error = None, f"{type(exc).__name__}: {exc}"
        return SweepRow(params.min_length, params.max_length, score, count, mean_len, error)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(evaluate, grid))
    else:
        rows = [evaluate(p) for p in grid]
    return SweepResult(sorted(rows, key=_row_key))


def mean_length_scorer(target: float = 8.0):
    """Synthetic scorer preferring segmentations whose mean length is near ``target``."""

    def score(segmentations, _references=None):
        lengths = [length for s in segmentations for length in s.lengths]
        return -abs(float(np.mean(lengths)) - target)

    return score
