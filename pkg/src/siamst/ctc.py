"""CTC loss, greedy decoding and CTC compression.

Index 0 of every CTC vocabulary is the blank symbol.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import DataError, DimensionError, InfeasibleAlignmentError
from .numcore import Tensor

BLANK = 0
# 28 characters; CTC index = position + 1
CHARACTERS = "abcdefghijklmnopqrstuvwxyz '"
CTC_VOCAB_SIZE = len(CHARACTERS) + 1
_CHAR_TO_ID = {c: i + 1 for i, c in enumerate(CHARACTERS)}


def encode_characters(text: str) -> list[int]:
    try:
        return [_CHAR_TO_ID[c] for c in text]
    except KeyError as exc:
        raise DataError(f"character {exc.args[0]!r} not in CTC vocabulary") from None


def decode_characters(ids) -> str:
    return "".join(CHARACTERS[i - 1] for i in ids if i != BLANK)


@dataclass
class CtcPosterior:
    """Per-frame log-distribution over the CTC vocabulary."""

    log_probs: Tensor

    def __post_init__(self):
        if not isinstance(self.log_probs, Tensor):
            self.log_probs = nc.constant(self.log_probs)
        if self.log_probs.value.ndim != 2 or self.vocab_size < 2:
            raise DimensionError("posterior must be frames x vocab with vocab >= 2")

    @property
    def frames(self) -> int:
        return self.log_probs.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.log_probs.shape[1]

    def check_normalized(self, tol: float = 1e-9) -> bool:
        return bool(np.all(np.abs(np.exp(self.log_probs.value).sum(axis=1) - 1.0) <= tol))


@dataclass
class CompressedSequence:
    features: Tensor
    labels: list[int]

    @property
    def frames(self) -> int:
        return len(self.labels)

    @property
    def empty(self) -> bool:
        """True when every frame was blank; callers should skip the example."""
        return not self.labels


def min_frames(target) -> int:
    """Fewest frames able to emit ``target``: one per label plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _lse(*arrays):
    stacked = np.stack(arrays)
    m = np.max(stacked, axis=0)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return safe + np.log(np.sum(np.exp(stacked - safe), axis=0))


def _forward_backward(lp: np.ndarray, target: list[int]):
    T = lp.shape[0]
    ext = np.full(2 * len(target) + 1, BLANK, dtype=int)
    ext[1::2] = target
    S = ext.size
    # transitions s-2 -> s allowed for non-blank labels differing from the one two back
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    emit = lp[:, ext]  # T x S

    alpha = np.full((T, S), -np.inf)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        shift1 = np.concatenate(([-np.inf], prev[:-1]))
        shift2 = np.where(skip, np.concatenate(([-np.inf, -np.inf], prev[:-2])), -np.inf)
        alpha[t] = _lse(prev, shift1, shift2) + emit[t]

    beta = np.full((T, S), -np.inf)
    beta[T - 1, S - 1] = emit[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = emit[T - 1, S - 2]
    skip_from = np.concatenate((skip[2:], [False, False]))  # s -> s+2 allowed
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        shift1 = np.concatenate((nxt[1:], [-np.inf]))
        shift2 = np.where(skip_from, np.concatenate((nxt[2:], [-np.inf, -np.inf])), -np.inf)
        beta[t] = _lse(nxt, shift1, shift2) + emit[t]

    tail = [alpha[T - 1, S - 1]] + ([alpha[T - 1, S - 2]] if S > 1 else [])
    log_likelihood = float(_lse(*[np.asarray(v) for v in tail]))
    return ext, alpha, beta, emit, log_likelihood


def ctc_loss(posterior, target) -> Tensor:
    """Negative log-likelihood of ``target`` summed over all CTC alignments.

    ``posterior`` may be a :class:`CtcPosterior` or a frames x vocab tensor of
    log-probabilities.  The gradient with respect to each log-probability is
    minus the posterior occupancy of that (frame, label) cell.
    """
    log_probs = posterior.log_probs if isinstance(posterior, CtcPosterior) else nc.as_tensor(posterior)
    target = [int(t) for t in target]
    if not target:
        raise DataError("CTC target must be non-empty")
    V = log_probs.shape[1]
    if any(t == BLANK or not 0 < t < V for t in target):
        raise DataError("CTC target contains blank or out-of-vocabulary ids")
    T = log_probs.shape[0]
    if T < min_frames(target):
        raise InfeasibleAlignmentError(
            f"{T} frames cannot emit {len(target)} labels needing {min_frames(target)} frames"
        )
    lp = log_probs.value
    ext, alpha, beta, emit, log_likelihood = _forward_backward(lp, target)
    if not np.isfinite(log_likelihood):
        raise InfeasibleAlignmentError("target has zero probability under the posterior")

    def backward(g):
        occupancy = np.exp(alpha + beta - emit - log_likelihood)  # T x S
        grad = np.zeros_like(lp)
        np.add.at(grad, (slice(None), ext), occupancy)
        log_probs._accumulate(-g * grad)

    return nc._node(np.asarray(-log_likelihood), (log_probs,), backward)


def ctc_bruteforce_nll(log_probs: np.ndarray, target) -> float:
    """Reference NLL by enumerating every frame labeling; exponential in frames."""
    T, V = log_probs.shape
    target = tuple(int(t) for t in target)
    total = -np.inf
    for path in itertools.product(range(V), repeat=T):
        if collapse(path) == target:
            total = np.logaddexp(total, sum(log_probs[t, k] for t, k in enumerate(path)))
    return float(-total)


def collapse(path) -> tuple:
    """Merge adjacent repeats, then drop blanks."""
    return tuple(k for k, _ in itertools.groupby(path) if k != BLANK)


def ctc_greedy_decode(posterior) -> list[int]:
    lp = posterior.log_probs.value if isinstance(posterior, CtcPosterior) else np.asarray(
        nc.as_tensor(posterior).value
    )
    return list(collapse(np.argmax(lp, axis=1).tolist()))


def ctc_compress(features, posterior) -> CompressedSequence:
    """Average consecutive frames sharing an argmax label; drop blank runs."""
    features = nc.as_tensor(features)
    lp = posterior.log_probs.value if isinstance(posterior, CtcPosterior) else nc.as_tensor(posterior).value
    if features.shape[0] != lp.shape[0]:
        raise DimensionError(f"features have {features.shape[0]} frames, posterior {lp.shape[0]}")
    best = np.argmax(lp, axis=1)
    runs = []
    start = 0
    for label, group in itertools.groupby(best.tolist()):
        length = len(list(group))
        if label != BLANK:
            runs.append((label, start, start + length))
        start += length
    if not runs:
        return CompressedSequence(nc.constant(np.zeros((0, features.shape[1]))), [])
    weights = np.zeros((len(runs), features.shape[0]))
    for row, (_, lo, hi) in enumerate(runs):
        weights[row, lo:hi] = 1.0 / (hi - lo)
    return CompressedSequence(nc.matmul(nc.constant(weights), features), [r[0] for r in runs])
