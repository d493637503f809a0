import itertools
import math
from decimal import Decimal, getcontext

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from siamst.errors import DataError
from siamst.metrics import corpus_bleu, tokenize

# frozen fixture; value below from a 60-digit decimal evaluation of naive n-gram counts
FIXTURE_HYPS = ["the cat sat on the mat", "the quick brown fox", "hello world !"]
FIXTURE_REFS = ["the cat is on the mat", "the quick brown fox jumps", "hello , world !"]
FIXTURE_BLEU = 43.98050923573463


def naive_counts(hyps, refs, max_n=4):
    matches, totals = [0] * max_n, [0] * max_n
    for h, r in zip(hyps, refs):
        h, r = tokenize(h), tokenize(r)
        for n in range(1, max_n + 1):
            hg = [tuple(h[i:i + n]) for i in range(len(h) - n + 1)]
            rg = [tuple(r[i:i + n]) for i in range(len(r) - n + 1)]
            matches[n - 1] += sum(min(hg.count(g), rg.count(g)) for g in set(hg))
            totals[n - 1] += len(hg)
    return matches, totals


def decimal_bleu(hyps, refs):
    getcontext().prec = 60
    m, t = naive_counts(hyps, refs)
    hl = sum(len(tokenize(h)) for h in hyps)
    rl = sum(len(tokenize(r)) for r in refs)
    log_p = sum((Decimal(a) / Decimal(b)).ln() for a, b in zip(m, t)) / 4
    bp = min(Decimal(1), (1 - Decimal(rl) / Decimal(hl)).exp())
    return float(bp * log_p.exp() * 100)


class TestTokenize:
    def test_punctuation_split(self):
        assert tokenize("Hello, World!") == ["hello", ",", "world", "!"]

    def test_whitespace(self):
        assert tokenize("  a \t b\n") == ["a", "b"]


class TestCorpusBleu:
    def test_fixture_counts(self):
        assert naive_counts(FIXTURE_HYPS, FIXTURE_REFS) == ([12, 7, 3, 1], [13, 10, 7, 4])

    def test_fixture_exact(self):
        assert decimal_bleu(FIXTURE_HYPS, FIXTURE_REFS) == FIXTURE_BLEU
        assert corpus_bleu(FIXTURE_HYPS, FIXTURE_REFS).score == FIXTURE_BLEU

    def test_identity(self):
        assert corpus_bleu(FIXTURE_REFS, FIXTURE_REFS).score == 100.0

    def test_no_overlap(self):
        assert corpus_bleu(["x y z w"], ["a b c d"]).score == 0.0

    def test_missing_four_gram_is_zero(self):
        score = corpus_bleu(["a b c"], ["a b c"])
        assert score.score == 0.0 and score.precisions[3] == 0.0

    def test_brevity_penalty(self):
        score = corpus_bleu(["a b c d"], ["a b c d e f g h"])
        assert score.brevity_penalty == pytest.approx(math.exp(1 - 8 / 4))

    def test_empty_hypotheses(self):
        score = corpus_bleu([""], ["a b"])
        assert score.score == 0.0 and score.zero_length

    def test_count_mismatch(self):
        with pytest.raises(DataError):
            corpus_bleu(["a"], ["a", "b"])

    def test_add_k_rescues_short_sentences(self):
        plain = corpus_bleu(["a b c"], ["a b c"])
        smoothed = corpus_bleu(["a b c"], ["a b c"], smoothing="add-k")
        assert plain.score == 0.0 < smoothed.score <= 100.0

    def test_clipping(self):
        score = corpus_bleu(["the the the the"], ["the cat"], max_n=1)
        assert score.matches[0] == 1


_words = st.lists(st.sampled_from("a b c d e".split()), min_size=1, max_size=8).map(" ".join)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(_words, _words), min_size=1, max_size=4))
def test_bounds_and_naive_agreement(pairs):
    hyps, refs = zip(*pairs)
    score = corpus_bleu(hyps, refs)
    assert 0.0 <= score.score <= 100.0 + 1e-9
    assert (score.matches, score.totals) == naive_counts(hyps, refs)


def test_order_invariance():
    pairs = list(zip(FIXTURE_HYPS, FIXTURE_REFS))
    scores = {corpus_bleu(*zip(*perm)).score for perm in itertools.permutations(pairs)}
    assert max(scores) - min(scores) <= 1e-12
