import itertools
import math

import numpy as np
import pytest

from siamst import numcore as nc
from siamst.ctc import (
    BLANK,
    CtcPosterior,
    ctc_compress,
    ctc_greedy_decode,
    ctc_loss,
    min_frames,
)
from siamst.errors import InfeasibleAlignmentError


def enumerate_nll(lp, target):
    """Independent oracle: sum the probability of every labeling that collapses to target."""
    T, V = lp.shape
    total = 0.0
    for path in itertools.product(range(V), repeat=T):
        merged = [k for i, k in enumerate(path) if i == 0 or path[i - 1] != k]
        if [k for k in merged if k != BLANK] == list(target):
            total += math.exp(sum(lp[t, k] for t, k in enumerate(path)))
    return -math.log(total)


def random_instance(rng):
    while True:
        T = int(rng.integers(1, 6))
        V = int(rng.integers(2, 5))
        L = int(rng.integers(1, 4))
        target = [int(t) for t in rng.integers(1, V, size=L)]
        if min_frames(target) <= T:
            lp = nc.log_softmax(rng.normal(size=(T, V)), axis=1).value
            return lp, target


def one_hot_posterior(labels, V=4, sharp=30.0):
    logits = np.zeros((len(labels), V))
    logits[np.arange(len(labels)), labels] = sharp
    return CtcPosterior(nc.log_softmax(logits, axis=1))


class TestCtcLoss:
    def test_single_frame(self):
        lp = np.log(np.full((1, 2), 0.5))
        assert ctc_loss(lp, [1]).item() == pytest.approx(-math.log(0.5), abs=1e-12)

    def test_two_frames_three_paths(self):
        p = np.array([[0.3, 0.7], [0.6, 0.4]])
        expected = p[0, 1] * p[1, 1] + p[0, 1] * p[1, 0] + p[0, 0] * p[1, 1]
        assert ctc_loss(np.log(p), [1]).item() == pytest.approx(-math.log(expected), abs=1e-12)

    def test_matches_enumeration(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            lp, target = random_instance(rng)
            assert abs(ctc_loss(lp, target).item() - enumerate_nll(lp, target)) <= 1e-9

    def test_gradient(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            lp, target = random_instance(rng)
            x = nc.parameter(lp)
            assert nc.grad_check(lambda: ctc_loss(x, target), [x]).max_rel_error <= 1e-4

    def test_infeasible(self):
        with pytest.raises(InfeasibleAlignmentError):
            ctc_loss(np.log(np.full((2, 3), 1 / 3)), [1, 1])

    def test_non_negative_and_zero_on_certain_alignment(self):
        post = one_hot_posterior([1, 0, 2], sharp=200.0)
        assert ctc_loss(post, [1, 2]).item() == pytest.approx(0.0, abs=1e-12)
        rng = np.random.default_rng(2)
        for _ in range(20):
            lp, target = random_instance(rng)
            assert ctc_loss(lp, target).item() >= 0


class TestGreedyDecode:
    def test_collapse(self):
        assert ctc_greedy_decode(one_hot_posterior([1, 1, 0, 1])) == [1, 1]

    def test_all_blank(self):
        assert ctc_greedy_decode(one_hot_posterior([0, 0, 0])) == []

    def test_blank_separates(self):
        assert ctc_greedy_decode(one_hot_posterior([1, 2, 2, 0, 2])) == [1, 2, 2]


class TestCompress:
    def test_definition(self):
        h = np.arange(8.0).reshape(4, 2)
        out = ctc_compress(h, one_hot_posterior([1, 1, 0, 2]))
        np.testing.assert_allclose(out.features.value, [(h[0] + h[1]) / 2, h[3]])
        assert out.labels == [1, 2]

    def test_all_blank_signal(self):
        out = ctc_compress(np.ones((3, 2)), one_hot_posterior([0, 0, 0]))
        assert out.empty and out.frames == 0

    def test_run_length_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            labels = rng.integers(0, 4, size=20)
            post = one_hot_posterior(labels)
            runs = [k for k, _ in itertools.groupby(labels.tolist()) if k != BLANK]
            out = ctc_compress(rng.normal(size=(20, 3)), post)
            assert out.frames == len(runs)
            assert out.labels == ctc_greedy_decode(post)

    def test_gradient(self):
        rng = np.random.default_rng(4)
        h = nc.parameter(rng.normal(size=(6, 3)))
        post = one_hot_posterior([1, 1, 0, 2, 2, 3])
        w = rng.normal(size=(3, 3))
        assert nc.grad_check(lambda: nc.sum(ctc_compress(h, post).features * w), [h]).passed
