import itertools
import math

import numpy as np
import pytest

from siamst import numcore as nc
from siamst import sttrain
from siamst.errors import ConfigurationError, DataError
from siamst.siamese import EncoderConfig, SiameseModel
from siamst.sttrain import (
    Hypothesis,
    KdConfig,
    STModel,
    TeacherEntry,
    beam_search,
    beam_search_fn,
    greedy_decode,
    kl_loss,
    label_smoothed_ce,
    soften,
    st_loss,
    truncate_topk,
)
from siamst.toydata import TGT_EOS, make_corpus


def random_teacher(rng, positions, vocab, k):
    return [truncate_topk(soften(rng.normal(size=vocab), 1.3), k) for _ in range(positions)]


class TestSoftenTruncate:
    def test_soften_is_softmax_at_one(self):
        logits = np.array([1.0, 2.0, 3.0])
        np.testing.assert_allclose(soften(logits, 1.0), np.exp(logits) / np.exp(logits).sum())

    def test_higher_temperature_flattens(self):
        logits = np.array([0.0, 3.0])
        assert soften(logits, 2.0).max() < soften(logits, 1.0).max()

    def test_topk_hand(self):
        entry = truncate_topk([0.1, 0.4, 0.2, 0.3], 2)
        assert entry.indices.tolist() == [1, 3]
        np.testing.assert_allclose(entry.probs, [0.4 / 0.7, 0.3 / 0.7])

    def test_topk_ties_prefer_lower_index(self):
        assert truncate_topk([0.25, 0.25, 0.25, 0.25], 2).indices.tolist() == [0, 1]

    def test_k_larger_than_vocab(self):
        assert truncate_topk([0.5, 0.5], 8).indices.size == 2

    def test_entry_validation(self):
        with pytest.raises(DataError):
            TeacherEntry([0, 0], [0.5, 0.5])
        with pytest.raises(DataError):
            TeacherEntry([0, 1], [0.5, 0.6])


class TestLosses:
    def test_kl_zero_when_student_matches(self):
        teacher = [truncate_topk([0.1, 0.4, 0.2, 0.3], 3)]
        student = np.log(np.array([[0.1, 0.4, 0.2, 0.3]]))
        assert kl_loss(teacher, student).item() == pytest.approx(0.0, abs=1e-12)

    def test_kl_non_negative(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            teacher = random_teacher(rng, 4, 10, 8)
            student = nc.log_softmax(rng.normal(size=(4, 10)), axis=1)
            assert kl_loss(teacher, student).item() >= -1e-12

    def test_kl_gradient(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            teacher = random_teacher(rng, 3, 10, 8)
            x = nc.parameter(rng.normal(size=(3, 10)))
            f = lambda: kl_loss(teacher, nc.log_softmax(x / 1.3, axis=1))  # noqa: E731
            assert nc.grad_check(f, [x]).max_rel_error <= 1e-4

    def test_ce_without_smoothing_is_nll(self):
        lp = np.log(np.array([[0.5, 0.25, 0.25], [0.1, 0.8, 0.1]]))
        expected = -(math.log(0.5) + math.log(0.8)) / 2
        assert label_smoothed_ce(lp, [0, 1], 0.0).item() == pytest.approx(expected)

    def test_ce_smoothing_hand(self):
        lp = np.log(np.array([[0.5, 0.25, 0.25]]))
        uniform_term = -np.mean(lp)
        expected = 0.8 * -math.log(0.5) + 0.2 * uniform_term
        assert label_smoothed_ce(lp, [0], 0.2).item() == pytest.approx(expected)

    def test_ce_gradient(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            x = nc.parameter(rng.normal(size=(4, 6)))
            targets = rng.integers(0, 6, size=4)
            f = lambda: label_smoothed_ce(nc.log_softmax(x, axis=1), targets, 0.2)  # noqa: E731
            assert nc.grad_check(f, [x]).max_rel_error <= 1e-4

    def test_composition(self):
        rng = np.random.default_rng(3)
        for lam in (0.0, 0.3, 0.5, 1.0):
            ce, kl = rng.random(), rng.random()
            out = st_loss(ce, kl, lam)
            assert abs(out.combined - (lam * ce + (1 - lam) * kl)) <= 1e-9

    def test_bad_lambda(self):
        with pytest.raises(ConfigurationError):
            st_loss(1.0, 1.0, 1.5)


class TestDefaults:
    def test_kd_defaults(self):
        kd = KdConfig()
        assert (kd.k, kd.temperature, kd.lam) == (8, 1.3, 0.5)
        assert kd.smoothing == 0.0
        assert KdConfig(enabled=False).smoothing == 0.2

    def test_beam_default(self):
        assert sttrain.PAPER_BEAM_SIZE == 5
        assert beam_search_fn.__defaults__[0] == 5


def table_step_fn(table):
    """Next-token log-probabilities looked up by prefix length and last token."""
    def step(prefix):
        key = (len(prefix), prefix[-1] if prefix else -1)
        return np.log(table[key])
    return step


def exhaustive_best(step_fn, vocab, max_len, eos):
    best = None
    for length in range(1, max_len + 1):
        for seq in itertools.product(range(vocab), repeat=length):
            if eos in seq[:-1] or (length < max_len and seq[-1] != eos):
                continue
            score = sum(step_fn(list(seq[:i]))[seq[i]] for i in range(length))
            hyp = Hypothesis(list(seq), score)
            if best is None or (hyp.normalized_score, -length) > (best.normalized_score, -len(best.tokens)):
                best = hyp
    return best


class TestBeamSearch:
    def test_exhaustive_oracle(self):
        rng = np.random.default_rng(4)
        vocab, eos = 3, 1
        for _ in range(20):
            table = {(n, last): rng.dirichlet(np.ones(vocab)) for n in range(3) for last in (-1, 0, 1, 2)}
            step = table_step_fn(table)
            got = beam_search_fn(step, beam_size=vocab ** 3, max_len=3, eos=eos)
            want = exhaustive_best(step, vocab, 3, eos)
            assert got.tokens == want.tokens
            assert got.score == pytest.approx(want.score)

    def test_beam_one_is_greedy(self):
        corpus = make_corpus(n_train=5, n_valid=5, seed=3)
        model = STModel(EncoderConfig(), seed=0)
        for utt in corpus.valid:
            assert beam_search(model, utt.features, beam_size=1).tokens == greedy_decode(model, utt.features)

    def test_ensemble_of_copies_matches_single(self):
        corpus = make_corpus(n_train=5, n_valid=3, seed=4)
        model = STModel(EncoderConfig(), seed=0)
        twin = STModel(EncoderConfig(), seed=0)
        for utt in corpus.valid:
            assert beam_search([model, twin], utt.features, 3).tokens == beam_search(model, utt.features, 3).tokens

    def test_bad_beam(self):
        with pytest.raises(ConfigurationError):
            beam_search_fn(lambda p: np.zeros(3), beam_size=0)

    def test_stops_at_eos(self):
        probs = np.array([0.1, 0.9])
        hyp = beam_search_fn(lambda p: np.log(probs), beam_size=2, max_len=10, eos=TGT_EOS)
        assert hyp.tokens == [TGT_EOS]


class TestEncoderTransfer:
    def test_load_all_and_frontend(self):
        siamese = SiameseModel(seed=5)
        full, front = STModel(siamese.cfg, seed=6), STModel(siamese.cfg, seed=6)
        full.load_encoder(siamese.state_dict(), "all")
        front.load_encoder(siamese.state_dict(), "frontend")
        src = siamese.speech.state_dict()
        np.testing.assert_array_equal(full.encoder.state_dict()["adapter_in.weight"], src["adapter_in.weight"])
        np.testing.assert_array_equal(front.encoder.state_dict()["ctc_head.weight"], src["ctc_head.weight"])
        assert not np.array_equal(front.encoder.state_dict()["adapter_in.weight"], src["adapter_in.weight"])

    def test_frontend_frozen_during_training(self):
        corpus = make_corpus(n_train=8, n_valid=4, seed=7)
        model = STModel(EncoderConfig(), seed=0)
        before = model.frozen_state()
        cfg = sttrain.STTrainConfig(max_steps=2, batch_size=2, learning_rate=1e-2, validate_every=1,
                                    kd=KdConfig(enabled=False))
        result = sttrain.train_st(model, corpus.train, corpus.valid, cfg)
        after = model.frozen_state()
        assert all(np.array_equal(before[k], after[k]) for k in before)
        assert result.metrics_csv().startswith("step,l_ce,l_kl,combined,val_bleu\n")

    def test_kd_needs_teacher(self):
        corpus = make_corpus(n_train=4, n_valid=2, seed=8)
        with pytest.raises(ConfigurationError):
            sttrain.train_st(STModel(EncoderConfig()), corpus.train, corpus.valid, sttrain.STTrainConfig())
