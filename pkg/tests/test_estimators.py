import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from siamst.datapipe import ParallelExample, filter_siamese, filter_st
from siamst.errors import ConfigurationError, DataError, DimensionError
from siamst.estimators import CorpusFilter, LengthConstrainedSegmenter, SiameseEncoder, SpeechTranslator
from siamst.segtool import ProbabilityTrack, SegmentationParams, segment
from siamst.siamese import TextEncoder
from siamst.sttrain import MTModel
from siamst.toydata import make_corpus


@pytest.fixture(scope="module")
def corpus():
    return make_corpus(n_train=20, n_valid=5, seed=21)


@pytest.fixture(scope="module")
def encoder(corpus):
    X = [u.features for u in corpus.train]
    y = [u.transcript for u in corpus.train]
    return SiameseEncoder(max_steps=3, batch_size=2, warmup_steps=2, validate_every=1, seed=0).fit(X, y)


class TestParams:
    def test_get_set_clone(self):
        est = SiameseEncoder(d=16, max_steps=5)
        assert est.get_params()["d"] == 16
        twin = clone(est.set_params(max_steps=7))
        assert twin.get_params()["max_steps"] == 7 and not hasattr(twin, "model_")

    def test_published_defaults(self):
        enc, st = SiameseEncoder(), SpeechTranslator()
        assert (enc.alpha, enc.beta, enc.gamma, enc.average_best) == (1.0, 1.0, 1.0, 10)
        assert (st.top_k, st.temperature, st.lam, st.beam_size) == (8, 1.3, 0.5, 5)

    def test_unfitted(self, corpus):
        with pytest.raises(NotFittedError):
            SiameseEncoder().predict([corpus.valid[0].features])


class TestSiameseEncoder:
    def test_outputs(self, encoder, corpus):
        X = [u.features for u in corpus.valid]
        enc = encoder.transform(X)
        assert len(enc) == len(X)
        assert all(e is None or e.shape[1] == 32 for e in enc)
        assert all(isinstance(t, str) for t in encoder.predict(X))
        assert 1.0 - encoder.score(X, [u.transcript for u in corpus.valid]) >= 0.0
        assert encoder.training_.steps == 3

    def test_feature_dim_checked(self, encoder):
        with pytest.raises(DimensionError):
            encoder.transform([np.zeros((5, 3))])

    def test_length_mismatch(self, corpus):
        with pytest.raises(DataError):
            SiameseEncoder(max_steps=1).fit([corpus.train[0].features], ["a", "b"])


class TestSpeechTranslator:
    def test_fit_predict_score(self, encoder, corpus):
        X = [u.features for u in corpus.train]
        y = [u.translation for u in corpus.train]
        st = SpeechTranslator(encoder=encoder, max_steps=2, validate_every=1, beam_size=2).fit(X, y)
        hyps = st.predict([u.features for u in corpus.valid])
        assert len(hyps) == len(corpus.valid)
        assert 0.0 <= st.score([u.features for u in corpus.valid], [u.translation for u in corpus.valid]) <= 100.0

    def test_kd_needs_teacher(self, corpus):
        with pytest.raises(ConfigurationError):
            SpeechTranslator(kd=True).fit([u.features for u in corpus.train], [u.translation for u in corpus.train])

    def test_kd_with_text_model(self, encoder, corpus):
        mt = MTModel(TextEncoder(encoder.model_.cfg, np.random.default_rng(0)), 32)
        st = SpeechTranslator(encoder=encoder, text_model=mt, kd=True, max_steps=1, validate_every=1)
        st.fit([u.features for u in corpus.train], [u.translation for u in corpus.train],
               transcripts=[u.transcript for u in corpus.train])
        assert st.training_.log[-1]["l_kl"] is not None


def examples_with_hyps(n):
    words = "aa bb cc dd ee ff gg hh ii jj".split()
    out = []
    for i in range(n):
        hyp = list(words)
        for j in range(i % 5):
            hyp[j] = "zz"
        out.append(ParallelExample(f"e{i}", "t", 1.0, " ".join(words), "w2 w3 w4 w5", asr_hypothesis=" ".join(hyp)))
    return out


class TestCorpusFilter:
    def test_siamese_matches_function(self):
        exs = examples_with_hyps(30)
        est = CorpusFilter(stage="siamese")
        kept = est.fit_transform(exs)
        want, report = filter_siamese(exs)
        assert [e.id for e in kept] == [e.id for e in want]
        assert est.threshold_ == report.thresholds["wer"]
        assert est.report_.reconciles()

    def test_threshold_is_frozen_after_fit(self):
        est = CorpusFilter().fit(examples_with_hyps(30))
        noisy = examples_with_hyps(30)[4::5]  # all at WER 0.4
        assert est.transform(noisy) == []

    def test_st_stage(self):
        exs = examples_with_hyps(10)
        kept = CorpusFilter(stage="st").fit_transform(exs)
        assert [e.id for e in kept] == [e.id for e in filter_st(exs)[0]]

    def test_bad_stage(self):
        with pytest.raises(ConfigurationError):
            CorpusFilter(stage="asr").fit(examples_with_hyps(2))


class TestSegmenter:
    def test_fixed_params(self):
        track = ProbabilityTrack(np.random.default_rng(0).random(300), 10)
        est = LengthConstrainedSegmenter(min_length=1.0, max_length=4.0).fit([track])
        assert est.transform([track])[0].intervals == segment(track, SegmentationParams(1.0, 4.0)).intervals

    def test_sweep_fit(self):
        tracks = [ProbabilityTrack(np.random.default_rng(i).random(200), 10) for i in range(2)]
        est = LengthConstrainedSegmenter(grid_upper=8.0, target_mean_length=3.0).fit(tracks)
        best = est.sweep_.best
        assert (est.params_.min_length, est.params_.max_length) == (best.min_length, best.max_length)
        assert len(est.transform(tracks)) == 2

    def test_half_specified(self):
        with pytest.raises(ConfigurationError):
            LengthConstrainedSegmenter(min_length=1.0).fit([ProbabilityTrack(np.ones(5), 10)])
