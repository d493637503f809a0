from collections import OrderedDict

import numpy as np
import pytest

from siamst import numcore as nc
from siamst import siamese
from siamst.errors import ConfigurationError, DataError
from siamst.ot import SinkhornConfig
from siamst.siamese import (
    PAPER_AVERAGE_BEST,
    Checkpoint,
    EncoderConfig,
    SiameseModel,
    SiameseTrainConfig,
    TextEncoder,
    average_checkpoints,
    combine_siamese,
    ctc_corpus_wer,
    ot_distance_matrix,
    train_siamese,
    validation_ot2,
)
from siamst.toydata import make_corpus


@pytest.fixture(scope="module")
def corpus():
    return make_corpus(n_train=16, n_valid=6, seed=11)


class TestCombine:
    def test_weighted_sum(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            parts = rng.random(3) * 10
            weights = rng.random(3) * 2
            out = combine_siamese(*parts, *weights)
            assert abs(out.combined - float(np.dot(parts, weights))) <= 1e-9
            assert (out.l_ctc, out.l_ot1, out.l_ot2) == tuple(parts)

    def test_defaults_are_unit_weights(self):
        cfg = EncoderConfig()
        assert (cfg.alpha, cfg.beta, cfg.gamma) == (1.0, 1.0, 1.0)
        assert combine_siamese(1.0, 2.0, 3.0).combined == 6.0

    def test_negative_weight_rejected(self):
        with pytest.raises(ConfigurationError):
            EncoderConfig(beta=-1.0)


class TestAveraging:
    def test_elementwise_mean(self):
        states = [OrderedDict(w=np.full((2, 2), float(i))) for i in range(4)]
        np.testing.assert_allclose(average_checkpoints(states, 3)["w"], np.full((2, 2), 1.0))

    def test_fewer_than_k(self):
        states = [Checkpoint(0.1, 5, OrderedDict(w=np.ones((1, 2)))),
                  Checkpoint(0.2, 9, OrderedDict(w=np.zeros((1, 2))))]
        np.testing.assert_allclose(average_checkpoints(states, 10)["w"], [[0.5, 0.5]])

    def test_single(self):
        state = OrderedDict(w=np.arange(3.0).reshape(1, 3))
        np.testing.assert_array_equal(average_checkpoints([state], 1)["w"], state["w"])

    def test_empty(self):
        with pytest.raises(ConfigurationError):
            average_checkpoints([], 1)

    def test_mismatched(self):
        with pytest.raises(DataError):
            average_checkpoints([OrderedDict(w=np.ones((1, 2))), OrderedDict(w=np.ones((2, 1)))])

    def test_default_k(self):
        assert PAPER_AVERAGE_BEST == 10
        assert average_checkpoints.__defaults__[0] == 10
        assert SiameseTrainConfig().keep_best == 10


class TestModel:
    def test_text_encoder_copied_and_frozen(self):
        text = TextEncoder(EncoderConfig(), np.random.default_rng(3))
        model = SiameseModel(seed=0, text_encoder=text)
        np.testing.assert_array_equal(model.text.embedding.value, text.embedding.value)
        assert all(not p.requires_grad for p in model.text.parameters())
        assert all(p.requires_grad for p in model.speech.parameters())

    def test_semantic_layers_start_from_text(self):
        model = SiameseModel(seed=1)
        text, speech = model.text.layers.state_dict(), model.speech.semantic.state_dict()
        assert all(np.array_equal(text[k], speech[k]) for k in text)

    def test_loss_is_finite(self, corpus):
        model = SiameseModel(seed=2)
        utt = corpus.train[0]
        losses, enc = model.loss(utt.features, utt.ctc_target, utt.text_tokens)
        if enc.empty:
            assert losses is None
        else:
            assert np.isfinite(losses.combined)
            assert losses.combined == pytest.approx(losses.l_ctc + losses.l_ot1 + losses.l_ot2)

    def test_gradient_through_coupling(self, corpus):
        cfg = EncoderConfig(sinkhorn=SinkhornConfig(epsilon=0.1, max_iterations=10, convergence_tolerance=0.0))
        model = SiameseModel(cfg, seed=4)
        utt = next(u for u in corpus.train if not model.speech(u.features).empty)
        params = [model.speech.conv_bias, model.speech.adapter_out.bias]
        report = nc.grad_check(lambda: model.loss(utt.features, utt.ctc_target, utt.text_tokens)[0].total, params)
        assert report.max_rel_error <= 1e-4

    def test_text_too_long(self):
        model = SiameseModel(EncoderConfig(max_positions=4))
        with pytest.raises(DataError):
            model.text([5] * 5)


class TestTraining:
    def test_deterministic_and_logged(self, corpus):
        cfg = SiameseTrainConfig(max_steps=4, batch_size=2, learning_rate=3e-3, warmup_steps=2,
                                 validate_every=2, keep_best=2)
        runs = [train_siamese(SiameseModel(seed=0), corpus.train, corpus.valid, cfg) for _ in range(2)]
        assert runs[0].metrics_csv() == runs[1].metrics_csv()
        assert runs[0].metrics_csv().startswith("step,l_ctc,l_ot1,l_ot2,combined,val_l_ot2\n")
        assert len(runs[0].checkpoints) == 2
        scores = [c.score for c in runs[0].checkpoints]
        assert scores == sorted(scores)

    def test_early_stopping(self, corpus, monkeypatch):
        # flat validation curve: patience 2 stops three validations after the start
        monkeypatch.setattr(siamese, "validation_ot2", lambda model, utts: 1.0)
        cfg = SiameseTrainConfig(max_steps=50, batch_size=1, warmup_steps=1, validate_every=1, patience=2)
        result = train_siamese(SiameseModel(seed=0), corpus.train, corpus.valid, cfg)
        assert result.steps == 3

    def test_bad_config(self):
        with pytest.raises(ConfigurationError):
            SiameseTrainConfig(batch_size=0)
        with pytest.raises(ConfigurationError):
            SiameseTrainConfig(learning_rate=0.0)
        with pytest.raises(ConfigurationError):
            SiameseTrainConfig(warmup_steps=0)


class TestEvaluation:
    def test_distance_matrix_shape(self, corpus):
        model = SiameseModel(seed=0)
        dist = ot_distance_matrix(model, corpus.valid[:3])
        assert dist.shape == (3, 3)

    def test_validation_and_wer_ranges(self, corpus):
        model = SiameseModel(seed=0)
        assert validation_ot2(model, corpus.valid) > 0
        assert ctc_corpus_wer(model, corpus.valid) >= 0
