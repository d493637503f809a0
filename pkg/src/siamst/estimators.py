"""scikit-learn style wrappers around the training and filtering stages.

Inputs are ragged, so ``X`` is a list of (frames x features) arrays (or of
manifest examples / probability tracks) rather than one 2-D array; each
element is validated with :func:`sklearn.utils.check_array`.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils import check_array
from sklearn.utils.validation import check_is_fitted

from . import numcore as nc
from .ctc import decode_characters, encode_characters, ctc_greedy_decode
from .datapipe import (
    LENGTH_RATIO_BOUNDS,
    MIN_CHARACTERS,
    ST_WER_THRESHOLD,
    TARGET_CORPUS_WER,
    FilterReport,
    ParallelExample,
    _edits_and_lengths,
    _hypotheses_for,
    calibrate_wer_threshold,
    corpus_wer,
    ctc_text,
    filter_st,
    normalize_text,
    word_edit_distance,
)
from .errors import ConfigurationError, DataError, DimensionError
from .metrics import corpus_bleu
from .segtool import ProbabilityTrack, SegmentationParams, default_grid, mean_length_scorer, segment, sweep
from .siamese import (
    PAPER_AVERAGE_BEST,
    PAPER_LOSS_WEIGHT,
    PAPER_SIAMESE_LR,
    PAPER_WARMUP_STEPS,
    EncoderConfig,
    SiameseModel,
    SiameseTrainConfig,
    average_checkpoints,
    train_siamese,
)
from .sttrain import (
    PAPER_BEAM_SIZE,
    PAPER_LAMBDA,
    PAPER_ST_LR,
    PAPER_TEMPERATURE,
    PAPER_TOP_K,
    KdConfig,
    STTrainConfig,
    build_teacher_table,
    init_st_model,
    train_st,
    translate,
)
from .toydata import ToyUtterance, bigram_tokens, parse_target_text


def _check_sequences(X, n_features: int | None = None) -> list[np.ndarray]:
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = [X]
    X = list(X)
    if not X:
        raise DataError("expected at least one sequence")
    out = [check_array(x, dtype=np.float64) for x in X]
    if n_features is not None and any(x.shape[1] != n_features for x in out):
        raise DimensionError(f"every sequence must have {n_features} features")
    return out


def _check_texts(y, n: int, name: str) -> list[str]:
    y = [str(t) for t in y]
    if len(y) != n:
        raise DataError(f"{len(y)} {name} for {n} sequences")
    return y


def _utterances(X, transcripts=None, translations=None) -> list[ToyUtterance]:
    out = []
    for i, feats in enumerate(X):
        text = ctc_text(normalize_text(transcripts[i])) if transcripts is not None else ""
        if transcripts is not None and not text:
            raise DataError(f"sequence {i}: transcript is empty after normalization")
        out.append(ToyUtterance(
            id=f"x{i:06d}", transcript=text, features=feats,
            ctc_target=encode_characters(text) if text else [],
            text_tokens=bigram_tokens(text) if text else [],
            target=parse_target_text(translations[i]) if translations is not None else [],
        ))
    return out


def _holdout(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if not 0 < fraction < 1:
        raise ConfigurationError("validation_fraction must be in (0, 1)")
    order = np.random.default_rng(seed).permutation(n)
    n_valid = max(1, int(round(fraction * n)))
    if n_valid >= n:
        raise DataError("too few sequences to hold out a validation split")
    return order[n_valid:], order[:n_valid]


class SiameseEncoder(BaseEstimator, TransformerMixin):
    """Speech encoder pretrained to match a frozen text encoder.

    ``fit(X, y)`` takes feature sequences and their transcripts;
    ``transform`` returns the semantic encoder output per sequence (``None``
    when CTC compression leaves nothing); ``predict`` returns greedy CTC
    transcripts.  ``text_encoder`` may be a pretrained
    :class:`~siamst.siamese.TextEncoder`; otherwise a randomly initialized one
    is used as the frozen target.
    """

    def __init__(self, d=32, max_steps=600, learning_rate=PAPER_SIAMESE_LR, warmup_steps=PAPER_WARMUP_STEPS,
                 batch_size=8, validate_every=50, alpha=PAPER_LOSS_WEIGHT, beta=PAPER_LOSS_WEIGHT,
                 gamma=PAPER_LOSS_WEIGHT, average_best=PAPER_AVERAGE_BEST, validation_fraction=0.1,
                 text_encoder=None, seed=0):
        self.d = d
        self.max_steps = max_steps
        self.learning_rate = learning_rate
        self.warmup_steps = warmup_steps
        self.batch_size = batch_size
        self.validate_every = validate_every
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.average_best = average_best
        self.validation_fraction = validation_fraction
        self.text_encoder = text_encoder
        self.seed = seed

    def fit(self, X, y):
        X = _check_sequences(X)
        utts = _utterances(X, _check_texts(y, len(X), "transcripts"))
        train_idx, valid_idx = _holdout(len(utts), self.validation_fraction, self.seed)
        cfg = EncoderConfig(d=self.d, input_dim=X[0].shape[1], alpha=self.alpha, beta=self.beta,
                            gamma=self.gamma)
        model = SiameseModel(cfg, seed=self.seed, text_encoder=self.text_encoder)
        tcfg = SiameseTrainConfig(max_steps=self.max_steps, batch_size=self.batch_size,
                                  learning_rate=self.learning_rate, warmup_steps=self.warmup_steps,
                                  validate_every=self.validate_every, patience=10 ** 9,
                                  keep_best=self.average_best, seed=self.seed)
        result = train_siamese(model, [utts[i] for i in train_idx], [utts[i] for i in valid_idx], tcfg)
        model.load_state_dict(average_checkpoints(result.checkpoints, self.average_best))
        self.model_ = model
        self.training_ = result
        self.n_features_in_ = X[0].shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        out = []
        with nc.no_grad():
            for feats in _check_sequences(X, self.n_features_in_):
                enc = self.model_.speech(feats)
                out.append(None if enc.empty else enc.semantic_output.value.copy())
        return out

    def predict(self, X):
        check_is_fitted(self, "model_")
        out = []
        with nc.no_grad():
            for feats in _check_sequences(X, self.n_features_in_):
                _, posterior = self.model_.speech.acoustic_posterior(feats)
                out.append(decode_characters(ctc_greedy_decode(posterior)))
        return out

    def score(self, X, y):
        """One minus the corpus word error rate of the CTC transcripts."""
        hyps = self.predict(X)
        refs = [ctc_text(normalize_text(t)).split() for t in _check_texts(y, len(hyps), "transcripts")]
        edits = [word_edit_distance(r, h.split()) for r, h in zip(refs, hyps)]
        return 1.0 - corpus_wer(edits, [len(r) for r in refs])


class SpeechTranslator(BaseEstimator):
    """End-to-end ST model fine-tuned from a fitted :class:`SiameseEncoder`.

    ``y`` holds target-vocabulary translations.  ``init="frontend"`` keeps
    only the ASR front-end of the encoder (the random-init baseline).  With
    ``kd=True``, ``text_model`` (an :class:`~siamst.sttrain.MTModel`) is the
    teacher and ``fit`` also needs the source transcripts.
    """

    def __init__(self, encoder=None, text_model=None, init="all", max_steps=600, learning_rate=PAPER_ST_LR,
                 batch_size=8, validate_every=25, kd=False, top_k=PAPER_TOP_K, temperature=PAPER_TEMPERATURE,
                 lam=PAPER_LAMBDA, beam_size=PAPER_BEAM_SIZE, max_len=20, validation_fraction=0.1, seed=0):
        self.encoder = encoder
        self.text_model = text_model
        self.init = init
        self.max_steps = max_steps
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.validate_every = validate_every
        self.kd = kd
        self.top_k = top_k
        self.temperature = temperature
        self.lam = lam
        self.beam_size = beam_size
        self.max_len = max_len
        self.validation_fraction = validation_fraction
        self.seed = seed

    def fit(self, X, y, transcripts=None):
        X = _check_sequences(X)
        y = _check_texts(y, len(X), "translations")
        if self.kd and (self.text_model is None or transcripts is None):
            raise ConfigurationError("kd=True needs text_model and the source transcripts")
        transcripts = _check_texts(transcripts, len(X), "transcripts") if transcripts is not None else None
        utts = _utterances(X, transcripts, y)
        train_idx, valid_idx = _holdout(len(utts), self.validation_fraction, self.seed)
        train, valid = [utts[i] for i in train_idx], [utts[i] for i in valid_idx]

        if self.encoder is not None:
            check_is_fitted(self.encoder, "model_")
            cfg, state = self.encoder.model_.cfg, self.encoder.model_.state_dict()
        else:
            cfg, state = EncoderConfig(input_dim=X[0].shape[1]), None
        model = init_st_model(cfg, state, self.text_model, self.init, seed=self.seed)
        kd = KdConfig(enabled=self.kd, k=self.top_k, temperature=self.temperature, lam=self.lam)
        teacher = build_teacher_table(self.text_model, train, kd.k, kd.temperature) if self.kd else None
        tcfg = STTrainConfig(max_steps=self.max_steps, batch_size=self.batch_size,
                             learning_rate=self.learning_rate, validate_every=self.validate_every,
                             seed=self.seed, kd=kd)
        result = train_st(model, train, valid, tcfg, teacher)
        best = min(result.checkpoints, key=lambda c: (c.score, c.step))
        model.load_state_dict(best.state)
        self.model_ = model
        self.training_ = result
        self.n_features_in_ = X[0].shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return translate(self.model_, _check_sequences(X, self.n_features_in_), self.beam_size, self.max_len)

    def score(self, X, y):
        """Corpus BLEU (0-100) of the beam-search translations."""
        hyps = self.predict(X)
        return corpus_bleu(hyps, _check_texts(y, len(hyps), "translations")).score


class CorpusFilter(BaseEstimator, TransformerMixin):
    """WER-based corpus filtering over lists of manifest examples.

    ``stage="siamese"``: ``fit`` calibrates the per-example WER cut-off so
    the kept corpus meets ``target_wer``; ``transform`` applies that cut-off.
    ``stage="st"``: fixed thresholds, ``fit`` only records the input size.
    ASR hypotheses come from ``hypotheses`` or each example's
    ``asr_hypothesis``.  The last report is kept in ``report_``.
    """

    def __init__(self, stage="siamese", target_wer=TARGET_CORPUS_WER, wer_threshold=ST_WER_THRESHOLD,
                 min_chars=MIN_CHARACTERS, ratio_bounds=LENGTH_RATIO_BOUNDS, jobs=1):
        self.stage = stage
        self.target_wer = target_wer
        self.wer_threshold = wer_threshold
        self.min_chars = min_chars
        self.ratio_bounds = ratio_bounds
        self.jobs = jobs

    def _check(self, X, hypotheses):
        if self.stage not in ("siamese", "st"):
            raise ConfigurationError(f"unknown stage {self.stage!r}")
        X = list(X)
        if not all(isinstance(ex, ParallelExample) for ex in X):
            raise DataError("CorpusFilter expects ParallelExample items")
        return X, _hypotheses_for(X, hypotheses)

    def fit(self, X, y=None, hypotheses=None):
        X, hyps = self._check(X, hypotheses)
        if self.stage == "siamese":
            if hyps is None:
                raise DataError("siamese filtering needs an ASR hypothesis for every example")
            edits, lengths = _edits_and_lengths(X, hyps, self.jobs)
            self.threshold_ = calibrate_wer_threshold(edits, lengths, self.target_wer)
        else:
            self.threshold_ = self.wer_threshold
        self.n_examples_fit_ = len(X)
        return self

    def transform(self, X, hypotheses=None):
        check_is_fitted(self, "threshold_")
        X, hyps = self._check(X, hypotheses)
        if self.stage == "st":
            kept, self.report_ = filter_st(X, hyps, self.threshold_, self.min_chars, tuple(self.ratio_bounds))
            return kept
        if hyps is None:
            raise DataError("siamese filtering needs an ASR hypothesis for every example")
        edits, lengths = _edits_and_lengths(X, hyps, self.jobs)
        keep = [e / n <= self.threshold_ for e, n in zip(edits, lengths)]
        kept = [ex for ex, k in zip(X, keep) if k]
        self.report_ = FilterReport(
            len(X), len(kept), {"wer": len(X) - len(kept)}, corpus_wer(edits, lengths),
            corpus_wer([e for e, k in zip(edits, keep) if k], [n for n, k in zip(lengths, keep) if k])
            if kept else None,
            {"wer": self.threshold_, "target_corpus_wer": self.target_wer},
        )
        return kept

    def fit_transform(self, X, y=None, hypotheses=None):
        return self.fit(X, hypotheses=hypotheses).transform(X, hypotheses)


class LengthConstrainedSegmenter(BaseEstimator, TransformerMixin):
    """Divide-and-conquer segmentation of probability tracks.

    With ``min_length``/``max_length`` set, ``fit`` just validates them;
    otherwise it sweeps the grid and keeps the best pair under ``scorer``
    (``scorer(segmentations, references) -> float``; default prefers mean
    segment length near ``target_mean_length``).
    """

    def __init__(self, min_length=None, max_length=None, grid_upper=30.0, grid_step=2.0, grid_smallest=0.2,
                 scorer=None, target_mean_length=8.0, jobs=1):
        self.min_length = min_length
        self.max_length = max_length
        self.grid_upper = grid_upper
        self.grid_step = grid_step
        self.grid_smallest = grid_smallest
        self.scorer = scorer
        self.target_mean_length = target_mean_length
        self.jobs = jobs

    @staticmethod
    def _check_tracks(X):
        X = [X] if isinstance(X, ProbabilityTrack) else list(X)
        if not X or not all(isinstance(t, ProbabilityTrack) for t in X):
            raise DataError("expected a non-empty list of ProbabilityTrack")
        return X

    def fit(self, X, y=None):
        tracks = self._check_tracks(X)
        if (self.min_length is None) != (self.max_length is None):
            raise ConfigurationError("set both min_length and max_length, or neither")
        if self.min_length is not None:
            self.params_ = SegmentationParams(self.min_length, self.max_length)
            return self
        scorer = self.scorer or mean_length_scorer(self.target_mean_length)
        grid = default_grid(self.grid_upper, self.grid_step, self.grid_smallest)
        self.sweep_ = sweep(tracks, y, grid, scorer, jobs=self.jobs)
        best = self.sweep_.best
        self.params_ = SegmentationParams(best.min_length, best.max_length)
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        return [segment(t, self.params_) for t in self._check_tracks(X)]
