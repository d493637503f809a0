"""Speech encoder, frozen text encoder and Siamese (CTC + 2x OT) pretraining."""

from __future__ import annotations

import csv
import io as _io
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numcore as nc
from .ctc import CTC_VOCAB_SIZE, CompressedSequence, CtcPosterior, ctc_compress, ctc_greedy_decode, ctc_loss
from .errors import ConfigurationError, DataError, TrainingDivergenceError
from .layers import EncoderStack, Linear, Module
from .numcore import Tensor
from .ot import SinkhornConfig, wasserstein_loss
from .toydata import BOS, EOS, TEXT_VOCAB_SIZE

logger = logging.getLogger(__name__)

# values used for the full-scale runs; desk defaults below are scaled down
PAPER_LOSS_WEIGHT = 1.0
PAPER_SIAMESE_LR = 2e-4
PAPER_WARMUP_STEPS = 1000
PAPER_PATIENCE_STEPS = 5000
PAPER_AVERAGE_BEST = 10


@dataclass
class EncoderConfig:
    d: int = 32
    input_dim: int = 16
    adapter_expansion: int = 8
    acoustic_layers: int = 1
    semantic_layers: int = 1
    max_positions: int = 64
    ctc_vocab_size: int = CTC_VOCAB_SIZE
    text_vocab_size: int = TEXT_VOCAB_SIZE
    conv_width: int = 3
    conv_stride: int = 2
    attention: bool = False
    alpha: float = PAPER_LOSS_WEIGHT
    beta: float = PAPER_LOSS_WEIGHT
    gamma: float = PAPER_LOSS_WEIGHT
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    pe_weight: float = 1.0
    with_pe: bool = True

    def __post_init__(self):
        if isinstance(self.sinkhorn, dict):
            self.sinkhorn = SinkhornConfig(**self.sinkhorn)
        if self.d % 2:
            raise ConfigurationError(f"model dimension must be even, got {self.d}")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if self.conv_width % 2 == 0 or self.conv_stride < 1:
            raise ConfigurationError("conv_width must be odd and conv_stride >= 1")


@dataclass
class LossBreakdown:
    l_ctc: float | None = None
    l_ot1: float | None = None
    l_ot2: float | None = None
    l_ce: float | None = None
    l_kl: float | None = None
    alpha: float | None = None
    beta: float | None = None
    gamma: float | None = None
    lam: float | None = None
    combined: float = 0.0
    total: Tensor | None = field(default=None, repr=False, compare=False)


def combine_siamese(l_ctc, l_ot1, l_ot2, alpha=1.0, beta=1.0, gamma=1.0) -> LossBreakdown:
    """``alpha * CTC + beta * OT1 + gamma * OT2``; accepts tensors or floats."""
    total = alpha * nc.as_tensor(l_ctc) + beta * nc.as_tensor(l_ot1) + gamma * nc.as_tensor(l_ot2)
    val = lambda x: float(nc.as_tensor(x).value)  # noqa: E731
    return LossBreakdown(l_ctc=val(l_ctc), l_ot1=val(l_ot1), l_ot2=val(l_ot2), alpha=alpha,
                         beta=beta, gamma=gamma, combined=total.item(), total=total)


class TextEncoder(Module):
    """Embedding + learned positions, then encoder layers; frozen during Siamese training."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.embedding = nc.parameter(rng.normal(size=(cfg.text_vocab_size, cfg.d)))
        self.positions = nc.parameter(0.1 * rng.normal(size=(cfg.max_positions + 2, cfg.d)))
        self.layers = EncoderStack(cfg.d, cfg.semantic_layers, rng, attention=cfg.attention)
        self.max_positions = cfg.max_positions

    def __call__(self, tokens: Sequence[int]) -> tuple[Tensor, Tensor]:
        tokens = [int(t) for t in tokens]
        vocab = self.embedding.shape[0]
        if any(not 0 <= t < vocab or t in (BOS, EOS) for t in tokens):
            raise DataError("text token outside the vocabulary")
        if len(tokens) > self.max_positions:
            raise DataError(f"text of {len(tokens)} tokens exceeds max_positions={self.max_positions}")
        ids = [BOS] + tokens + [EOS]
        embed = nc.take(self.embedding, np.array(ids)) + self.positions[: len(ids)]
        return embed, self.layers(embed)


@dataclass
class SpeechEncoding:
    posterior: CtcPosterior
    compressed: CompressedSequence
    semantic_input: Tensor | None = None
    semantic_output: Tensor | None = None

    @property
    def empty(self) -> bool:
        return self.compressed.empty


class SpeechEncoder(Module):
    """Acoustic encoder -> CTC head -> compression -> adapter -> strided conv ->
    special tokens + positions -> semantic encoder."""

    frozen_in_st = ("input_proj", "acoustic", "ctc_head")

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        d = cfg.d
        self.input_proj = Linear(cfg.input_dim, d, rng)
        self.acoustic = EncoderStack(d, cfg.acoustic_layers, rng, attention=cfg.attention)
        self.ctc_head = Linear(d, cfg.ctc_vocab_size, rng)
        self.adapter_in = Linear(d, cfg.adapter_expansion * d, rng)
        self.adapter_out = Linear(cfg.adapter_expansion * d, d, rng)
        self.conv_kernel = nc.parameter(rng.normal(0, 1 / math.sqrt(cfg.conv_width * d),
                                                   size=(cfg.conv_width * d, d)))
        self.conv_bias = nc.parameter(np.zeros((1, d)))
        self.t_bos = nc.parameter(rng.normal(size=(1, d)))
        self.t_eos = nc.parameter(rng.normal(size=(1, d)))
        self.positions = nc.parameter(0.1 * rng.normal(size=(cfg.max_positions + 2, d)))
        self.semantic = EncoderStack(d, cfg.semantic_layers, rng, attention=cfg.attention)
        self.conv_width = cfg.conv_width
        self.conv_stride = cfg.conv_stride
        self.max_positions = cfg.max_positions

    def acoustic_posterior(self, features) -> tuple[Tensor, CtcPosterior]:
        h = self.acoustic(self.input_proj(features))
        return h, CtcPosterior(nc.log_softmax(self.ctc_head(h), axis=1))

    def subsample(self, x: Tensor) -> Tensor:
        # zero-pad (width-1)/2 rows per side so the output has ceil(n/stride) rows
        pad = (self.conv_width - 1) // 2
        if pad:
            zeros = np.zeros((pad, x.shape[1]))
            x = nc.concat([zeros, x, zeros], axis=0)
        return nc.conv1d_strided(x, self.conv_kernel, self.conv_stride, self.conv_bias)

    def __call__(self, features) -> SpeechEncoding:
        features = nc.as_tensor(features)
        if features.shape[0] < 1:
            raise DataError("speech input has no frames")
        h, posterior = self.acoustic_posterior(features)
        compressed = ctc_compress(h, posterior)
        if compressed.empty:
            return SpeechEncoding(posterior, compressed)
        adapted = self.adapter_out(nc.gelu(self.adapter_in(compressed.features)))
        content = self.subsample(adapted)
        n = content.shape[0]
        if n > self.max_positions:
            raise DataError(f"{n} compressed rows exceed max_positions={self.max_positions}")
        semantic_input = nc.concat([self.t_bos, content, self.t_eos], axis=0) + self.positions[: n + 2]
        return SpeechEncoding(posterior, compressed, semantic_input, self.semantic(semantic_input))


class SiameseModel(Module):
    """Speech encoder trained to match a frozen text encoder.

    Pass ``text_encoder`` to align against a pretrained one (its weights are
    copied); otherwise the text encoder keeps its random initialization.
    """

    def __init__(self, cfg: EncoderConfig | None = None, seed: int = 0,
                 text_encoder: TextEncoder | None = None):
        self.cfg = cfg or EncoderConfig()
        rng = np.random.default_rng(seed)
        self.text = TextEncoder(self.cfg, rng)
        if text_encoder is not None:
            self.text.load_state_dict(text_encoder.state_dict())
        self.speech = SpeechEncoder(self.cfg, rng)
        self.init_from_text_encoder()
        self.text.set_trainable(False)

    def init_from_text_encoder(self):
        """Start special tokens, positions and semantic layers from the text encoder."""
        self.speech.t_bos.value = self.text.embedding.value[BOS:BOS + 1].copy()
        self.speech.t_eos.value = self.text.embedding.value[EOS:EOS + 1].copy()
        self.speech.positions.value = self.text.positions.value.copy()
        self.speech.semantic.load_state_dict(self.text.layers.state_dict())

    def trainable_parameters(self) -> list[Tensor]:
        return [p for p in self.parameters() if p.requires_grad]

    def loss(self, features, ctc_target, text_tokens) -> tuple[LossBreakdown | None, SpeechEncoding]:
        """Siamese loss for one utterance, or ``None`` when compression is empty."""
        cfg = self.cfg
        enc = self.speech(features)
        if enc.empty:
            return None, enc
        text_embed, text_encoded = self.text(text_tokens)
        l_ctc = ctc_loss(enc.posterior, ctc_target)
        l_ot1 = wasserstein_loss(enc.semantic_input, text_embed, cfg.sinkhorn, cfg.with_pe, cfg.pe_weight)
        l_ot2 = wasserstein_loss(enc.semantic_output, text_encoded, cfg.sinkhorn, cfg.with_pe, cfg.pe_weight)
        return combine_siamese(l_ctc, l_ot1, l_ot2, cfg.alpha, cfg.beta, cfg.gamma), enc


def siamese_loss(model: SiameseModel, features, ctc_target, text_tokens) -> LossBreakdown | None:
    return model.loss(features, ctc_target, text_tokens)[0]


# ---------------------------------------------------------------------------
# training


@dataclass
class SiameseTrainConfig:
    max_steps: int = 1500
    batch_size: int = 8
    learning_rate: float = PAPER_SIAMESE_LR
    warmup_steps: int = PAPER_WARMUP_STEPS
    validate_every: int = 25
    patience: int = PAPER_PATIENCE_STEPS
    keep_best: int = PAPER_AVERAGE_BEST
    seed: int = 0

    def __post_init__(self):
        if min(self.max_steps, self.batch_size, self.validate_every, self.keep_best) < 1:
            raise ConfigurationError("step counts, batch size and keep_best must be >= 1")
        if not self.learning_rate > 0 or self.warmup_steps < 1 or self.patience < 0:
            raise ConfigurationError("learning rate must be > 0, warmup >= 1 and patience >= 0")


@dataclass
class Checkpoint:
    score: float
    step: int
    state: "OrderedDict[str, np.ndarray]"


@dataclass
class SiameseTrainResult:
    checkpoints: list[Checkpoint]
    log: list[dict]
    skipped: int
    steps: int
    initial_val_ot2: float

    def metrics_csv(self) -> str:
        return metrics_csv(self.log, ["step", "l_ctc", "l_ot1", "l_ot2", "combined", "val_l_ot2"])


def metrics_csv(rows: list[dict], columns: list[str]) -> str:
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow(["" if row.get(c) is None else repr(row[c]) for c in columns])
    return buf.getvalue()


def validation_ot2(model: SiameseModel, utterances) -> float:
    values = []
    with nc.no_grad():
        for utt in utterances:
            enc = model.speech(utt.features)
            if enc.empty:
                continue
            _, text_encoded = model.text(utt.text_tokens)
            values.append(wasserstein_loss(enc.semantic_output, text_encoded, model.cfg.sinkhorn,
                                           model.cfg.with_pe, model.cfg.pe_weight).item())
    return float(np.mean(values)) if values else float("inf")


def _retain_best(checkpoints: list[Checkpoint], candidate: Checkpoint, keep: int) -> list[Checkpoint]:
    merged = sorted(checkpoints + [candidate], key=lambda c: (c.score, c.step))
    return merged[:keep]


def train_siamese(model: SiameseModel, train, valid, cfg: SiameseTrainConfig | None = None) -> SiameseTrainResult:
    """Adam + warm-up/inverse-sqrt; early stopping and checkpoint ranking on validation OT2."""
    cfg = cfg or SiameseTrainConfig()
    rng = np.random.default_rng(cfg.seed)
    optimizer = nc.Adam(model.trainable_parameters(), lr=cfg.learning_rate,
                        schedule=nc.InverseSqrtSchedule(cfg.learning_rate, cfg.warmup_steps))
    initial = validation_ot2(model, valid)
    log = [{"step": 0, "val_l_ot2": initial}]
    checkpoints = [Checkpoint(initial, 0, model.state_dict())]
    best, best_step = initial, 0
    skipped = 0
    running: dict[str, list[float]] = {k: [] for k in ("l_ctc", "l_ot1", "l_ot2", "combined")}
    order = rng.permutation(len(train))
    cursor = 0
    step = 0
    for step in range(1, cfg.max_steps + 1):
        optimizer.zero_grad()
        batch = []
        while len(batch) < cfg.batch_size:
            if cursor == len(order):
                order, cursor = rng.permutation(len(train)), 0
            batch.append(train[order[cursor]])
            cursor += 1
        used = 0
        for utt in batch:
            losses, _ = model.loss(utt.features, utt.ctc_target, utt.text_tokens)
            if losses is None:
                skipped += 1
                continue
            if not math.isfinite(losses.combined):
                raise TrainingDivergenceError(
                    f"step {step}: non-finite loss on {utt.id} "
                    f"(ctc={losses.l_ctc}, ot1={losses.l_ot1}, ot2={losses.l_ot2})"
                )
            (losses.total / len(batch)).backward()
            used += 1
            for k in running:
                running[k].append(getattr(losses, k))
        if used:
            optimizer.step()

        if step % cfg.validate_every == 0:
            val = validation_ot2(model, valid)
            row = {"step": step, "val_l_ot2": val}
            row.update({k: float(np.mean(v)) if v else None for k, v in running.items()})
            log.append(row)
            running = {k: [] for k in running}
            checkpoints = _retain_best(checkpoints, Checkpoint(val, step, model.state_dict()), cfg.keep_best)
            if val < best:
                best, best_step = val, step
            elif step - best_step > cfg.patience:
                logger.info("early stop at step %d (best val OT2 %.4f at %d)", step, best, best_step)
                break
    return SiameseTrainResult(checkpoints, log, skipped, step, initial)


def average_checkpoints(checkpoints, k: int = PAPER_AVERAGE_BEST) -> "OrderedDict[str, np.ndarray]":
    """Elementwise mean of the first ``k`` checkpoints (callers pass them best-first)."""
    states = [c.state if isinstance(c, Checkpoint) else c for c in checkpoints][:k]
    if not states:
        raise ConfigurationError("no checkpoints to average")
    keys = list(states[0])
    for s in states[1:]:
        if list(s) != keys or any(np.shape(s[n]) != np.shape(states[0][n]) for n in keys):
            raise DataError("checkpoints differ in parameter names or shapes")
    return OrderedDict((n, np.mean([s[n] for s in states], axis=0)) for n in keys)


# ---------------------------------------------------------------------------
# evaluation helpers


def ctc_corpus_wer(model: SiameseModel, utterances) -> float:
    from .ctc import decode_characters
    from .datapipe import word_edit_distance

    edits = words = 0
    with nc.no_grad():
        for utt in utterances:
            _, posterior = model.speech.acoustic_posterior(utt.features)
            hyp = decode_characters(ctc_greedy_decode(posterior))
            ref = utt.transcript.split()
            edits += word_edit_distance(ref, hyp.split())
            words += len(ref)
    return edits / words


def ot_distance_matrix(model: SiameseModel, utterances, candidates=None) -> np.ndarray:
    """OT2-style distance from every utterance's speech encoding to every candidate text."""
    candidates = utterances if candidates is None else candidates
    cfg = model.cfg
    with nc.no_grad():
        texts = [model.text(c.text_tokens)[1] for c in candidates]
        out = np.full((len(utterances), len(candidates)), np.inf)
        for i, utt in enumerate(utterances):
            enc = model.speech(utt.features)
            if enc.empty:
                continue
            for j, t in enumerate(texts):
                out[i, j] = wasserstein_loss(enc.semantic_output, t, cfg.sinkhorn, cfg.with_pe,
                                             cfg.pe_weight).item()
    return out


def retrieval_accuracy(model: SiameseModel, utterances) -> float:
    dist = ot_distance_matrix(model, utterances)
    return float(np.mean(np.argmin(dist, axis=1) == np.arange(len(utterances))))
