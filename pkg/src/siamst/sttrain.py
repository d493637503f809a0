"""Speech-translation fine-tuning with top-k / temperature knowledge distillation."""

from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from .errors import ConfigurationError, DataError, NumericalError, TrainingDivergenceError
from .layers import Attention, FeedForwardBlock, LayerNorm, Linear, Module
from .metrics import corpus_bleu
from .numcore import Tensor
from .siamese import PAPER_AVERAGE_BEST, Checkpoint, EncoderConfig, LossBreakdown, SpeechEncoder, TextEncoder, metrics_csv
from .toydata import TGT_BOS, TGT_EOS, TGT_VOCAB_SIZE, target_text

logger = logging.getLogger(__name__)

PAPER_TOP_K = 8
PAPER_TEMPERATURE = 1.3
PAPER_LAMBDA = 0.5
PAPER_LABEL_SMOOTHING = 0.2
PAPER_BEAM_SIZE = 5
PAPER_ST_LR = 5e-5
PAPER_ST_FINAL_LR = 5e-7


@dataclass
class KdConfig:
    k: int = PAPER_TOP_K
    temperature: float = PAPER_TEMPERATURE
    lam: float = PAPER_LAMBDA
    enabled: bool = True
    label_smoothing: float | None = None  # None: 0.2 without KD, 0 with KD

    def __post_init__(self):
        if self.k < 1:
            raise ConfigurationError("top-k must be >= 1")
        if not self.temperature > 0:
            raise ConfigurationError("temperature must be > 0")
        if not 0 <= self.lam <= 1:
            raise ConfigurationError("lambda must lie in [0, 1]")
        if self.label_smoothing is not None and not 0 <= self.label_smoothing < 1:
            raise ConfigurationError("label smoothing must lie in [0, 1)")

    @property
    def smoothing(self) -> float:
        if self.label_smoothing is not None:
            return self.label_smoothing
        return 0.0 if self.enabled else PAPER_LABEL_SMOOTHING


@dataclass
class TeacherEntry:
    """Top-k teacher distribution at one target position (probabilities sum to 1)."""

    indices: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=int)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if len(set(self.indices.tolist())) != self.indices.size:
            raise DataError("teacher indices must be distinct")
        if np.any(self.probs <= 0) or abs(self.probs.sum() - 1) > 1e-9:
            raise DataError("teacher probabilities must be positive and sum to 1")


def soften(logits, temperature: float = PAPER_TEMPERATURE) -> np.ndarray:
    """``softmax(logits / T)`` along the last axis."""
    if not temperature > 0:
        raise ConfigurationError("temperature must be > 0")
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def truncate_topk(dist, k: int = PAPER_TOP_K) -> TeacherEntry:
    """Keep the ``k`` most probable entries (lower index wins ties) and renormalize."""
    dist = np.asarray(dist, dtype=np.float64)
    k = min(k, dist.size)
    order = np.lexsort((np.arange(dist.size), -dist))[:k]
    kept = dist[order]
    return TeacherEntry(order, kept / kept.sum())


def kl_loss(teacher: Sequence[TeacherEntry], student_log_probs) -> Tensor:
    """Mean over positions of KL(teacher || student restricted to the teacher's indices).

    The student is renormalized over the kept indices, so the loss is a
    proper KL divergence and non-negative.
    """
    student_log_probs = nc.as_tensor(student_log_probs)
    if len(teacher) != student_log_probs.shape[0]:
        raise DataError(f"{len(teacher)} teacher positions vs {student_log_probs.shape[0]} student rows")
    k = teacher[0].indices.size
    if any(t.indices.size != k for t in teacher):
        raise DataError("teacher entries must all keep the same number of indices")
    rows = np.repeat(np.arange(len(teacher)), k).reshape(len(teacher), k)
    cols = np.stack([t.indices for t in teacher])
    gathered = student_log_probs[(rows, cols)]
    if not np.all(np.isfinite(gathered.value)):
        raise NumericalError("student assigns zero probability to a teacher index")
    student = nc.log_softmax(gathered, axis=1)
    p = np.stack([t.probs for t in teacher])
    per_position = nc.sum(p * (np.log(p) - student), axis=1)
    return nc.mean(per_position)


def label_smoothed_ce(student_log_probs, targets, smoothing: float = PAPER_LABEL_SMOOTHING) -> Tensor:
    """``(1-s) * NLL(target) + s * mean_v(-log p_v)``, averaged over positions."""
    if not 0 <= smoothing < 1:
        raise ConfigurationError("smoothing must lie in [0, 1)")
    lp = nc.as_tensor(student_log_probs)
    targets = np.asarray(targets, dtype=int)
    if targets.size != lp.shape[0]:
        raise DataError("one target per position required")
    if np.any((targets < 0) | (targets >= lp.shape[1])):
        raise DataError("target id outside the vocabulary")
    nll = -lp[(np.arange(targets.size), targets)]
    loss = (1 - smoothing) * nll
    if smoothing:
        loss = loss + smoothing * (-nc.mean(lp, axis=1))
    return nc.mean(loss)


def st_loss(ce, kl, lam: float = PAPER_LAMBDA) -> LossBreakdown:
    """``lam * CE + (1 - lam) * KL``."""
    if not 0 <= lam <= 1:
        raise ConfigurationError("lambda must lie in [0, 1]")
    total = lam * nc.as_tensor(ce) + (1 - lam) * nc.as_tensor(kl)
    return LossBreakdown(l_ce=float(nc.as_tensor(ce).value), l_kl=float(nc.as_tensor(kl).value),
                         lam=lam, combined=total.item(), total=total)


# ---------------------------------------------------------------------------
# models


class Decoder(Module):
    """Previous-token embedding + position, one cross-attention block, one feed-forward block."""

    def __init__(self, d: int, rng: np.random.Generator, vocab: int = TGT_VOCAB_SIZE, max_len: int = 32):
        self.embedding = nc.parameter(rng.normal(size=(vocab, d)))
        self.positions = nc.parameter(rng.normal(size=(max_len + 1, d)))
        self.cross = Attention(d, rng)
        self.ffn = FeedForwardBlock(d, rng)
        self.norm = LayerNorm(d)
        self.out = Linear(d, vocab, rng)
        self.max_len = max_len

    def __call__(self, memory, prefix: Sequence[int]) -> Tensor:
        """Logits for the token after each prefix position; ``prefix`` starts with BOS."""
        if len(prefix) > self.max_len + 1:
            raise DataError(f"target longer than decoder max_len={self.max_len}")
        x = nc.take(self.embedding, np.asarray(prefix, dtype=int)) + self.positions[: len(prefix)]
        x = self.ffn(self.cross(x, memory=memory))
        return self.out(self.norm(x))


class _Seq2Seq(Module):
    def encode(self, source):
        raise NotImplementedError

    def log_probs(self, memory, target: Sequence[int], temperature: float = 1.0) -> Tensor:
        """Teacher-forced log-probabilities for ``target + [EOS]``."""
        logits = self.decoder(memory, [TGT_BOS] + list(target))
        return nc.log_softmax(logits / temperature if temperature != 1 else logits, axis=1)

    def next_log_probs(self, memory, prefix: Sequence[int]) -> np.ndarray:
        with nc.no_grad():
            logits = self.decoder(memory, [TGT_BOS] + list(prefix))
        row = logits.value[-1]
        row = row - row.max()
        return row - np.log(np.exp(row).sum())


class MTModel(_Seq2Seq):
    """Text-to-text model; plays the role of the pretrained MT system.

    With ``train_encoder=False`` the text encoder is frozen and only the
    decoder learns.
    """

    def __init__(self, text_encoder: TextEncoder, d: int, seed: int = 0, max_len: int = 32,
                 train_encoder: bool = True):
        self.text = text_encoder
        self.text.set_trainable(train_encoder)
        self.decoder = Decoder(d, np.random.default_rng(seed), max_len=max_len)

    def encode(self, tokens):
        return self.text(tokens)[1]


class STModel(_Seq2Seq):
    def __init__(self, cfg: EncoderConfig, seed: int = 0, max_len: int = 32):
        rng = np.random.default_rng(seed)
        self.encoder = SpeechEncoder(cfg, rng)
        self.decoder = Decoder(cfg.d, rng, max_len=max_len)

    def encode(self, features):
        enc = self.encoder(features)
        return None if enc.empty else enc.semantic_output

    def frozen_modules(self) -> list[Module]:
        return [getattr(self.encoder, name) for name in SpeechEncoder.frozen_in_st]

    def freeze_frontend(self):
        for module in self.frozen_modules():
            module.set_trainable(False)

    def frozen_state(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for name in SpeechEncoder.frozen_in_st:
            for key, value in getattr(self.encoder, name).state_dict().items():
                out[f"encoder.{name}.{key}"] = value
        return out

    def load_encoder(self, siamese_state, parts: str = "all"):
        """Copy the speech encoder out of a Siamese checkpoint.

        ``parts="frontend"`` copies only the modules frozen during ST (the
        ASR-pretrained part), leaving coupling modules and semantic layers
        at their fresh initialization.
        """
        speech = OrderedDict((k[len("speech."):], v) for k, v in siamese_state.items()
                             if k.startswith("speech."))
        if not speech:
            raise DataError("checkpoint contains no 'speech.*' parameters")
        if parts == "all":
            self.encoder.load_state_dict(speech)
        elif parts == "frontend":
            own = self.encoder.state_dict()
            own.update({k: v for k, v in speech.items() if k.split(".")[0] in SpeechEncoder.frozen_in_st})
            self.encoder.load_state_dict(own)
        else:
            raise ConfigurationError(f"unknown encoder parts {parts!r}")


def init_st_model(cfg: EncoderConfig, siamese_state=None, text_model: MTModel | None = None,
                  parts: str = "all", seed: int = 0) -> STModel:
    """ST model with its encoder from a Siamese checkpoint and its decoder from the text model.

    ``parts="frontend"`` is the randomly initialized baseline: only the
    ASR front-end comes from the checkpoint.
    """
    model = STModel(cfg, seed)
    if siamese_state is not None:
        model.load_encoder(siamese_state, parts)
    if text_model is not None:
        model.decoder.load_state_dict(text_model.decoder.state_dict())
    return model


# ---------------------------------------------------------------------------
# decoding


@dataclass
class Hypothesis:
    tokens: list[int]
    score: float

    @property
    def normalized_score(self) -> float:
        return self.score / max(len(self.tokens), 1)


def beam_search_fn(step_fn: Callable[[list[int]], np.ndarray], beam_size: int = PAPER_BEAM_SIZE,
                   max_len: int = 20, eos: int = TGT_EOS) -> Hypothesis:
    """Beam search over ``step_fn(prefix) -> log-probabilities of the next token``.

    Each step keeps the ``beam_size`` best expansions by summed log-probability;
    expansions ending in EOS retire to the finished pool.  The answer is the
    finished hypothesis with the best per-token score (EOS counts as a token).
    """
    if beam_size < 1:
        raise ConfigurationError("beam_size must be >= 1")
    beams = [Hypothesis([], 0.0)]
    finished: list[Hypothesis] = []
    for step in range(max_len):
        candidates = []
        for hyp in beams:
            lp = np.asarray(step_fn(hyp.tokens), dtype=np.float64)
            for v in np.argsort(-lp, kind="stable")[:beam_size]:
                candidates.append(Hypothesis(hyp.tokens + [int(v)], hyp.score + float(lp[v])))
        candidates.sort(key=lambda h: (-h.score, h.tokens))
        top = candidates[:beam_size]
        finished += [h for h in top if h.tokens[-1] == eos]
        beams = [h for h in top if h.tokens[-1] != eos]
        if not beams:
            break
    finished += beams  # unfinished at max_len
    return max(finished, key=lambda h: (h.normalized_score, -len(h.tokens)))


def ensemble_step_fn(models: Sequence[_Seq2Seq], memories) -> Callable[[list[int]], np.ndarray]:
    """Arithmetic mean of member log-probabilities."""

    def step(prefix):
        return np.mean([m.next_log_probs(mem, prefix) for m, mem in zip(models, memories)], axis=0)

    return step


def beam_search(models, source, beam_size: int = PAPER_BEAM_SIZE, max_len: int = 20) -> Hypothesis:
    models = models if isinstance(models, (list, tuple)) else [models]
    with nc.no_grad():
        memories = [m.encode(source) for m in models]
    if any(mem is None for mem in memories):
        return Hypothesis([TGT_EOS], 0.0)
    return beam_search_fn(ensemble_step_fn(models, memories), beam_size, max_len)


def greedy_decode(model, source, max_len: int = 20) -> list[int]:
    with nc.no_grad():
        memory = model.encode(source)
    if memory is None:
        return [TGT_EOS]
    tokens: list[int] = []
    for _ in range(max_len):
        tokens.append(int(np.argmax(model.next_log_probs(memory, tokens))))
        if tokens[-1] == TGT_EOS:
            break
    return tokens


def translate(models, sources, beam_size: int = PAPER_BEAM_SIZE, max_len: int = 20,
              jobs: int = 1) -> list[str]:
    """Detokenized hypotheses in input order."""
    def one(src):
        if beam_size == 1 and not isinstance(models, (list, tuple)):
            return target_text(greedy_decode(models, src, max_len))
        return target_text(beam_search(models, src, beam_size, max_len).tokens)

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one, sources))
    return [one(s) for s in sources]


# ---------------------------------------------------------------------------
# teacher tables and training


def build_teacher_table(mt_model: MTModel, utterances, k: int = PAPER_TOP_K,
                        temperature: float = PAPER_TEMPERATURE) -> dict:
    """Offline top-k softened teacher distributions for every target position (incl. EOS)."""
    table = {}
    with nc.no_grad():
        for utt in utterances:
            memory = mt_model.encode(utt.text_tokens)
            logits = mt_model.decoder(memory, [TGT_BOS] + list(utt.target)).value
            table[utt.id] = [truncate_topk(row, k) for row in soften(logits, temperature)]
    return table


@dataclass
class STTrainConfig:
    max_steps: int = 600
    batch_size: int = 8
    learning_rate: float = PAPER_ST_LR
    final_learning_rate: float | None = None  # default: learning_rate / 100
    hold_fraction: float = 0.2
    validate_every: int = 25
    keep_best: int = PAPER_AVERAGE_BEST
    beam_size: int = 1  # decoding during validation; final evaluation uses PAPER_BEAM_SIZE
    seed: int = 0
    kd: KdConfig = field(default_factory=KdConfig)

    def __post_init__(self):
        if isinstance(self.kd, dict):
            self.kd = KdConfig(**self.kd)
        if min(self.max_steps, self.batch_size, self.validate_every, self.keep_best, self.beam_size) < 1:
            raise ConfigurationError("step counts, batch size, keep_best and beam size must be >= 1")
        if not self.learning_rate > 0 or not 0 <= self.hold_fraction <= 1:
            raise ConfigurationError("learning rate must be > 0 and hold_fraction in [0, 1]")


@dataclass
class STTrainResult:
    checkpoints: list[Checkpoint]
    log: list[dict]
    skipped: int

    def steps_to_reach(self, bleu: float) -> int | None:
        for row in self.log:
            if row["val_bleu"] >= bleu:
                return row["step"]
        return None

    @property
    def best_bleu(self) -> float:
        return max(row["val_bleu"] for row in self.log)

    def metrics_csv(self) -> str:
        return metrics_csv(self.log, ["step", "l_ce", "l_kl", "combined", "val_bleu"])


def validation_bleu(model, utterances, beam_size: int = 1, smoothing: str = "add-k") -> float:
    hyps = translate(model, [u.features for u in utterances], beam_size=beam_size)
    return corpus_bleu(hyps, [u.translation for u in utterances], smoothing=smoothing).score


def train_mt(model: MTModel, train, max_steps: int = 400, batch_size: int = 8, lr: float = 3e-3,
             seed: int = 0) -> list[float]:
    """Fit the teacher decoder with plain cross-entropy; returns per-step losses."""
    rng = np.random.default_rng(seed)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = nc.Adam(params, lr=lr, schedule=nc.InverseSqrtSchedule(lr, 50))
    losses = []
    for _ in range(max_steps):
        opt.zero_grad()
        total = 0.0
        for i in rng.choice(len(train), size=batch_size, replace=False):
            utt = train[i]
            lp = model.log_probs(model.encode(utt.text_tokens), utt.target)
            loss = label_smoothed_ce(lp, list(utt.target) + [TGT_EOS], 0.0) / batch_size
            loss.backward()
            total += loss.item()
        opt.step()
        losses.append(total)
    return losses


def train_st(model: STModel, train, valid, cfg: STTrainConfig | None = None,
             teacher: dict | None = None) -> STTrainResult:
    """Fine-tune everything except the acoustic front-end and CTC head.

    With ``cfg.kd.enabled`` the loss is ``lam * CE + (1 - lam) * KL`` against
    ``teacher`` (a table from :func:`build_teacher_table`); otherwise it is
    label-smoothed CE.  Checkpoints are ranked by validation BLEU.
    """
    cfg = cfg or STTrainConfig()
    kd = cfg.kd
    if kd.enabled and teacher is None:
        raise ConfigurationError("knowledge distillation needs a teacher table")
    model.freeze_frontend()
    rng = np.random.default_rng(cfg.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    final_lr = cfg.final_learning_rate or cfg.learning_rate / 100
    opt = nc.Adam(params, lr=cfg.learning_rate,
                  schedule=nc.HoldThenDecaySchedule(cfg.learning_rate, final_lr, cfg.max_steps,
                                                    cfg.hold_fraction))

    bleu0 = validation_bleu(model, valid, cfg.beam_size)
    log = [{"step": 0, "val_bleu": bleu0}]
    checkpoints = [Checkpoint(-bleu0, 0, model.state_dict())]
    running = {"l_ce": [], "l_kl": [], "combined": []}
    skipped = 0
    order, cursor = rng.permutation(len(train)), 0
    for step in range(1, cfg.max_steps + 1):
        opt.zero_grad()
        for _ in range(cfg.batch_size):
            if cursor == len(order):
                order, cursor = rng.permutation(len(train)), 0
            utt = train[order[cursor]]
            cursor += 1
            memory = model.encode(utt.features)
            if memory is None:
                skipped += 1
                continue
            gold = list(utt.target) + [TGT_EOS]
            ce = label_smoothed_ce(model.log_probs(memory, utt.target), gold, kd.smoothing)
            if kd.enabled:
                student = model.log_probs(memory, utt.target, temperature=kd.temperature)
                losses = st_loss(ce, kl_loss(teacher[utt.id], student), kd.lam)
            else:
                losses = st_loss(ce, 0.0, 1.0)
            if not math.isfinite(losses.combined):
                raise TrainingDivergenceError(f"step {step}: non-finite ST loss on {utt.id}")
            (losses.total / cfg.batch_size).backward()
            running["l_ce"].append(losses.l_ce)
            running["l_kl"].append(losses.l_kl)
            running["combined"].append(losses.combined)
        opt.step()
        if step % cfg.validate_every == 0 or step == cfg.max_steps:
            bleu = validation_bleu(model, valid, cfg.beam_size)
            row = {"step": step, "val_bleu": bleu}
            row.update({k: float(np.mean(v)) if v else None for k, v in running.items()})
            log.append(row)
            running = {k: [] for k in running}
            checkpoints = sorted(checkpoints + [Checkpoint(-bleu, step, model.state_dict())],
                                 key=lambda c: (c.score, c.step))[: cfg.keep_best]
    return STTrainResult(checkpoints, log, skipped)
