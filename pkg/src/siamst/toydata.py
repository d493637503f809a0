"""Synthetic corpora for the desk-scale experiments.

"Speech" renders every transcript character as 2-4 noisy copies of a fixed
per-character prototype vector.  Text is tokenized into character bigrams so
that a stride-2 reduction of the character sequence matches the text length.
Translations replace each word by a cipher symbol and swap adjacent words.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ctc import CHARACTERS, encode_characters
from .datapipe import ParallelExample, ctc_text, normalize_text
from .errors import DataError

LETTERS = "abcdefghijklmnopqrstuvwxyz"

# text vocabulary: specials, single characters, character bigrams
PAD, BOS, EOS = 0, 1, 2
_TEXT_UNITS = list(CHARACTERS) + ["".join(p) for p in itertools.product(CHARACTERS, repeat=2)]
TEXT_VOCAB = {unit: i + 3 for i, unit in enumerate(_TEXT_UNITS)}
TEXT_VOCAB_SIZE = len(TEXT_VOCAB) + 3

# target vocabulary: BOS, EOS, then one symbol per lexicon word
TGT_BOS, TGT_EOS = 0, 1
LEXICON_SIZE = 28
TGT_VOCAB_SIZE = LEXICON_SIZE + 2


def make_lexicon(size: int = LEXICON_SIZE, seed: int = 1234, word_length: int = 3) -> list[str]:
    """Distinct words without doubled adjacent letters (greedy CTC can then decode them)."""
    rng = np.random.default_rng(seed)
    words: list[str] = []
    while len(words) < size:
        letters = [rng.choice(list(LETTERS))]
        while len(letters) < word_length:
            c = rng.choice(list(LETTERS))
            if c != letters[-1]:
                letters.append(c)
        w = "".join(letters)
        if w not in words:
            words.append(w)
    return words


def bigram_tokens(text: str) -> list[int]:
    return [TEXT_VOCAB[text[i:i + 2]] for i in range(0, len(text), 2)]


def cipher_translation(word_ids: list[int]) -> list[int]:
    """Target symbols: word i -> symbol i + 2, then swap each adjacent pair."""
    symbols = [w + 2 for w in word_ids]
    out = []
    for i in range(0, len(symbols), 2):
        out += symbols[i:i + 2][::-1]
    return out


def target_text(symbols) -> str:
    return " ".join(f"w{s}" for s in symbols if s not in (TGT_BOS, TGT_EOS))


@dataclass
class ToyUtterance:
    id: str
    transcript: str
    features: np.ndarray
    ctc_target: list[int]
    text_tokens: list[int]
    target: list[int] = field(default_factory=list)

    @property
    def translation(self) -> str:
        return target_text(self.target)


@dataclass
class ToyCorpus:
    train: list[ToyUtterance]
    valid: list[ToyUtterance]
    lexicon: list[str]
    prototypes: np.ndarray


def make_corpus(n_train: int = 500, n_valid: int = 100, feature_dim: int = 16, noise: float = 0.3,
                min_words: int = 3, max_words: int = 6, seed: int = 0,
                lexicon_seed: int = 1234) -> ToyCorpus:
    """Character-speech corpus with distinct transcripts across both splits."""
    lexicon = make_lexicon(seed=lexicon_seed)
    proto_rng = np.random.default_rng(lexicon_seed + 1)
    prototypes = proto_rng.normal(size=(len(CHARACTERS) + 1, feature_dim))
    rng = np.random.default_rng(seed)
    seen: set[str] = set()
    utterances = []
    while len(utterances) < n_train + n_valid:
        n_words = int(rng.integers(min_words, max_words + 1))
        word_ids = [int(i) for i in rng.integers(0, len(lexicon), size=n_words)]
        transcript = " ".join(lexicon[i] for i in word_ids)
        if transcript in seen:
            continue
        seen.add(transcript)
        chars = encode_characters(transcript)
        repeats = rng.integers(2, 5, size=len(chars))
        frames = np.repeat(np.array(chars), repeats)
        feats = prototypes[frames] + noise * rng.normal(size=(frames.size, feature_dim))
        utterances.append(ToyUtterance(
            id=f"utt{len(utterances):05d}", transcript=transcript, features=feats,
            ctc_target=chars, text_tokens=bigram_tokens(transcript),
            target=cipher_translation(word_ids),
        ))
    return ToyCorpus(utterances[:n_train], utterances[n_train:], lexicon, prototypes)


def parse_target_text(text: str) -> list[int]:
    """Inverse of :func:`target_text`."""
    symbols = []
    for tok in text.split():
        if not (tok.startswith("w") and tok[1:].isdigit()) or not 2 <= int(tok[1:]) < TGT_VOCAB_SIZE:
            raise DataError(f"translation token {tok!r} is not in the target vocabulary")
        symbols.append(int(tok[1:]))
    return symbols


def utterance_from_example(example: ParallelExample, features: np.ndarray) -> ToyUtterance:
    """Model-ready view of a manifest example: normalized transcript, CTC ids, text tokens, target ids."""
    text = ctc_text(normalize_text(example.transcript))
    if not text:
        raise DataError(f"example {example.id}: transcript is empty after normalization")
    return ToyUtterance(
        id=example.id, transcript=text, features=np.asarray(features, dtype=np.float64),
        ctc_target=encode_characters(text), text_tokens=bigram_tokens(text),
        target=parse_target_text(example.translation) if example.translation else [],
    )


def load_utterances(manifest_path) -> list[ToyUtterance]:
    from .io import load_example_features, read_manifest

    return [utterance_from_example(ex, load_example_features(manifest_path, ex))
            for ex in read_manifest(manifest_path)]


def write_corpus(corpus: ToyCorpus, out_dir, frame_rate: float = 100.0) -> dict:
    """Write ``train.jsonl`` / ``valid.jsonl`` manifests plus one feature file per utterance."""
    from .io import write_features, write_manifest

    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    paths = {}
    for split, utts in (("train", corpus.train), ("valid", corpus.valid)):
        examples = []
        for utt in utts:
            rel = f"features/{utt.id}.smst"
            write_features(out / rel, utt.features)
            examples.append(ParallelExample(
                id=utt.id, talk_id="toy", duration=len(utt.features) / frame_rate,
                transcript=utt.transcript, translation=utt.translation, features=rel,
                source_tag=f"toy-{split}",
            ))
        paths[split] = out / f"{split}.jsonl"
        write_manifest(paths[split], examples)
    return paths
