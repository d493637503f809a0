"""Run configuration: one YAML file mirroring every stage's settings.

Every key is optional; missing keys take the defaults of the underlying
dataclasses (the published constants where they exist).  Unknown keys are
rejected with their dotted path.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .datapipe import LENGTH_RATIO_BOUNDS, MIN_CHARACTERS, ST_WER_THRESHOLD, TARGET_CORPUS_WER, TFIDF_THRESHOLD
from .errors import ConfigurationError
from .segtool import TED_GRID_UPPER
from .siamese import PAPER_AVERAGE_BEST, EncoderConfig, SiameseTrainConfig
from .sttrain import PAPER_BEAM_SIZE, STTrainConfig


@dataclass
class TextModelConfig:
    """Toy MT pretraining; stands in for the pretrained text model."""

    max_steps: int = 1500
    batch_size: int = 8
    learning_rate: float = 3e-3


@dataclass
class FilterConfig:
    target_corpus_wer: float = TARGET_CORPUS_WER
    st_wer_threshold: float = ST_WER_THRESHOLD
    min_characters: int = MIN_CHARACTERS
    length_ratio_min: float = LENGTH_RATIO_BOUNDS[0]
    length_ratio_max: float = LENGTH_RATIO_BOUNDS[1]
    tfidf_threshold: float = TFIDF_THRESHOLD


@dataclass
class SegmentConfig:
    grid_upper: float = TED_GRID_UPPER
    grid_step: float = 2.0
    grid_smallest: float = 0.2
    # target of the synthetic mean-length scorer used when no ST system is attached
    target_mean_length: float = 8.0


@dataclass
class DecodeConfig:
    beam_size: int = PAPER_BEAM_SIZE
    max_len: int = 20


@dataclass
class RunConfig:
    seed: int = 0
    average_best: int = PAPER_AVERAGE_BEST
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    text_model: TextModelConfig = field(default_factory=TextModelConfig)
    siamese: SiameseTrainConfig = field(default_factory=SiameseTrainConfig)
    st: STTrainConfig = field(default_factory=STTrainConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    segment: SegmentConfig = field(default_factory=SegmentConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)

    def __post_init__(self):
        # one seed drives every stage
        self.siamese.seed = self.seed
        self.st.seed = self.seed

    def with_seed(self, seed: int) -> "RunConfig":
        out = copy.deepcopy(self)
        out.seed = seed
        out.__post_init__()
        return out

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for stage in ("siamese", "st"):
            out[stage].pop("seed")
        return out

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# keys set elsewhere and therefore not accepted from files
_RESERVED = {"siamese.seed": "seed", "st.seed": "seed"}


def _coerce(value, annotation, where: str):
    origin = typing.get_origin(annotation)
    if origin in (typing.Union, types.UnionType):
        options = typing.get_args(annotation)
        if value is None and type(None) in options:
            return None
        annotation = next(a for a in options if a is not type(None))
    if annotation is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{where}: expected true/false, got {value!r}")
        return value
    if annotation is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{where}: expected an integer, got {value!r}")
        return value
    if annotation is float:
        if isinstance(value, bool):
            raise ConfigurationError(f"{where}: expected a number, got {value!r}")
        try:
            # YAML 1.1 reads "2e-4" as a string
            return float(value)
        except (TypeError, ValueError):
            raise ConfigurationError(f"{where}: expected a number, got {value!r}") from None
    return value


def _build(cls, data, where: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    kwargs = {}
    for key, value in data.items():
        path = f"{where}.{key}" if where else str(key)
        if path in _RESERVED:
            raise ConfigurationError(f"{path}: set the top-level '{_RESERVED[path]}' instead")
        if key not in names:
            raise ConfigurationError(f"unknown config key {path!r}")
        annotation = hints[key]
        if dataclasses.is_dataclass(annotation):
            kwargs[key] = _build(annotation, value, path)
        else:
            kwargs[key] = _coerce(value, annotation, path)
    return cls(**kwargs)


def config_from_dict(data: dict | None) -> RunConfig:
    return _build(RunConfig, data, "")


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    """Read ``path`` (YAML) and apply ``key.sub=value`` overrides; no path means all defaults."""
    data: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from None
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"{path}: invalid YAML: {exc}") from None
    for item in overrides or []:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigurationError(f"override {item!r} is not of the form key=value")
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"override {item!r}: {part} is not a section")
        node[parts[-1]] = yaml.safe_load(raw)
    return config_from_dict(data)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(json.loads(json.dumps(cfg.to_dict())), sort_keys=True)
