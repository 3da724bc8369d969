"""Experiment configuration: dataclasses, JSON loading, dotted overrides, seed derivation."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List

from .autograd import AdamConfig
from .vocab import ConfigurationError

LOSS_NAMES = ("s2i", "s2k", "s2v", "t2i", "t2k", "t2v", "asr")
STREAMS = ("speech_full", "speech_text", "text_only")
REGIMES = ("asr_pretrain", "nlu_pretrain", "e2e", "e2e_multitask")


def derive_seed(seed: int, name: str) -> int:
    """Stable child seed from (seed, component name)."""
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass
class DataConfig:
    n_examples: int = 2500
    split_ratios: List[float] = field(default_factory=lambda: [0.8, 0.1, 0.1])
    noise_level: float = 0.3
    k: int = 4
    d_feat: int = 32
    codebook_seed: int = 1234
    prototype_scale: float = 0.25
    min_count: int = 1
    # each revisit of a training utterance gets a new noise draw (a fresh "recording")
    resample_train_noise: bool = True

    def validate(self):
        if self.n_examples < 0:
            raise ConfigurationError("data.n_examples must be >= 0")
        if self.k < 1 or self.d_feat < 8:
            raise ConfigurationError("data.k must be >= 1 and data.d_feat >= 8")
        if self.noise_level < 0:
            raise ConfigurationError("data.noise_level must be nonnegative")


@dataclass
class AsrConfig:
    d: int = 64
    n_enc: int = 2
    n_dec: int = 2
    heads: int = 4
    d_ff: int = 128
    max_decode_len: int = 32
    dropout: float = 0.0
    frame_stack: int = 2

    def validate(self):
        if self.d % self.heads:
            raise ConfigurationError("asr.d must be divisible by asr.heads")
        if self.frame_stack < 1:
            raise ConfigurationError("asr.frame_stack must be >= 1")


@dataclass
class NluConfig:
    d: int = 64
    n_layers: int = 2
    heads: int = 4
    d_ff: int = 128
    max_len: int = 64
    dropout: float = 0.0

    def validate(self):
        if self.d % self.heads:
            raise ConfigurationError("nlu.d must be divisible by nlu.heads")


def default_weights() -> Dict[str, float]:
    return {name: 1.0 for name in LOSS_NAMES}


@dataclass
class TrainConfig:
    regime: str = "e2e"
    weights: Dict[str, float] = field(default_factory=default_weights)
    mask_prob: float = 0.15
    optimizer: AdamConfig = field(default_factory=AdamConfig)
    batch_size: int = 32
    steps: int = 500
    mlm_steps: int = 0
    mixing: Dict[str, float] = field(default_factory=lambda: {"speech_full": 1.0, "speech_text": 0.0,
                                                                "text_only": 0.0})
    e2e_decode_mode: str = "teacher_forced"
    freeze: List[str] = field(default_factory=list)
    eval_interval: int = 0
    eval_max_examples: int = 250
    temperature: float = 1.0

    def validate(self):
        if self.regime not in REGIMES:
            raise ConfigurationError(f"train.regime must be one of {REGIMES}, got {self.regime!r}")
        if self.steps <= 0:
            raise ConfigurationError("train.steps must be > 0")
        if self.batch_size <= 0:
            raise ConfigurationError("train.batch_size must be > 0")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ConfigurationError("train.mask_prob must be in [0, 1]")
        unknown = set(self.weights) - set(LOSS_NAMES)
        if unknown:
            raise ConfigurationError(f"unknown loss weights {sorted(unknown)}")
        if any(w < 0 for w in self.weights.values()):
            raise ConfigurationError("loss weights must be nonnegative")
        unknown = set(self.mixing) - set(STREAMS)
        if unknown:
            raise ConfigurationError(f"unknown streams {sorted(unknown)}")
        ratios = list(self.mixing.values())
        if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
            raise ConfigurationError("train.mixing ratios must be nonnegative and sum to 1")
        if self.e2e_decode_mode not in ("teacher_forced", "greedy"):
            raise ConfigurationError("train.e2e_decode_mode must be teacher_forced or greedy")
        if self.temperature <= 0:
            raise ConfigurationError("train.temperature must be positive")

    def weight(self, name: str) -> float:
        return float(self.weights.get(name, 0.0))


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    asr: AsrConfig = field(default_factory=AsrConfig)
    nlu: NluConfig = field(default_factory=NluConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "ExperimentConfig":
        for part in (self.data, self.asr, self.nlu, self.train):
            part.validate()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        return _build(cls, doc, "")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(doc).validate()

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def with_overrides(self, pairs: List[str]) -> "ExperimentConfig":
        doc = self.to_dict()
        for pair in pairs:
            if "=" not in pair:
                raise ConfigurationError(f"override {pair!r} is not key=value")
            key, raw = pair.split("=", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            node = doc
            parts = key.split(".")
            for p in parts[:-1]:
                if not isinstance(node, dict) or p not in node:
                    raise ConfigurationError(f"unknown config key {key!r}")
                node = node[p]
            if not isinstance(node, dict) or parts[-1] not in node:
                raise ConfigurationError(f"unknown config key {key!r}")
            node[parts[-1]] = value
        return ExperimentConfig.from_dict(doc).validate()


def _build(cls, doc, path):
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{path or 'config'} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(doc) - set(fields)
    if unknown:
        raise ConfigurationError(f"unknown config keys at {path or 'top level'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in doc.items():
        sub = _NESTED.get((cls.__name__, name))
        kwargs[name] = _build(sub, value, f"{path}{name}.") if sub else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc


_NESTED = {
    ("ExperimentConfig", "data"): DataConfig,
    ("ExperimentConfig", "asr"): AsrConfig,
    ("ExperimentConfig", "nlu"): NluConfig,
    ("ExperimentConfig", "train"): TrainConfig,
    ("TrainConfig", "optimizer"): AdamConfig,
}


def small_config(seed: int = 0) -> ExperimentConfig:
    """A fast configuration for tests and demos."""
    cfg = ExperimentConfig(seed=seed)
    cfg.data.n_examples = 300
    cfg.asr = AsrConfig(d=32, n_enc=1, n_dec=1, heads=2, d_ff=64)
    cfg.nlu = NluConfig(d=32, n_layers=1, heads=2, d_ff=64)
    cfg.train.steps = 50
    return cfg
