"""Synthetic SLU corpus and simulated acoustic features.

Utterances come from a template grammar with slot placeholders. "Speech" is a
prototype-plus-Gaussian-noise channel: every token id owns a fixed
pseudo-random prototype frame, repeated ``k`` times with per-frame noise.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .vocab import ConfigurationError

DEFAULT_INTENTS: Dict[str, List[str]] = {
    "alarm_set": [
        "set an alarm for {time}",
        "wake me up at {time} {date}",
        "set alarm at {time}",
        "please set an alarm for {date} at {time}",
        "i need an alarm at {time}",
        "alarm for {time} please",
    ],
    "alarm_remove": [
        "cancel my alarm for {time}",
        "remove the alarm at {time}",
        "delete the alarm for {date}",
        "turn off the alarm for {time}",
        "cancel all alarms {date}",
        "i do not need the alarm at {time}",
    ],
    "music_play": [
        "play some {artist}",
        "play music by {artist}",
        "i want to hear {artist}",
        "put on {artist} in the {room}",
        "play {artist} songs",
        "start playing {artist} {date}",
    ],
    "weather_query": [
        "what is the weather in {place}",
        "will it rain in {place} {date}",
        "how hot is it in {place}",
        "what is the weather for {date}",
        "is it cold in {place} {date}",
        "tell me the forecast for {place}",
    ],
    "lights_on": [
        "turn on the lights in the {room}",
        "switch on the {room} lights",
        "lights on in the {room}",
        "turn the {room} light on",
        "make the {room} brighter",
        "turn on the lights",
    ],
    "lights_off": [
        "turn off the lights in the {room}",
        "switch off the {room} lights",
        "lights off in the {room}",
        "turn the {room} light off",
        "make the {room} dark",
        "turn off the lights",
    ],
    "message_send": [
        "send a message to {person}",
        "text {person} that i am late",
        "tell {person} i will be home at {time}",
        "message {person} {date}",
        "send {person} a text",
        "email {person} about the meeting",
    ],
    "calendar_set": [
        "add a meeting with {person} {date}",
        "schedule lunch with {person} at {time}",
        "remind me to call {person} {date}",
        "put a meeting on {date} at {time}",
        "book a meeting in {place} {date}",
        "create an event {date} at {time}",
    ],
}

DEFAULT_SLOTS: Dict[str, List[str]] = {
    "time": ["nine am", "ten pm", "seven thirty", "noon", "midnight", "six am",
             "eight pm", "five fifteen", "eleven am", "three pm"],
    "date": ["today", "tomorrow", "monday", "tuesday", "friday", "saturday",
             "next week", "this weekend", "sunday morning", "wednesday"],
    "place": ["paris", "london", "tokyo", "berlin", "new york", "madrid", "rome",
              "boston", "the airport", "san francisco"],
    "room": ["kitchen", "bedroom", "living room", "bathroom", "garage", "hallway",
             "dining room", "basement"],
    "artist": ["the beatles", "adele", "taylor swift", "miles davis", "queen",
               "coldplay", "bob marley", "daft punk"],
    "person": ["mom", "john", "sarah", "my boss", "alex", "emma", "david", "grandma"],
}


@dataclass
class GrammarConfig:
    intents: Dict[str, List[str]] = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_INTENTS.items()})
    slots: Dict[str, List[str]] = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_SLOTS.items()})
    noise_level: float = 0.3

    @property
    def intent_names(self) -> List[str]:
        return list(self.intents)

    @property
    def slot_names(self) -> List[str]:
        return list(self.slots)


@dataclass(frozen=True)
class SlotAnnotation:
    slot_type: str
    value: str
    start_token: int
    end_token: int


@dataclass(frozen=True)
class UtteranceExample:
    id: str
    transcript: Optional[str] = None
    intent: Optional[str] = None
    slots: Optional[tuple] = None
    acoustic_seed: Optional[int] = None
    noise_level: Optional[float] = None

    def __post_init__(self):
        if self.transcript is None and self.intent is None:
            raise ValueError(f"{self.id}: example needs a transcript or an intent")
        if self.slots is not None and self.transcript is None:
            raise ValueError(f"{self.id}: slots require a transcript")
        if self.acoustic_seed is not None and self.transcript is None:
            raise ValueError(f"{self.id}: acoustic features derive from the transcript")
        if self.noise_level is not None and self.noise_level < 0:
            raise ValueError(f"{self.id}: noise_level must be nonnegative")

    @property
    def has_speech(self) -> bool:
        return self.acoustic_seed is not None

    @property
    def has_labels(self) -> bool:
        return self.intent is not None and self.slots is not None

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.slots is not None:
            d["slots"] = [{"type": s.slot_type, "value": s.value, "start_token": s.start_token,
                           "end_token": s.end_token} for s in self.slots]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UtteranceExample":
        slots = d.get("slots")
        if slots is not None:
            slots = tuple(SlotAnnotation(s["type"], s["value"], int(s["start_token"]), int(s["end_token"]))
                          for s in slots)
        return cls(id=str(d["id"]), transcript=d.get("transcript"), intent=d.get("intent"),
                   slots=slots, acoustic_seed=d.get("acoustic_seed"), noise_level=d.get("noise_level"))


# -- heterogeneous stream views ------------------------------------------------

def speech_text_view(ex: UtteranceExample) -> UtteranceExample:
    """(speech, transcript) pair for the ASR stream."""
    return replace(ex, intent=None, slots=None)


def text_label_view(ex: UtteranceExample) -> UtteranceExample:
    """(transcript, intent, slots) triple for the NLU stream."""
    return replace(ex, acoustic_seed=None, noise_level=None)


def with_noise(corpus: Sequence[UtteranceExample], noise_level: float) -> List[UtteranceExample]:
    return [replace(ex, noise_level=noise_level) if ex.has_speech else ex for ex in corpus]


# -- generation ----------------------------------------------------------------

def _validate_grammar(grammar: GrammarConfig):
    if len(grammar.intents) < 5:
        raise ConfigurationError("grammar needs at least 5 intents")
    if len(grammar.slots) < 4:
        raise ConfigurationError("grammar needs at least 4 slot types")
    for name, templates in grammar.intents.items():
        if not templates:
            raise ConfigurationError(f"intent {name!r} has no templates")
    for name, values in grammar.slots.items():
        if not values:
            raise ConfigurationError(f"slot type {name!r} has no values")


def instantiate(template: str, fillers: Dict[str, str]):
    """Fill ``{slot}`` placeholders; returns (transcript, slot annotations)."""
    words: List[str] = []
    slots: List[SlotAnnotation] = []
    for piece in template.split():
        if piece.startswith("{") and piece.endswith("}"):
            slot = piece[1:-1]
            value = fillers[slot].lower()
            start = len(words)
            words.extend(value.split())
            slots.append(SlotAnnotation(slot, value, start, len(words)))
        else:
            words.append(piece.lower())
    return " ".join(words), tuple(slots)


def generate_corpus(grammar: GrammarConfig, n_examples: int, seed: int) -> List[UtteranceExample]:
    _validate_grammar(grammar)
    rng = np.random.default_rng(seed)
    intents = grammar.intent_names
    corpus = []
    for i in range(n_examples):
        intent = intents[rng.integers(len(intents))]
        templates = grammar.intents[intent]
        template = templates[rng.integers(len(templates))]
        fillers = {s: v[rng.integers(len(v))] for s, v in grammar.slots.items()}
        transcript, slots = instantiate(template, fillers)
        corpus.append(UtteranceExample(
            id=f"utt{seed}-{i:05d}", transcript=transcript, intent=intent, slots=slots,
            acoustic_seed=int(rng.integers(2 ** 31 - 1)), noise_level=grammar.noise_level))
    return corpus


def split(corpus: Sequence[UtteranceExample], ratios: Sequence[float], seed: int,
          names: Sequence[str] = ("train", "dev", "test")) -> Dict[str, List[UtteranceExample]]:
    """Deterministic, intent-stratified partition with exact largest-remainder sizes."""
    ratios = np.asarray(ratios, dtype=float)
    if np.any(ratios <= 0) or abs(ratios.sum() - 1.0) > 1e-9:
        raise ConfigurationError(f"split ratios must be positive and sum to 1, got {ratios.tolist()}")
    n = len(corpus)
    raw = ratios * n
    sizes = np.floor(raw).astype(int)
    for j in np.argsort(-(raw - sizes), kind="stable")[: n - sizes.sum()]:
        sizes[j] += 1
    rng = np.random.default_rng(seed)
    groups: Dict[Optional[str], List[int]] = {}
    for i, ex in enumerate(corpus):
        groups.setdefault(ex.intent, []).append(i)
    keyed = []
    for g, (label, idx) in enumerate(sorted(groups.items(), key=lambda kv: str(kv[0]))):
        perm = rng.permutation(len(idx))
        for rank, j in enumerate(perm):
            keyed.append(((rank + 0.5) / len(idx), g, idx[j]))
    order = [i for _, _, i in sorted(keyed)]
    out, start = {}, 0
    for name, size in zip(names, sizes):
        out[name] = [corpus[i] for i in order[start:start + size]]
        start += size
    for name, part in out.items():
        missing = set(groups) - {ex.intent for ex in part}
        if missing:
            warnings.warn(f"split {name!r} has no examples of intents {sorted(map(str, missing))}")
    return out


# -- acoustic channel ------------------------------------------------------------

@lru_cache(maxsize=4096)
def _prototype(token_id: int, d_feat: int, codebook_seed: int, scale: float) -> np.ndarray:
    rng = np.random.default_rng([codebook_seed, token_id])
    proto = rng.normal(0.0, scale, size=d_feat)
    proto.setflags(write=False)
    return proto


def token_prototypes(ids: Sequence[int], d_feat: int, codebook_seed: int = 1234,
                     scale: float = 1.0) -> np.ndarray:
    return np.stack([_prototype(int(t), d_feat, codebook_seed, scale) for t in ids]) if len(ids) \
        else np.zeros((0, d_feat))


def synthesize_features(transcript_ids: Sequence[int], vocab_size: int, acoustic_seed: int,
                        noise_level: float, k: int = 4, d_feat: int = 32,
                        codebook_seed: int = 1234, scale: float = 1.0) -> np.ndarray:
    """Frames of shape (k * len(ids), d_feat); a pure function of its arguments."""
    if k < 1:
        raise ConfigurationError("upsampling factor k must be >= 1")
    if d_feat < 8:
        raise ConfigurationError("d_feat must be >= 8")
    ids = [int(t) for t in transcript_ids]
    if any(not 0 <= t < vocab_size for t in ids):
        raise IndexError("transcript id outside vocabulary")
    frames = np.repeat(token_prototypes(ids, d_feat, codebook_seed, scale), k, axis=0)
    if noise_level > 0:
        rng = np.random.default_rng(acoustic_seed)
        frames = frames + rng.normal(0.0, noise_level, size=frames.shape)
    return frames


# -- persistence -----------------------------------------------------------------

def save_jsonl(path, corpus: Sequence[UtteranceExample]):
    with open(path, "w") as fh:
        for ex in corpus:
            fh.write(json.dumps(ex.to_dict()) + "\n")


def load_jsonl(path) -> List[UtteranceExample]:
    with open(path) as fh:
        return [UtteranceExample.from_dict(json.loads(line)) for line in fh if line.strip()]


def save_grammar(path, grammar: GrammarConfig):
    Path(path).write_text(json.dumps(asdict(grammar), indent=2))
