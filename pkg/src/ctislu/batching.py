"""Turn UtteranceExamples into padded numeric batches."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .config import DataConfig
from .iob import TagSet, spans_to_tags
from .synth import UtteranceExample, synthesize_features
from .vocab import PAD, Vocabulary


class LabelSpace:
    """Intent names and the IOB tag inventory, in a fixed order."""

    def __init__(self, intents: Sequence[str], slot_types: Sequence[str]):
        self.intents = list(intents)
        self.tagset = TagSet(slot_types)
        self._intent_index = {n: i for i, n in enumerate(self.intents)}

    @property
    def slot_types(self) -> List[str]:
        return self.tagset.slot_types

    def intent_id(self, name: str) -> int:
        return self._intent_index[name]

    def to_dict(self) -> dict:
        return {"intents": self.intents, "slot_types": self.slot_types}

    @classmethod
    def from_dict(cls, d: dict) -> "LabelSpace":
        return cls(d["intents"], d["slot_types"])


@dataclass
class EncodedExample:
    example: UtteranceExample
    ids: Optional[np.ndarray]
    tags: Optional[np.ndarray]
    intent: Optional[int]
    features: Optional[np.ndarray]


def encode_example(ex: UtteranceExample, vocab: Vocabulary, labels: LabelSpace,
                   data_cfg: DataConfig) -> EncodedExample:
    ids = np.asarray(vocab.encode(ex.transcript), dtype=np.int64) if ex.transcript is not None else None
    tags = None
    if ex.slots is not None:
        tags = np.asarray(spans_to_tags(len(ids), ex.slots, labels.tagset), dtype=np.int64)
    intent = labels.intent_id(ex.intent) if ex.intent is not None else None
    feats = None
    if ex.has_speech:
        noise = data_cfg.noise_level if ex.noise_level is None else ex.noise_level
        feats = synthesize_features(ids, len(vocab), ex.acoustic_seed, noise, data_cfg.k,
                                    data_cfg.d_feat, data_cfg.codebook_seed, data_cfg.prototype_scale)
    return EncodedExample(ex, ids, tags, intent, feats)


def encode_corpus(corpus, vocab, labels, data_cfg) -> List[EncodedExample]:
    return [encode_example(ex, vocab, labels, data_cfg) for ex in corpus]


@dataclass
class Batch:
    examples: List[EncodedExample]
    ids: Optional[np.ndarray]          # (B, T) PAD-padded
    lengths: Optional[np.ndarray]      # (B,)
    tags: Optional[np.ndarray]         # (B, T)
    intents: Optional[np.ndarray]      # (B,)
    features: Optional[np.ndarray]     # (B, F, d_feat)
    frame_mask: Optional[np.ndarray]   # (B, F)

    def __len__(self):
        return len(self.examples)

    @property
    def token_mask(self) -> np.ndarray:
        return np.arange(self.ids.shape[1])[None, :] < self.lengths[:, None]


def make_batch(items: Sequence[EncodedExample]) -> Batch:
    items = list(items)
    B = len(items)
    ids = lengths = tags = intents = feats = fmask = None
    if all(it.ids is not None for it in items):
        lengths = np.array([len(it.ids) for it in items], dtype=np.int64)
        T = max(int(lengths.max()), 1)
        ids = np.full((B, T), PAD, dtype=np.int64)
        for b, it in enumerate(items):
            ids[b, :len(it.ids)] = it.ids
        if all(it.tags is not None for it in items):
            tags = np.zeros((B, T), dtype=np.int64)
            for b, it in enumerate(items):
                tags[b, :len(it.tags)] = it.tags
    if all(it.intent is not None for it in items):
        intents = np.array([it.intent for it in items], dtype=np.int64)
    if all(it.features is not None for it in items):
        n_frames = [it.features.shape[0] for it in items]
        F = max(max(n_frames), 1)
        feats = np.zeros((B, F, items[0].features.shape[1]))
        fmask = np.zeros((B, F), dtype=bool)
        for b, it in enumerate(items):
            feats[b, :n_frames[b]] = it.features
            fmask[b, :n_frames[b]] = True
    return Batch(items, ids, lengths, tags, intents, feats, fmask)
