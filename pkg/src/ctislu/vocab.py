"""Shared word-level vocabulary for the ASR decoder output and the NLU input."""
from __future__ import annotations

import hashlib
import json
from collections import Counter
from pathlib import Path
from typing import Iterable, List, Sequence

PAD, BOS, EOS, UNK, MASK = 0, 1, 2, 3, 4
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>", "<mask>")
SPECIAL_IDS = frozenset(range(len(SPECIALS)))


class ConfigurationError(ValueError):
    pass


def tokenize(text: str) -> List[str]:
    return text.lower().split()


class Vocabulary:
    """Immutable token inventory; ids 0-4 are always the specials."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise ConfigurationError("vocabulary must start with the reserved specials")
        if len(set(tokens)) != len(tokens):
            raise ConfigurationError("duplicate tokens in vocabulary")
        self._tokens = tuple(tokens)
        self._index = {t: i for i, t in enumerate(self._tokens)}

    @classmethod
    def build(cls, corpus: Iterable[str], min_count: int = 1) -> "Vocabulary":
        if min_count < 0:
            raise ConfigurationError("min_count must be nonnegative")
        counts: Counter = Counter()
        n = 0
        for text in corpus:
            n += 1
            counts.update(tokenize(text))
        if n == 0:
            raise ConfigurationError("cannot build a vocabulary from an empty corpus")
        words = sorted((w for w, c in counts.items() if c >= min_count and w not in SPECIALS),
                       key=lambda w: (-counts[w], w))
        return cls(list(SPECIALS) + words)

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    @property
    def tokens(self):
        return self._tokens

    def token_to_id(self, token: str) -> int:
        return self._index.get(token.lower(), UNK)

    def id_to_token(self, idx: int) -> str:
        if not 0 <= idx < len(self._tokens):
            raise IndexError(f"token id {idx} out of range for vocabulary of size {len(self)}")
        return self._tokens[idx]

    def encode(self, text: str) -> List[int]:
        return [self._index.get(w, UNK) for w in tokenize(text)]

    def decode(self, ids: Iterable[int]) -> str:
        skip = (PAD, BOS, EOS)
        return " ".join(self.id_to_token(int(i)) for i in ids if int(i) not in skip)

    def fingerprint(self) -> str:
        """Stable hash used to gate checkpoint composition on vocabulary identity."""
        return hashlib.sha256("\n".join(self._tokens).encode()).hexdigest()[:16]

    def to_json(self) -> str:
        return json.dumps(list(self._tokens))

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(json.loads(Path(path).read_text()))

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self._tokens == other._tokens

    def __hash__(self):
        return hash(self._tokens)
