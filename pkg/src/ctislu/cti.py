"""Continuous token interface between the ASR decoder and the NLU encoder.

The ASR logits become row-stochastic token distributions ``Z``; the NLU reads
them as expected embeddings ``Z @ E``. On one-hot rows this is exactly an
embedding lookup, so the discrete interface is the special case.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import NonDifferentiableError, Tensor

CONTINUOUS, DISCRETE, GOLD = "continuous", "discrete", "gold"


class SharedVocabularyError(ValueError):
    """ASR output width and NLU embedding height disagree."""


@dataclass
class TokenDistSeq:
    z: Tensor                 # (..., T, V)
    provenance: str

    @property
    def length(self) -> int:
        return self.z.shape[-2]

    @property
    def vocab_size(self) -> int:
        return self.z.shape[-1]

    def check(self, atol: float = 1e-9):
        d = self.z.data
        if np.any(d < 0) or np.any(d > 1 + atol):
            raise ValueError("token distribution entries outside [0, 1]")
        if d.size and not np.allclose(d.sum(-1), 1.0, atol=atol, rtol=0):
            raise ValueError("token distribution rows do not sum to 1")
        if self.provenance != CONTINUOUS and d.size:
            if not np.all((d == 0) | (d == 1)):
                raise ValueError(f"{self.provenance} rows must be exactly one-hot")


def continuous_interface(logits: Tensor, temperature: float = 1.0) -> TokenDistSeq:
    """Rowwise softmax; differentiable with respect to the logits."""
    x = logits if temperature == 1.0 else ag.mul(logits, 1.0 / temperature)
    return TokenDistSeq(ag.softmax(x, axis=-1), CONTINUOUS)


def _one_hot(ids: np.ndarray, V: int) -> np.ndarray:
    out = np.zeros(ids.shape + (V,))
    np.put_along_axis(out, ids[..., None], 1.0, axis=-1)
    return out


def _refuse_backward(_g):
    raise NonDifferentiableError(
        "the discrete token interface (argmax one-hot) has no gradient; "
        "use the continuous interface for end-to-end training")


def discrete_interface(logits) -> TokenDistSeq:
    """Rowwise argmax one-hot (lowest index wins ties). Backpropagating through it raises."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=float)
    onehot = _one_hot(np.argmax(data, axis=-1), data.shape[-1])
    out = Tensor(onehot)
    if isinstance(logits, Tensor) and logits.requires_grad and ag.is_grad_enabled():
        out.requires_grad = True
        out._parents = (logits,)
        out._backward = _refuse_backward
    return TokenDistSeq(out, DISCRETE)


def gold_interface(token_ids: Sequence[int], vocab_size: int) -> TokenDistSeq:
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise IndexError(f"token id outside vocabulary of size {vocab_size}")
    if ids.size == 0:
        return TokenDistSeq(Tensor(np.zeros(ids.shape + (vocab_size,))), GOLD)
    return TokenDistSeq(Tensor(_one_hot(ids, vocab_size)), GOLD)


def expected_embedding(z, embedding_table: Tensor) -> Tensor:
    """``Z @ E``: row t is the Z_t-weighted average of embedding rows."""
    zt = z.z if isinstance(z, TokenDistSeq) else z
    if zt.shape[-1] != embedding_table.shape[0]:
        raise SharedVocabularyError(
            f"token distribution width {zt.shape[-1]} != embedding table height "
            f"{embedding_table.shape[0]}; both networks must share one vocabulary")
    return ag.matmul(zt, embedding_table)


def dump_topk(path, z: TokenDistSeq, vocab, k: int = 5, utterance_id: Optional[str] = None):
    """Append one JSON line per position with the top-k tokens and probabilities."""
    d = z.z.data.reshape(-1, z.vocab_size)
    with open(path, "a") as fh:
        for t, row in enumerate(d):
            top = np.argsort(-row, kind="stable")[:k]
            fh.write(json.dumps({"id": utterance_id, "position": t,
                                 "tokens": [vocab.id_to_token(int(i)) for i in top],
                                 "probs": [float(row[i]) for i in top]}) + "\n")
