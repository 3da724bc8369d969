"""The seven task losses and their weighted total.

ASR: token cross-entropy on teacher-forced logits.
SLU (speech input through the interface): s2i, s2k (CRF NLL), s2v (all positions).
NLU (masked gold text): t2i, t2k, t2v (masked positions only).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .config import LOSS_NAMES
from .crf import batch_log_likelihood
from .nlu import NluModel, NluOutput, mask_tokens
from .vocab import EOS, PAD


class AlignmentError(ValueError):
    pass


class EmptyBatchError(ValueError):
    pass


@dataclass
class LossBundle:
    components: Dict[str, Optional[Tensor]]
    weights: Dict[str, float]
    total: Tensor

    def __getattr__(self, name):
        if name in LOSS_NAMES:
            return self.components.get(name)
        raise AttributeError(name)

    def present(self):
        return [n for n in LOSS_NAMES if self.components.get(n) is not None]

    def as_log(self, step: int) -> dict:
        row = {"step": step}
        for n in LOSS_NAMES:
            c = self.components.get(n)
            row[n] = None if c is None else float(c.data)
        row["total"] = float(self.total.data)
        return row


def asr_loss(logits: Tensor, gold_ids: np.ndarray, lengths: Optional[np.ndarray] = None) -> Tensor:
    """Token CE over [gold..., EOS] targets with PAD ignored. ``logits``: (B, T+1, V)."""
    gold_ids = np.asarray(gold_ids, dtype=np.int64)
    if gold_ids.ndim == 1:
        gold_ids = gold_ids[None]
    if logits.ndim == 2:
        logits = ag.reshape(logits, (1,) + logits.shape)
    B, T = gold_ids.shape
    if logits.shape[1] != T + 1:
        raise AlignmentError(f"teacher-forced logits have {logits.shape[1]} rows, expected gold length + 1 = {T + 1}")
    if lengths is None:
        lengths = np.full(B, T, dtype=np.int64)
    targets = np.full((B, T + 1), PAD, dtype=np.int64)
    targets[:, :T] = gold_ids
    targets[np.arange(B), lengths] = EOS
    return ag.cross_entropy(ag.reshape(logits, (-1, logits.shape[-1])), targets.reshape(-1), ignore_index=PAD)


def _intent_loss(out: NluOutput, intents: np.ndarray) -> Tensor:
    return ag.cross_entropy(out.intent_logits, intents)


def _key_loss(out: NluOutput, tags: np.ndarray, lengths: np.ndarray, model: NluModel) -> Tensor:
    ll = batch_log_likelihood(out.emissions, tags, lengths, model.crf)
    return ag.mul(ag.sum_(ll), -1.0 / len(lengths))


def _check_aligned(out: NluOutput, ids: np.ndarray, tags: np.ndarray):
    T = out.emissions.shape[1]
    if ids.shape[1] != T or tags.shape[1] != T:
        raise AlignmentError(f"interface length {T} does not match gold length {ids.shape[1]}; "
                             "speech-side losses need teacher-forced decoding")


def slu_loss(out: NluOutput, model: NluModel, ids: np.ndarray, lengths: np.ndarray,
             intents: np.ndarray, tags: np.ndarray, which=("s2i", "s2k", "s2v")) -> Dict[str, Tensor]:
    """s2i / s2k / s2v from NLU outputs computed on the continuous interface."""
    _check_aligned(out, ids, tags)
    res = {}
    if "s2i" in which:
        res["s2i"] = _intent_loss(out, intents)
    if "s2k" in which:
        res["s2k"] = _key_loss(out, tags, lengths, model)
    if "s2v" in which:
        V = out.value_logits.shape[-1]
        res["s2v"] = ag.cross_entropy(ag.reshape(out.value_logits, (-1, V)), ids.reshape(-1), ignore_index=PAD)
    return res


def nlu_loss(model: NluModel, ids: np.ndarray, lengths: np.ndarray, intents: np.ndarray,
             tags: np.ndarray, mask_prob: float, rng: np.random.Generator, train: bool = True,
             which=("t2i", "t2k", "t2v")) -> Dict[str, Tensor]:
    """t2i / t2k / t2v on gold text with random MASK replacement."""
    masked, targets = mask_tokens(ids, lengths, mask_prob, rng)
    out = model.forward_ids(masked, lengths, train=train, rng=rng)
    res = {}
    if "t2i" in which:
        res["t2i"] = _intent_loss(out, intents)
    if "t2k" in which:
        res["t2k"] = _key_loss(out, tags, lengths, model)
    if "t2v" in which:
        V = out.value_logits.shape[-1]
        res["t2v"] = ag.cross_entropy(ag.reshape(out.value_logits, (-1, V)), targets.reshape(-1), ignore_index=PAD)
    return res


def total_loss(components: Dict[str, Optional[Tensor]], weights: Optional[Dict[str, float]] = None) -> LossBundle:
    """Weighted sum over present components (missing weights default to 1)."""
    present = {n: c for n, c in components.items() if c is not None}
    if not present:
        raise EmptyBatchError("no loss components present in this batch")
    unknown = set(components) - set(LOSS_NAMES)
    if unknown:
        raise KeyError(f"unknown loss components {sorted(unknown)}")
    weights = dict(weights or {})
    used = {n: float(weights.get(n, 1.0)) for n in present}
    total = None
    for n in LOSS_NAMES:
        if n in present:
            term = ag.mul(present[n], used[n])
            total = term if total is None else ag.add(total, term)
    full = {n: components.get(n) for n in LOSS_NAMES}
    return LossBundle(full, used, total)
