"""Transformer NLU with intent, slot-key (CRF) and slot-value heads.

Input is a token distribution sequence; embedding happens through
``cti.expected_embedding`` so text and ASR output share one code path.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import AdamConfig, AdamState, Module, Tensor
from .config import NluConfig
from .crf import CrfParams
from .cti import TokenDistSeq, expected_embedding
from .layers import Dropout, EncoderLayer, LayerNorm, Linear, sinusoidal_positions
from .vocab import BOS, MASK, PAD, SPECIAL_IDS


@dataclass
class NluOutput:
    intent_logits: Tensor    # (B, C)
    emissions: Tensor        # (B, T, K)
    value_logits: Tensor     # (B, T, V)
    pooled: Tensor           # (B, d)
    pool_weights: np.ndarray  # (B, T+1)
    lengths: np.ndarray


class NluModel(Module):
    def __init__(self, cfg: NluConfig, vocab_size: int, n_intents: int, n_tags: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self._vocab_size = vocab_size
        d = cfg.d
        # small embeddings keep convex mixtures of token vectors near the data the
        # encoder was trained on; unit-variance tables made soft inputs brittle
        self.embed = ag.param(rng, vocab_size, d, std=1.0 / np.sqrt(d))
        self.layers = [EncoderLayer(rng, d, cfg.heads, cfg.d_ff) for _ in range(cfg.n_layers)]
        self.norm = LayerNorm(d)
        self.pool_query = ag.param(rng, d, std=1.0 / np.sqrt(d))
        # pooled states are layer-normed to unit scale; a small head starts the
        # intent classifier near uniform instead of confidently wrong
        self.intent_head = Linear(rng, d, n_intents, std=0.02)
        self.key_head = Linear(rng, d, n_tags)
        self.value_head = Linear(rng, d, vocab_size)
        self.crf = CrfParams(n_tags, rng)
        self._pos = sinusoidal_positions(cfg.max_len + 1, d)
        self.use_positions = True

    @property
    def vocab_size(self) -> int:
        return self._vocab_size

    def named_parameters(self, prefix: str = "nlu."):
        return super().named_parameters(prefix)

    def forward(self, z, lengths: Optional[Sequence[int]] = None, train: bool = False,
                rng=None) -> NluOutput:
        """``z``: TokenDistSeq or tensor of shape (T, V) or (B, T, V)."""
        zt = z.z if isinstance(z, TokenDistSeq) else ag.as_tensor(z)
        if zt.ndim == 2:
            zt = ag.reshape(zt, (1,) + zt.shape)
        x = expected_embedding(zt, self.embed)
        return self._encode(x, lengths, train, rng)

    def forward_ids(self, ids, lengths: Optional[Sequence[int]] = None, train: bool = False,
                    rng=None) -> NluOutput:
        """Plain text path: embedding lookup of token ids (B, T)."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        return self._encode(ag.embedding_lookup(self.embed, ids), lengths, train, rng)

    def _encode(self, x: Tensor, lengths, train, rng) -> NluOutput:
        B, T, _ = x.shape
        lengths = np.full(B, T, dtype=np.int64) if lengths is None else np.asarray(lengths, dtype=np.int64)
        bos = ag.embedding_lookup(self.embed, np.full((B, 1), BOS, dtype=np.int64))
        h = ag.concat([bos, x], axis=1)
        if self.use_positions:
            h = h + self._pos[:T + 1]
        mask = np.arange(T + 1)[None, :] < (lengths[:, None] + 1)
        bias = ag.key_padding_bias(mask)
        drop = Dropout(self.cfg.dropout, rng, train) if train and self.cfg.dropout > 0 else None
        for layer in self.layers:
            h = layer(h, bias=bias, drop=drop)
        h = self.norm(h)

        scores = ag.matmul(h, ag.reshape(self.pool_query, (-1, 1)))             # (B, T+1, 1)
        scores = ag.reshape(scores, (B, 1, T + 1)) + np.where(mask, 0.0, ag.NEG_INF_BIAS)[:, None, :]
        weights = ag.softmax(scores, axis=-1)
        pooled = ag.reshape(ag.matmul(weights, h), (B, -1))
        tokens = h[:, 1:, :]
        return NluOutput(self.intent_head(pooled), self.key_head(tokens), self.value_head(tokens),
                         pooled, weights.data[:, 0, :], lengths)


def mask_tokens(ids: np.ndarray, lengths: np.ndarray, mask_prob: float,
                rng: np.random.Generator):
    """Replace each non-special, non-pad token by MASK with probability ``mask_prob``.

    Returns (masked ids, targets) where targets hold the original id at masked
    positions and PAD elsewhere.
    """
    ids = np.asarray(ids)
    valid = np.arange(ids.shape[1])[None, :] < np.asarray(lengths)[:, None]
    eligible = valid & ~np.isin(ids, list(SPECIAL_IDS))
    draws = rng.random(ids.shape)
    chosen = eligible & (draws < mask_prob)
    masked = np.where(chosen, MASK, ids)
    targets = np.where(chosen, ids, PAD)
    return masked, targets


def masked_lm_loss(model: NluModel, ids: np.ndarray, lengths: np.ndarray, mask_prob: float,
                   rng: np.random.Generator, train: bool = True):
    masked, targets = mask_tokens(ids, lengths, mask_prob, rng)
    out = model.forward_ids(masked, lengths, train=train, rng=rng)
    V = model.vocab_size
    loss = ag.cross_entropy(ag.reshape(out.value_logits, (-1, V)), targets.reshape(-1), ignore_index=PAD)
    return loss, out, targets


def mlm_pretrain(model: NluModel, batches_fn, mask_prob: float, steps: int, seed: int,
                 adam: Optional[AdamConfig] = None, log=None) -> List[float]:
    """Masked-token reconstruction through the slot-value head.

    ``batches_fn(step)`` returns (ids, lengths) for that step. Returns the loss curve.
    """
    if not 0.0 < mask_prob < 1.0:
        raise ValueError("mask_prob must be in (0, 1)")
    adam = adam or AdamConfig()
    state = AdamState()
    rng = np.random.default_rng(seed)
    params = model.named_parameters()
    curve = []
    for step in range(steps):
        ids, lengths = batches_fn(step)
        model.zero_grad()
        loss, _, _ = masked_lm_loss(model, ids, lengths, mask_prob, rng)
        loss.backward()
        ag.adam_step(params, state, adam)
        curve.append(float(loss.data))
        if log is not None:
            log(step, float(loss.data))
    return curve


def masked_accuracy(model: NluModel, ids: np.ndarray, lengths: np.ndarray, mask_prob: float,
                    seed: int) -> float:
    """Accuracy of reconstructing masked tokens on held-out masks."""
    rng = np.random.default_rng(seed)
    with ag.no_grad():
        _, out, targets = masked_lm_loss(model, ids, lengths, mask_prob, rng, train=False)
    sel = targets != PAD
    if not sel.any():
        return float("nan")
    pred = out.value_logits.data.argmax(-1)
    return float((pred[sel] == targets[sel]).mean())
