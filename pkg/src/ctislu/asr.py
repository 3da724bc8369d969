"""Tiny encoder-decoder ASR over simulated acoustic frames and the shared vocabulary."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import autograd as ag
from .autograd import Module, Tensor
from .config import AsrConfig
from .layers import DecoderLayer, Dropout, EncoderLayer, LayerNorm, Linear, sinusoidal_positions
from .vocab import BOS, EOS, PAD, ConfigurationError

MAX_FRAMES = 1024


class LengthError(ValueError):
    pass


@dataclass
class GreedyResult:
    ids: List[int]
    logits: np.ndarray          # (len(ids), V); row t produced ids[t]
    truncated: bool


def stack_frames(features: np.ndarray, frame_mask: np.ndarray, n: int):
    """Concatenate ``n`` consecutive frames: (B, F, d) -> (B, ceil(F/n), n*d)."""
    if n == 1:
        return features, frame_mask
    B, F, d = features.shape
    pad = (-F) % n
    if pad:
        features = np.concatenate([features, np.zeros((B, pad, d))], axis=1)
        frame_mask = np.concatenate([frame_mask, np.zeros((B, pad), dtype=bool)], axis=1)
    G = (F + pad) // n
    return features.reshape(B, G, n * d), frame_mask.reshape(B, G, n).any(axis=2)


class AsrModel(Module):
    def __init__(self, cfg: AsrConfig, vocab_size: int, d_feat: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self._vocab_size = vocab_size
        self._d_feat = d_feat
        d = cfg.d
        self.feat_proj = Linear(rng, d_feat * cfg.frame_stack, d)
        self.enc_layers = [EncoderLayer(rng, d, cfg.heads, cfg.d_ff) for _ in range(cfg.n_enc)]
        self.enc_norm = LayerNorm(d)
        self.embed = ag.param(rng, vocab_size, d, std=1.0)
        self.dec_layers = [DecoderLayer(rng, d, cfg.heads, cfg.d_ff) for _ in range(cfg.n_dec)]
        self.dec_norm = LayerNorm(d)
        self.out = Linear(rng, d, vocab_size)
        self._pos = sinusoidal_positions(MAX_FRAMES, d)

    @property
    def vocab_size(self) -> int:
        return self._vocab_size

    def named_parameters(self, prefix: str = "asr."):
        return super().named_parameters(prefix)

    def _dropout(self, train: bool, rng) -> Optional[Dropout]:
        if not train or self.cfg.dropout <= 0:
            return None
        return Dropout(self.cfg.dropout, rng, train)

    # -- encoder ---------------------------------------------------------------
    def encode(self, features: np.ndarray, frame_mask: Optional[np.ndarray] = None,
               train: bool = False, rng=None) -> Tensor:
        """(B, F, d_feat) frames -> (B, F, d) contextual states."""
        features = np.asarray(features, dtype=float)
        if features.ndim == 2:
            features = features[None]
        if features.shape[-1] != self._d_feat:
            raise ConfigurationError(f"feature width {features.shape[-1]} != model d_feat {self._d_feat}")
        B, F, _ = features.shape
        if frame_mask is None:
            frame_mask = np.ones((B, F), dtype=bool)
        features, frame_mask = stack_frames(features, frame_mask, self.cfg.frame_stack)
        F = features.shape[1]
        drop = self._dropout(train, rng)
        h = self.feat_proj(Tensor(features)) + self._pos[:F]
        bias = ag.key_padding_bias(frame_mask)
        for layer in self.enc_layers:
            h = layer(h, bias=bias, drop=drop)
        return self.enc_norm(h)

    # -- decoder ---------------------------------------------------------------
    def _decode(self, enc_out: Tensor, frame_mask: np.ndarray, inputs: np.ndarray,
                drop=None) -> Tensor:
        B, L = inputs.shape
        h = ag.embedding_lookup(self.embed, inputs) + self._pos[:L]
        self_bias = ag.causal_bias(L)
        mem_bias = ag.key_padding_bias(frame_mask)
        for layer in self.dec_layers:
            h = layer(h, enc_out, self_bias=self_bias, memory_bias=mem_bias, drop=drop)
        return self.out(self.dec_norm(h))

    def memory_mask(self, frame_mask: Optional[np.ndarray], enc_out: Tensor) -> np.ndarray:
        if frame_mask is None:
            return np.ones(enc_out.shape[:2], dtype=bool)
        if frame_mask.shape[1] == enc_out.shape[1]:
            return frame_mask
        return stack_frames(np.zeros(frame_mask.shape + (1,)), frame_mask, self.cfg.frame_stack)[1]

    def decode_teacher_forced(self, enc_out: Tensor, gold_ids: np.ndarray,
                              frame_mask: Optional[np.ndarray] = None, train: bool = False,
                              rng=None) -> Tensor:
        """Logits (B, T+1, V) for inputs [BOS, gold...]; row t predicts gold[t] (or EOS at t=T)."""
        gold_ids = np.asarray(gold_ids, dtype=np.int64)
        if gold_ids.ndim == 1:
            gold_ids = gold_ids[None]
        if gold_ids.shape[1] > self.cfg.max_decode_len:
            raise LengthError(f"gold length {gold_ids.shape[1]} exceeds max_decode_len "
                              f"{self.cfg.max_decode_len}")
        B = gold_ids.shape[0]
        frame_mask = self.memory_mask(frame_mask, enc_out)
        inputs = np.concatenate([np.full((B, 1), BOS, dtype=np.int64), gold_ids], axis=1)
        return self._decode(enc_out, frame_mask, inputs, self._dropout(train, rng))

    def decode_greedy(self, enc_out: Tensor, frame_mask: Optional[np.ndarray] = None,
                      max_len: Optional[int] = None) -> List[GreedyResult]:
        """Argmax decoding until EOS or ``max_len`` tokens, per batch row."""
        max_len = self.cfg.max_decode_len if max_len is None else max_len
        B = enc_out.shape[0]
        frame_mask = self.memory_mask(frame_mask, enc_out)
        enc_data = Tensor(enc_out.data)
        inputs = np.full((B, 1), BOS, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        ids = [[] for _ in range(B)]
        rows = [[] for _ in range(B)]
        with ag.no_grad():
            for _ in range(max_len):
                logits = self._decode(enc_data, frame_mask, inputs).data[:, -1, :]
                nxt = np.argmax(logits, axis=1)
                for b in range(B):
                    if done[b]:
                        continue
                    if nxt[b] == EOS:
                        done[b] = True
                    else:
                        ids[b].append(int(nxt[b]))
                        rows[b].append(logits[b].copy())
                if done.all():
                    break
                inputs = np.concatenate([inputs, np.where(done, PAD, nxt)[:, None]], axis=1)
        V = self._vocab_size
        return [GreedyResult(ids[b], np.array(rows[b]).reshape(-1, V), not done[b]) for b in range(B)]

    def transcribe(self, features: np.ndarray, frame_mask: Optional[np.ndarray] = None,
                   max_len: Optional[int] = None) -> List[GreedyResult]:
        with ag.no_grad():
            enc = self.encode(features, frame_mask)
        return self.decode_greedy(enc, frame_mask, max_len)
