"""Pre-LayerNorm transformer blocks built on the autograd core."""
from __future__ import annotations

from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Module, Tensor


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True, std=None):
        self.weight = ag.param(rng, d_in, d_out, std=std)
        self.bias = ag.zeros_param(d_out) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ag.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = ag.ones_param(d)
        self.beta = ag.zeros_param(d)

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gamma, self.beta)


class MultiHeadAttention(Module):
    def __init__(self, rng, d: int, heads: int):
        if d % heads:
            raise ValueError(f"model dim {d} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(rng, d, d)
        # a key bias shifts every score in a query row by the same amount, which
        # softmax cancels, so it would be a parameter with no effect
        self.k = Linear(rng, d, d, bias=False)
        self.v = Linear(rng, d, d)
        self.o = Linear(rng, d, d)

    def _split(self, x: Tensor) -> Tensor:
        B, T, d = x.shape
        return ag.transpose(ag.reshape(x, (B, T, self.heads, d // self.heads)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, memory: Optional[Tensor] = None,
                 bias: Optional[np.ndarray] = None) -> Tensor:
        src = x if memory is None else memory
        q, k, v = self._split(self.q(x)), self._split(self.k(src)), self._split(self.v(src))
        out = ag.attention(q, k, v, bias)
        B, H, T, dh = out.shape
        return self.o(ag.reshape(ag.transpose(out, (0, 2, 1, 3)), (B, T, H * dh)))


class FeedForward(Module):
    def __init__(self, rng, d: int, d_ff: int):
        self.up = Linear(rng, d, d_ff)
        self.down = Linear(rng, d_ff, d)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(ag.gelu(self.up(x)))


class EncoderLayer(Module):
    def __init__(self, rng, d: int, heads: int, d_ff: int):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(rng, d, heads)
        self.ln2 = LayerNorm(d)
        self.ff = FeedForward(rng, d, d_ff)

    def __call__(self, x, bias=None, drop=None):
        x = x + _drop(self.attn(self.ln1(x), bias=bias), drop)
        return x + _drop(self.ff(self.ln2(x)), drop)


class DecoderLayer(Module):
    def __init__(self, rng, d: int, heads: int, d_ff: int):
        self.ln1 = LayerNorm(d)
        self.self_attn = MultiHeadAttention(rng, d, heads)
        self.ln2 = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(rng, d, heads)
        self.ln3 = LayerNorm(d)
        self.ff = FeedForward(rng, d, d_ff)

    def __call__(self, x, memory, self_bias=None, memory_bias=None, drop=None):
        x = x + _drop(self.self_attn(self.ln1(x), bias=self_bias), drop)
        x = x + _drop(self.cross_attn(self.ln2(x), memory=memory, bias=memory_bias), drop)
        return x + _drop(self.ff(self.ln3(x)), drop)


class Dropout:
    """Seeded dropout context: one generator per forward pass, so a reseed replays masks."""

    def __init__(self, p: float, rng: Optional[np.random.Generator], train: bool):
        self.p, self.rng, self.train = p, rng, train


def _drop(x, drop: Optional[Dropout]):
    if drop is None:
        return x
    return ag.dropout(x, drop.p, drop.rng, drop.train)


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d)
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)
    return out
