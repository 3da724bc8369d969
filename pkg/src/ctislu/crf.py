"""Linear-chain CRF: log-space forward algorithm and Viterbi decoding."""
from __future__ import annotations

from typing import Optional, Sequence, Tuple

import numpy as np

from . import autograd as ag
from .autograd import Module, Tensor


class EmptySequenceError(ValueError):
    pass


class CrfParams(Module):
    def __init__(self, num_tags: int, rng: Optional[np.random.Generator] = None, std: float = 0.1):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.transitions = ag.param(rng, num_tags, num_tags, std=std)
        self.start = ag.param(rng, num_tags, std=std)
        self.end = ag.param(rng, num_tags, std=std)

    @property
    def num_tags(self) -> int:
        return self.transitions.shape[0]


def _check(emissions: Tensor, num_tags: int):
    if emissions.shape[-2] == 0:
        raise EmptySequenceError("CRF over an empty sequence")
    if emissions.shape[-1] != num_tags:
        raise ag.ShapeError(f"emission width {emissions.shape[-1]} != {num_tags} tags")


def batch_log_likelihood(emissions: Tensor, tags: np.ndarray, lengths: Sequence[int],
                         params: CrfParams) -> Tensor:
    """Per-sequence log p(tags | emissions) for a padded (B, T, K) batch -> (B,)."""
    _check(emissions, params.num_tags)
    tags = np.asarray(tags, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    B, T, K = emissions.shape
    if np.any(lengths < 1) or np.any(lengths > T):
        raise EmptySequenceError("every sequence needs 1 <= length <= T")
    mask = np.arange(T)[None, :] < lengths[:, None]

    # gold path score, gathered then segment-summed per sequence
    b_idx, t_idx = np.nonzero(mask)
    seg = np.zeros((B, b_idx.size))
    seg[b_idx, np.arange(b_idx.size)] = 1.0
    emit = ag.getitem(emissions, (b_idx, t_idx, tags[b_idx, t_idx]))
    score = ag.matmul(Tensor(seg), ag.reshape(emit, (-1, 1)))
    pair = mask[:, 1:]
    pb, pt = np.nonzero(pair)
    if pb.size:
        seg2 = np.zeros((B, pb.size))
        seg2[pb, np.arange(pb.size)] = 1.0
        trans = ag.getitem(params.transitions, (tags[pb, pt], tags[pb, pt + 1]))
        score = score + ag.matmul(Tensor(seg2), ag.reshape(trans, (-1, 1)))
    first = ag.getitem(params.start, tags[:, 0])
    last = ag.getitem(params.end, tags[np.arange(B), lengths - 1])
    score = ag.reshape(score, (B,)) + first + last

    # log partition via forward recursion
    alpha = params.start + emissions[:, 0, :]
    trans_b = ag.reshape(params.transitions, (1, K, K))
    for t in range(1, T):
        step = ag.logsumexp(ag.reshape(alpha, (B, K, 1)) + trans_b, axis=1) + emissions[:, t, :]
        alpha = ag.where(mask[:, t:t + 1], step, alpha)
    log_z = ag.logsumexp(alpha + params.end, axis=1)
    return score - log_z


def log_likelihood(emissions: Tensor, tags: Sequence[int], params: CrfParams) -> Tensor:
    """log p(tags | emissions) for one (T, K) sequence, as a scalar tensor."""
    _check(emissions, params.num_tags)
    tags = np.asarray(tags, dtype=np.int64)
    if tags.shape[0] != emissions.shape[0]:
        raise ag.ShapeError(f"{tags.shape[0]} tags for {emissions.shape[0]} positions")
    T, K = emissions.shape
    out = batch_log_likelihood(ag.reshape(emissions, (1, T, K)), tags[None], [T], params)
    return ag.reshape(out, ())


def log_partition(emissions: np.ndarray, transitions: np.ndarray, start: np.ndarray,
                  end: np.ndarray) -> float:
    """Plain numpy log Z for one sequence (no graph)."""
    if emissions.shape[0] == 0:
        raise EmptySequenceError("CRF over an empty sequence")
    alpha = start + emissions[0]
    for t in range(1, emissions.shape[0]):
        x = alpha[:, None] + transitions
        m = x.max(axis=0)
        alpha = m + np.log(np.exp(x - m).sum(axis=0)) + emissions[t]
    x = alpha + end
    m = x.max()
    return float(m + np.log(np.exp(x - m).sum()))


def path_score(emissions: np.ndarray, tags: Sequence[int], transitions: np.ndarray,
               start: np.ndarray, end: np.ndarray) -> float:
    tags = list(tags)
    s = start[tags[0]] + end[tags[-1]]
    s += sum(emissions[t, y] for t, y in enumerate(tags))
    s += sum(transitions[a, b] for a, b in zip(tags, tags[1:]))
    return float(s)


def viterbi(emissions, params: CrfParams) -> Tuple[list, float]:
    """Best tag path and its score; ties go to the lower tag id."""
    em = emissions.data if isinstance(emissions, Tensor) else np.asarray(emissions, dtype=float)
    return viterbi_decode(em, params.transitions.data, params.start.data, params.end.data)


def viterbi_decode(emissions: np.ndarray, transitions: np.ndarray, start: np.ndarray,
                   end: np.ndarray) -> Tuple[list, float]:
    T = emissions.shape[0]
    if T == 0:
        raise EmptySequenceError("CRF over an empty sequence")
    delta = start + emissions[0]
    back = np.zeros((T, emissions.shape[1]), dtype=np.int64)
    for t in range(1, T):
        cand = delta[:, None] + transitions
        back[t] = np.argmax(cand, axis=0)
        delta = cand[back[t], np.arange(cand.shape[1])] + emissions[t]
    final = delta + end
    best = int(np.argmax(final))
    path = [best]
    for t in range(T - 1, 0, -1):
        path.append(int(back[t, path[-1]]))
    path.reverse()
    return path, float(final[best])
