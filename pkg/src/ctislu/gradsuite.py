"""Finite-difference checks for every differentiable op and for the full training loss.

Each op case draws random inputs, builds a scalar from the op output through a
fixed random projection, and compares backprop with central differences.
The ``full`` target checks the weighted total of all seven losses through
ASR -> continuous interface -> NLU on a tiny model with dropout held fixed.
"""
from __future__ import annotations

import time
import warnings
from typing import Callable, Dict, Tuple

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .config import ExperimentConfig, AsrConfig, NluConfig, LOSS_NAMES

STEP = 1e-5
TOLERANCE = 1e-4

Case = Tuple[Callable[[], Tensor], Dict[str, Tensor]]


def _leaf(rng, *shape, scale=1.0, positive=False):
    x = rng.normal(size=shape) * scale
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True)


def _project(out: Tensor, rng) -> Callable[[Tensor], Tensor]:
    """A fixed random linear functional so every output coordinate matters."""
    w = rng.normal(size=out.shape)
    return lambda y: ag.sum_(ag.mul(y, w))


def _unary(op, positive=False, shape=(3, 4)):
    def build(rng) -> Case:
        x = _leaf(rng, *shape, positive=positive)
        proj = _project(op(x), rng)
        return (lambda: proj(op(x))), {"x": x}
    return build


def _binary(op, positive_b=False):
    def build(rng) -> Case:
        a = _leaf(rng, 3, 4)
        b = _leaf(rng, 4, positive=positive_b)        # broadcast along rows
        proj = _project(op(a, b), rng)
        return (lambda: proj(op(a, b))), {"a": a, "b": b}
    return build


def _matmul(shape_a, shape_b):
    def build(rng) -> Case:
        a, b = _leaf(rng, *shape_a), _leaf(rng, *shape_b)
        proj = _project(ag.matmul(a, b), rng)
        return (lambda: proj(ag.matmul(a, b))), {"a": a, "b": b}
    return build


def _where(rng) -> Case:
    cond = rng.random((3, 4)) < 0.5
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4)
    proj = _project(ag.where(cond, a, b), rng)
    return (lambda: proj(ag.where(cond, a, b))), {"a": a, "b": b}


def _getitem_advanced(rng) -> Case:
    x = _leaf(rng, 4, 5)
    rows = np.array([0, 2, 2, 3])
    cols = np.array([1, 1, 1, 4])                    # repeated index accumulates
    proj = _project(x[rows, cols], rng)
    return (lambda: proj(x[rows, cols])), {"x": x}


def _concat(rng) -> Case:
    a, b = _leaf(rng, 2, 3), _leaf(rng, 2, 2)
    proj = _project(ag.concat([a, b], axis=1), rng)
    return (lambda: proj(ag.concat([a, b], axis=1))), {"a": a, "b": b}


def _layer_norm(rng) -> Case:
    x = _leaf(rng, 3, 6)
    g, b = _leaf(rng, 6), _leaf(rng, 6)
    proj = _project(ag.layer_norm(x, g, b), rng)
    return (lambda: proj(ag.layer_norm(x, g, b))), {"x": x, "gamma": g, "beta": b}


def _embedding(rng) -> Case:
    table = _leaf(rng, 6, 3)
    ids = rng.integers(0, 6, size=(2, 4))
    proj = _project(ag.embedding_lookup(table, ids), rng)
    return (lambda: proj(ag.embedding_lookup(table, ids))), {"table": table}


def _dropout(rng) -> Case:
    x = _leaf(rng, 3, 5)
    seed = int(rng.integers(1 << 31))
    op = lambda: ag.dropout(x, 0.3, np.random.default_rng(seed), True)
    proj = _project(op(), rng)
    return (lambda: proj(op())), {"x": x}


def _attention(rng) -> Case:
    q, k, v = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 3, 4), _leaf(rng, 2, 3, 4)
    bias = ag.causal_bias(3)
    proj = _project(ag.attention(q, k, v, bias), rng)
    return (lambda: proj(ag.attention(q, k, v, bias))), {"q": q, "k": k, "v": v}


def _cross_entropy(rng) -> Case:
    logits = _leaf(rng, 5, 4)
    targets = rng.integers(0, 4, size=5)
    targets[1] = 0
    return (lambda: ag.cross_entropy(logits, targets, ignore_index=0)), {"logits": logits}


def _crf(rng) -> Case:
    from .crf import CrfParams, batch_log_likelihood
    K, T = 4, 5
    crf = CrfParams(K, rng, std=1.0)
    for p in crf.named_parameters().values():
        p.requires_grad = True
    em = _leaf(rng, 2, T, K)
    tags = rng.integers(0, K, size=(2, T))
    lengths = [T, 3]
    params = {"emissions": em, **crf.named_parameters("crf.")}
    return (lambda: ag.sum_(batch_log_likelihood(em, tags, lengths, crf))), params


def _interface(rng) -> Case:
    from .cti import continuous_interface, expected_embedding
    logits, table = _leaf(rng, 2, 3, 6), _leaf(rng, 6, 4)
    op = lambda: expected_embedding(continuous_interface(logits), table)
    proj = _project(op(), rng)
    return (lambda: proj(op())), {"logits": logits, "table": table}


OP_CASES: Dict[str, Callable] = {
    "add": _binary(ag.add),
    "sub": _binary(ag.sub),
    "mul": _binary(ag.mul),
    "div": _binary(ag.div, positive_b=True),
    "exp": _unary(ag.exp),
    "log": _unary(ag.log, positive=True),
    "tanh": _unary(ag.tanh),
    "gelu": _unary(ag.gelu),
    "where": _where,
    "matmul": _matmul((3, 4), (4, 2)),
    "matmul_batched": _matmul((2, 3, 4), (2, 4, 2)),
    "matmul_stacked_weight": _matmul((2, 3, 4), (4, 2)),
    "sum": _unary(lambda x: ag.sum_(x, axis=1, keepdims=True)),
    "mean": _unary(lambda x: ag.mean(x, axis=0)),
    "reshape": _unary(lambda x: ag.reshape(x, (2, 6))),
    "transpose": _unary(lambda x: ag.transpose(x, (1, 0))),
    "getitem": _unary(lambda x: x[1:, ::2]),
    "getitem_advanced": _getitem_advanced,
    "concat": _concat,
    "softmax": _unary(lambda x: ag.softmax(x, axis=-1), shape=(1, 5)),
    "log_softmax": _unary(lambda x: ag.log_softmax(x, axis=-1)),
    "logsumexp": _unary(lambda x: ag.logsumexp(x, axis=0)),
    "layer_norm": _layer_norm,
    "embedding_lookup": _embedding,
    "dropout": _dropout,
    "attention": _attention,
    "cross_entropy": _cross_entropy,
    "crf_log_likelihood": _crf,
    "continuous_interface": _interface,
}


def check_op(name: str, trials: int = 100, seed: int = 0, step: float = STEP,
             tolerance: float = TOLERANCE) -> dict:
    """Worst relative error of ``name`` over ``trials`` random instances."""
    if name not in OP_CASES:
        raise KeyError(f"unknown op {name!r}; choose from {sorted(OP_CASES)} or 'all'")
    worst, failing = 0.0, []
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        f, params = OP_CASES[name](rng)
        rep = ag.grad_check(f, params, step, tolerance)
        worst = max(worst, rep.max_rel_err)
        if not rep.passed:
            failing.append({"trial": trial, "report": rep.to_dict()})
    return {"name": name, "trials": trials, "max_rel_err": worst, "passed": not failing,
            "failing": failing[:3]}


def tiny_config(seed: int = 0) -> ExperimentConfig:
    cfg = ExperimentConfig(seed=seed)
    cfg.asr = AsrConfig(d=8, n_enc=1, n_dec=1, heads=2, d_ff=16, dropout=0.1)
    cfg.nlu = NluConfig(d=8, n_layers=1, heads=2, d_ff=16, dropout=0.1)
    cfg.data.n_examples = 40
    cfg.data.d_feat = 8
    cfg.train.weights = {n: w for n, w in zip(LOSS_NAMES, (1.0, 0.5, 2.0, 1.0, 0.7, 1.3, 0.9))}
    cfg.train.mask_prob = 0.3
    return cfg.validate()


def full_model_case(seed: int = 0, batch_size: int = 3) -> Case:
    """Weighted total of all seven losses on a speech batch and a text batch."""
    from .batching import make_batch
    from .losses import total_loss
    from .trainer import build_data, e2e_components, new_asr, new_nlu

    cfg = tiny_config(seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")        # a 40-example corpus cannot cover every intent per split
        data = build_data(cfg)
    asr, nlu = new_asr(cfg, data), new_nlu(cfg, data)
    items = data.subset("train")
    speech = make_batch(items[:batch_size])
    text = make_batch(items[batch_size:2 * batch_size])

    def f():
        rng = np.random.default_rng(seed)
        comps = e2e_components(asr, nlu, speech, "speech_full", cfg, rng)
        comps.update(e2e_components(asr, nlu, text, "text_only", cfg, rng))
        return total_loss(comps, cfg.train.weights).total

    params = dict(asr.named_parameters())
    params.update(nlu.named_parameters())
    return f, params


def check_full(seed: int = 0, max_coords: int = 4, step: float = STEP,
               tolerance: float = TOLERANCE) -> dict:
    f, params = full_model_case(seed)
    rep = ag.grad_check(f, params, step, tolerance, max_coords=max_coords, seed=seed)
    out = rep.to_dict()
    out["name"] = "full"
    out["n_params"] = len(params)
    return out


def run(target: str = "all", trials: int = 100, seed: int = 0) -> dict:
    """Reports for one op, ``full``, or ``all`` (every op plus ``full``)."""
    t0 = time.perf_counter()
    names = list(OP_CASES) + ["full"] if target == "all" else [target]
    reports = [check_full(seed) if n == "full" else check_op(n, trials, seed) for n in names]
    worst = max(r["max_rel_err"] for r in reports)
    return {"target": target, "passed": all(r["passed"] for r in reports), "max_rel_err": worst,
            "tolerance": TOLERANCE, "seconds": time.perf_counter() - t0, "reports": reports}
