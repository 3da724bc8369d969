"""Seeded comparison runs: interface ablation, end-to-end gain, s2v and NLU-stream ablations.

One call to :func:`run_seed` pretrains an ASR and an NLU separately, composes
them with both interfaces, then fine-tunes copies of the pair under each
weighting of interest. All numbers are on the dev split.
"""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional

import numpy as np

from .config import LOSS_NAMES, ExperimentConfig
from .cti import CONTINUOUS, DISCRETE
from .trainer import (build_data, compose_inference, pretrain_asr, pretrain_nlu, train_e2e,
                      with_train)

log = logging.getLogger(__name__)


def weights(*on: str) -> Dict[str, float]:
    return {n: (1.0 if n in on else 0.0) for n in LOSS_NAMES}


A_S = weights("asr", "s2i", "s2k", "s2v")
A_S_NO_S2V = weights("asr", "s2i", "s2k")
A_S_N = weights(*LOSS_NAMES)


@dataclass
class Budget:
    asr_steps: int = 600
    nlu_steps: int = 400
    mlm_steps: int = 200
    e2e_steps: int = 600
    eval_interval: int = 100
    text_mix: float = 0.25


def _summary(rep) -> dict:
    return {"ic": rep.ic_accuracy, "span_f1": rep.span_f1, "slu_f1": rep.slu_f1, "wer": rep.wer}


def pretrain_pair(cfg: ExperimentConfig, data, budget: Budget):
    a = with_train(cfg, regime="asr_pretrain", steps=budget.asr_steps, eval_interval=budget.eval_interval * 2)
    _, asr = pretrain_asr(a, data)
    n = with_train(cfg, regime="nlu_pretrain", steps=budget.nlu_steps, mlm_steps=budget.mlm_steps,
                   eval_interval=budget.eval_interval * 2)
    _, nlu = pretrain_nlu(n, data)
    return asr, nlu


def run_seed(seed: int, noise_level: float = 0.6, budget: Optional[Budget] = None,
             base: Optional[ExperimentConfig] = None, runs=("A+S", "A+S-s2v", "A+S+N")) -> dict:
    """All comparison numbers for one seed, keyed by run name.

    ``seconds`` holds wall time for the pretraining-plus-composition part and
    for the whole call.
    """
    t0 = time.perf_counter()
    budget = budget or Budget()
    cfg = copy.deepcopy(base) if base is not None else ExperimentConfig()
    cfg.seed = seed
    cfg.data.noise_level = noise_level
    cfg.validate()
    data = build_data(cfg)
    dev = data.subset("dev")
    asr, nlu = pretrain_pair(cfg, data, budget)
    res = {"seed": seed,
           "composed_continuous": _summary(compose_inference(asr, nlu, CONTINUOUS, dev, data)),
           "composed_discrete": _summary(compose_inference(asr, nlu, DISCRETE, dev, data))}
    res["seconds"] = {"compose": time.perf_counter() - t0}
    specs = {"A+S": ("e2e", A_S, None),
             "A+S-s2v": ("e2e", A_S_NO_S2V, None),
             "A+S+N": ("e2e_multitask", A_S_N, {"speech_full": 1.0 - budget.text_mix, "speech_text": 0.0,
                                                 "text_only": budget.text_mix})}
    for name in runs:
        regime, w, mixing = specs[name]
        over = dict(regime=regime, steps=budget.e2e_steps, eval_interval=budget.eval_interval, weights=dict(w))
        if mixing is not None:
            over["mixing"] = mixing
        e = with_train(cfg, **over)
        a2, n2 = copy.deepcopy(asr), copy.deepcopy(nlu)
        train_e2e(e, data, a2, n2)
        res[name] = _summary(compose_inference(a2, n2, CONTINUOUS, dev, data))
        log.info("seed %d %s %s", seed, name, res[name])
    res["seconds"]["total"] = time.perf_counter() - t0
    return res


def medians(results: List[dict]) -> dict:
    """Per-run median of every metric across seeds."""
    out = {}
    for key in results[0]:
        if key in ("seed", "seconds"):
            continue
        out[key] = {m: float(np.median([r[key][m] for r in results])) for m in results[0][key]
                    if results[0][key][m] is not None}
    return out


def budget_from_dict(d: dict) -> Budget:
    b = Budget()
    for k, v in d.items():
        if k not in asdict(b):
            raise KeyError(f"unknown budget field {k!r}")
        setattr(b, k, type(getattr(b, k))(v))
    return b
