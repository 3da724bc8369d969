"""Independent oracles for the CRF and the token interface.

The CRF oracle enumerates every tag path of small random instances and
compares log Z, the gold log-likelihood and the Viterbi path with the dynamic
programs. The interface oracle checks that one-hot token distributions reach
the NLU exactly as an embedding lookup would.
"""
from __future__ import annotations

import itertools
import time
from typing import Optional

import numpy as np

from . import autograd as ag
from . import crf as crf_mod
from .config import NluConfig
from .cti import continuous_interface, discrete_interface, expected_embedding, gold_interface
from .nlu import NluModel

MUTATIONS = ("crf_transition_sign",)


def brute_force_crf(emissions: np.ndarray, transitions: np.ndarray, start: np.ndarray,
                    end: np.ndarray):
    """(log Z, best path, best score) by enumerating all K**T paths."""
    T, K = emissions.shape
    scores, paths = [], []
    for path in itertools.product(range(K), repeat=T):
        s = start[path[0]] + end[path[-1]] + emissions[np.arange(T), path].sum()
        s += sum(transitions[a, b] for a, b in zip(path, path[1:]))
        scores.append(s)
        paths.append(list(path))
    scores = np.array(scores)
    m = scores.max()
    best = int(np.argmax(scores))
    return float(m + np.log(np.exp(scores - m).sum())), paths[best], float(scores[best])


def crf_oracle(n: int = 1000, seed: int = 0, max_t: int = 5, max_k: int = 5, atol: float = 1e-8,
               mutation: Optional[str] = None) -> dict:
    """Compare the forward algorithm and Viterbi with enumeration on ``n`` instances.

    ``mutation='crf_transition_sign'`` hands the implementation negated
    transitions while the oracle keeps the true ones; the check must fail.
    """
    if mutation is not None and mutation not in MUTATIONS:
        raise ValueError(f"unknown mutation {mutation!r}")
    rng = np.random.default_rng(seed)
    worst = {"log_z": 0.0, "log_likelihood": 0.0, "viterbi_score": 0.0}
    path_mismatches = 0
    failures = []
    t0 = time.perf_counter()
    for i in range(n):
        T, K = int(rng.integers(1, max_t + 1)), int(rng.integers(1, max_k + 1))
        em = rng.normal(scale=2.0, size=(T, K))
        trans, start, end = (rng.normal(scale=2.0, size=s) for s in ((K, K), (K,), (K,)))
        gold = rng.integers(0, K, size=T)
        ref_z, ref_path, ref_best = brute_force_crf(em, trans, start, end)
        ref_ll = crf_mod.path_score(em, gold, trans, start, end) - ref_z

        impl_trans = -trans if mutation == "crf_transition_sign" else trans
        params = crf_mod.CrfParams(K)
        params.transitions.data[...] = impl_trans
        params.start.data[...] = start
        params.end.data[...] = end
        got_z = crf_mod.log_partition(em, impl_trans, start, end)
        got_ll = float(crf_mod.log_likelihood(ag.Tensor(em), gold, params).data)
        got_path, got_best = crf_mod.viterbi_decode(em, impl_trans, start, end)

        errs = {"log_z": abs(got_z - ref_z), "log_likelihood": abs(got_ll - ref_ll),
                "viterbi_score": abs(got_best - ref_best)}
        for k, v in errs.items():
            worst[k] = max(worst[k], v)
        bad_path = got_path != ref_path
        path_mismatches += bad_path
        if bad_path or max(errs.values()) > atol:
            if len(failures) < 5:
                failures.append({"instance": i, "T": T, "K": K, "errors": errs,
                                 "path": got_path, "expected_path": ref_path,
                                 "emissions": em.tolist(), "transitions": trans.tolist(),
                                 "start": start.tolist(), "end": end.tolist()})
    passed = max(worst.values()) <= atol and path_mismatches == 0
    return {"name": "crf", "n": n, "atol": atol, "passed": passed, "max_abs_err": worst,
            "path_mismatches": path_mismatches, "seconds": time.perf_counter() - t0,
            "mutation": mutation, "failures": failures}


def interface_oracle(n: int = 50, seed: int = 0, gap: float = 15.0) -> dict:
    """One-hot Z through Z @ E is bitwise an embedding lookup; large gaps make
    continuous and discrete rows agree to within V * exp(-gap)."""
    rng = np.random.default_rng(seed)
    V = 12
    nlu = NluModel(NluConfig(d=8, n_layers=1, heads=2, d_ff=16), V, 3, 5, seed=seed)
    checks = {"onehot_bitwise": True, "discrete_equals_gold": True, "rows_stochastic": True,
              "gap_bound": True}
    worst_gap_diff = 0.0
    failures = []
    for i in range(n):
        B, T = int(rng.integers(1, 4)), int(rng.integers(1, 7))
        ids = rng.integers(5, V, size=(B, T))
        lengths = rng.integers(1, T + 1, size=B)
        z = gold_interface(ids, V)
        a = nlu.forward(z, lengths)
        b = nlu.forward_ids(ids, lengths)
        same = all(np.array_equal(x, y) for x, y in (
            (a.intent_logits.data, b.intent_logits.data), (a.emissions.data, b.emissions.data),
            (a.value_logits.data, b.value_logits.data)))
        lookup_same = np.array_equal(expected_embedding(z, nlu.embed).data, nlu.embed.data[ids])
        if not (same and lookup_same):
            checks["onehot_bitwise"] = False
            failures.append({"case": i, "check": "onehot_bitwise", "ids": ids.tolist()})

        logits = rng.normal(size=(B, T, V))
        logits[np.arange(B)[:, None], np.arange(T)[None, :], ids] += gap + np.abs(logits).max() * 2
        cont = continuous_interface(ag.Tensor(logits))
        disc = discrete_interface(ag.Tensor(logits))
        try:
            cont.check()
        except ValueError:
            checks["rows_stochastic"] = False
            failures.append({"case": i, "check": "rows_stochastic"})
        if not np.array_equal(disc.z.data, z.z.data):
            checks["discrete_equals_gold"] = False
            failures.append({"case": i, "check": "discrete_equals_gold"})
        diff = np.abs(cont.z.data - disc.z.data).max()
        worst_gap_diff = max(worst_gap_diff, float(diff))
        if diff > V * np.exp(-gap):
            checks["gap_bound"] = False
            failures.append({"case": i, "check": "gap_bound", "diff": float(diff)})
    return {"name": "interface", "n": n, "passed": all(checks.values()), "checks": checks,
            "max_gap_diff": worst_gap_diff, "failures": failures[:5]}


def run_all(seed: int = 0, crf_instances: int = 1000, mutation: Optional[str] = None) -> dict:
    t0 = time.perf_counter()
    reports = [crf_oracle(crf_instances, seed, mutation=mutation), interface_oracle(seed=seed)]
    return {"passed": all(r["passed"] for r in reports), "seconds": time.perf_counter() - t0,
            "reports": reports}
