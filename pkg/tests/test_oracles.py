import json

import numpy as np
import pytest

from ctislu import gradsuite, oracles


def test_crf_oracle_passes():
    res = oracles.crf_oracle(n=200, seed=1)
    assert res["passed"], res["failures"][:1]
    assert res["path_mismatches"] == 0
    assert max(res["max_abs_err"].values()) <= 1e-8


def test_crf_sign_flip_is_detected():
    res = oracles.crf_oracle(n=100, seed=1, mutation="crf_transition_sign")
    assert not res["passed"]
    case = res["failures"][0]
    json.dumps(case)                                # failing case is dumpable
    assert {"emissions", "transitions", "path", "expected_path"} <= set(case)


def test_unknown_mutation_rejected():
    with pytest.raises(ValueError):
        oracles.crf_oracle(n=1, mutation="nope")


def test_brute_force_tiny_case():
    logz, path, best = oracles.brute_force_crf(np.array([[1.0, 2.0]]), np.zeros((2, 2)), np.zeros(2), np.zeros(2))
    assert logz == pytest.approx(np.log(np.e + np.e ** 2))
    assert path == [1] and best == 2.0


def test_interface_oracle_passes():
    res = oracles.interface_oracle(n=20, seed=2)
    assert res["passed"], res["failures"]
    assert all(res["checks"].values())


def test_gradsuite_full_model():
    res = gradsuite.check_full(seed=1)
    assert res["passed"], res
    assert res["n_params"] > 50


def test_gradsuite_unknown_op():
    with pytest.raises(KeyError):
        gradsuite.check_op("nope")
