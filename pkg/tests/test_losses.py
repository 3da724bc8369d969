import math

import numpy as np
import pytest

from ctislu import autograd as ag
from ctislu.autograd import Tensor
from ctislu.batching import make_batch
from ctislu.config import LOSS_NAMES, AsrConfig, NluConfig
from ctislu.cti import gold_interface
from ctislu.gradsuite import tiny_config
from ctislu.losses import AlignmentError, EmptyBatchError, asr_loss, nlu_loss, slu_loss, total_loss
from ctislu.nlu import NluModel, NluOutput
from ctislu.trainer import e2e_components, new_asr, new_nlu
from ctislu.vocab import MASK, PAD

from conftest import quiet_build


@pytest.fixture(scope="module")
def tiny_setup():
    cfg = tiny_config(seed=0)
    data = quiet_build(cfg)
    return cfg, data, new_asr(cfg, data), new_nlu(cfg, data)


def text_batch(data, n=4):
    return make_batch(data.subset("train")[:n])


def test_untrained_intent_loss_near_log_classes():
    ids = np.random.default_rng(0).integers(5, 40, size=(16, 6))
    intents = np.arange(16) % 8
    tags = np.zeros_like(ids)
    for seed in range(5):
        m = NluModel(NluConfig(), 40, 8, 13, seed=seed)
        s2i = slu_loss(m.forward(gold_interface(ids, 40)), m, ids, np.full(16, 6), intents, tags)["s2i"]
        assert abs(s2i.item() - math.log(8)) < 0.3


def _fake_output(value_logits, emissions=None, B=1):
    T = value_logits.shape[1]
    em = emissions if emissions is not None else np.zeros((B, T, 3))
    return NluOutput(Tensor(np.zeros((B, 2))), Tensor(em), Tensor(value_logits), Tensor(np.zeros((B, 4))),
                     np.ones((B, T + 1)) / (T + 1), np.full(B, T))


def test_perfect_value_logits_give_tiny_s2v():
    ids = np.array([[5, 8, 6, 9]])
    vl = 20.0 * np.eye(10)[ids]
    m = NluModel(NluConfig(d=8, n_layers=1, heads=2, d_ff=16), 10, 2, 3)
    out = _fake_output(vl)
    s2v = slu_loss(out, m, ids, np.array([4]), np.array([0]), np.zeros_like(ids), which=("s2v",))["s2v"]
    assert s2v.item() < 0.01


def test_saturated_emissions_give_zero_s2k():
    tags = np.array([[0, 1, 2, 0]])
    em = 30.0 * np.eye(3)[tags]
    m = NluModel(NluConfig(d=8, n_layers=1, heads=2, d_ff=16), 10, 2, 3)
    m.crf.transitions.data[...] = 0
    m.crf.start.data[...] = 0
    m.crf.end.data[...] = 0
    out = _fake_output(np.zeros((1, 4, 10)), em)
    s2k = slu_loss(out, m, np.array([[5, 6, 7, 8]]), np.array([4]), np.array([0]), tags, which=("s2k",))["s2k"]
    assert 0 <= s2k.item() < 1e-10


def test_s2v_averages_over_every_position(tiny_setup):
    _, data, _, nlu = tiny_setup
    b = text_batch(data)
    out = nlu.forward(gold_interface(b.ids, len(data.vocab)), b.lengths)
    s2v = slu_loss(out, nlu, b.ids, b.lengths, b.intents, b.tags, which=("s2v",))["s2v"].item()
    logp = out.value_logits.data - np.log(np.exp(out.value_logits.data).sum(-1, keepdims=True))
    rows = [logp[i, t, b.ids[i, t]] for i in range(len(b)) for t in range(b.lengths[i])]
    assert len(rows) == b.lengths.sum()
    assert s2v == pytest.approx(-np.mean(rows), abs=1e-12)


def test_slu_loss_length_mismatch(tiny_setup):
    _, data, _, nlu = tiny_setup
    b = text_batch(data)
    out = nlu.forward(gold_interface(b.ids[:, :-1], len(data.vocab)))
    with pytest.raises(AlignmentError):
        slu_loss(out, nlu, b.ids, b.lengths, b.intents, b.tags)


def test_mask_probability_extremes(tiny_setup):
    _, data, _, nlu = tiny_setup
    b = text_batch(data)
    zero = nlu_loss(nlu, b.ids, b.lengths, b.intents, b.tags, 0.0, np.random.default_rng(0))
    assert zero["t2v"].item() == 0.0
    calls = []
    orig = nlu.forward_ids
    nlu.forward_ids = lambda ids, *a, **k: calls.append(ids) or orig(ids, *a, **k)
    try:
        nlu_loss(nlu, b.ids, b.lengths, b.intents, b.tags, 1.0, np.random.default_rng(0))
    finally:
        del nlu.forward_ids
    assert np.all(calls[0][b.token_mask] == MASK)
    assert np.all(calls[0][~b.token_mask] == PAD)


def test_nlu_loss_deterministic_per_seed(tiny_setup):
    _, data, _, nlu = tiny_setup
    b = text_batch(data)
    a = nlu_loss(nlu, b.ids, b.lengths, b.intents, b.tags, 0.5, np.random.default_rng(4), train=False)
    c = nlu_loss(nlu, b.ids, b.lengths, b.intents, b.tags, 0.5, np.random.default_rng(4), train=False)
    assert all(a[k].item() == c[k].item() for k in a)


def test_asr_loss_perfect_and_uniform():
    gold = np.array([[5, 6, 7]])
    targets = [5, 6, 7, 2]
    perfect = 50.0 * np.eye(150)[targets][None]
    assert asr_loss(Tensor(perfect), gold).item() < 1e-12
    assert asr_loss(Tensor(np.zeros((1, 4, 150))), gold).item() == pytest.approx(math.log(150), abs=1e-12)
    assert math.log(150) == pytest.approx(5.0106, abs=1e-4)


def test_asr_loss_alignment_error():
    with pytest.raises(AlignmentError):
        asr_loss(Tensor(np.zeros((1, 3, 10))), np.array([[5, 6, 7]]))


def test_asr_loss_ignores_padding():
    gold = np.array([[5, 6, 0], [7, 0, 0]])
    logits = np.random.default_rng(0).normal(size=(2, 4, 10))
    full = asr_loss(Tensor(logits), gold, np.array([2, 1])).item()
    altered = logits.copy()
    altered[0, 3], altered[1, 2:] = 99.0, -99.0           # rows past each EOS
    assert asr_loss(Tensor(altered), gold, np.array([2, 1])).item() == full


def test_asr_loss_gradient_end_to_end(tiny_setup):
    cfg, data, asr, _ = tiny_setup
    b = text_batch(data, 2)
    params = {n: p for n, p in asr.named_parameters().items()}
    rep = ag.grad_check(lambda: asr_loss(asr.decode_teacher_forced(asr.encode(b.features, b.frame_mask), b.ids,
                                                                   b.frame_mask), b.ids, b.lengths),
                        params, max_coords=3)
    assert rep.max_rel_err < 1e-4


def test_total_is_weighted_sum():
    comps = {"s2i": Tensor(1.0), "s2k": Tensor(2.0), "asr": Tensor(3.0)}
    assert total_loss(comps).total.item() == 6.0
    assert total_loss({"t2v": Tensor(2.5)}).total.item() == 2.5
    b = total_loss(comps, {"s2i": 2.0, "s2k": 0.5, "asr": 0.0})
    assert b.total.item() == 3.0
    assert b.present() == ["s2i", "s2k", "asr"] and b.t2i is None


def test_total_rejects_empty_and_unknown():
    with pytest.raises(EmptyBatchError):
        total_loss({})
    with pytest.raises(EmptyBatchError):
        total_loss({"s2i": None})
    with pytest.raises(KeyError):
        total_loss({"bogus": Tensor(1.0)})


def test_zero_weight_gives_zero_exclusive_gradient():
    a, b = Tensor(np.array(2.0), requires_grad=True), Tensor(np.array(3.0), requires_grad=True)
    total_loss({"s2i": ag.mul(a, a), "asr": ag.mul(b, b)}, {"s2i": 1.0, "asr": 0.0}).total.backward()
    assert a.grad == 4.0 and b.grad == 0.0


def test_stream_heterogeneity_and_additivity(tiny_setup):
    cfg, data, asr, nlu = tiny_setup
    b = text_batch(data)
    expected = {"speech_text": {"asr"}, "text_only": {"t2i", "t2k", "t2v"},
                "speech_full": {"asr", "s2i", "s2k", "s2v"}}
    seen = set()
    for stream, names in expected.items():
        comps = e2e_components(asr, nlu, b, stream, cfg, np.random.default_rng(0))
        assert set(comps) == names
        bundle = total_loss(comps, cfg.train.weights)
        manual = sum(cfg.train.weights[n] * comps[n].item() for n in LOSS_NAMES if n in comps)
        assert abs(bundle.total.item() - manual) < 1e-12
        assert all(comps[n].item() >= 0 for n in comps)
        seen |= names
    assert seen == set(LOSS_NAMES)


def test_total_loss_reaches_every_asr_parameter(tiny_setup):
    cfg, data, asr, nlu = tiny_setup
    cfg = tiny_config(0)
    cfg.asr = AsrConfig(d=8, n_enc=1, n_dec=1, heads=2, d_ff=16)            # no dropout
    b = text_batch(data)
    asr.zero_grad()
    nlu.zero_grad()
    total_loss(e2e_components(asr, nlu, b, "speech_full", cfg, np.random.default_rng(0), train=False)).total.backward()
    for name, p in asr.named_parameters().items():
        assert p.grad is not None and np.any(p.grad != 0), name
