import copy
import json
from dataclasses import replace

import numpy as np
import pytest

from ctislu.config import ExperimentConfig, derive_seed, small_config
from ctislu.cti import CONTINUOUS, DISCRETE, SharedVocabularyError
from ctislu.experiments import A_S, A_S_N, medians
from ctislu.gradsuite import tiny_config
from ctislu.synth import speech_text_view, text_label_view
from ctislu.trainer import (VALUE_SOURCES, BatchStream, StreamError, compose_inference,
                            data_from_splits, evaluate_nlu_text, load_asr, load_nlu, new_asr,
                            new_nlu, pretrain_asr, pretrain_nlu, train_e2e, with_train)
from ctislu.vocab import ConfigurationError, Vocabulary

from conftest import quiet_build


# ---------------------------------------------------------------- configuration

def test_steps_must_be_positive():
    with pytest.raises(ConfigurationError):
        with_train(ExperimentConfig(), steps=0)


def test_mixing_must_be_a_distribution():
    with pytest.raises(ConfigurationError):
        with_train(ExperimentConfig(), mixing={"speech_full": 0.5, "speech_text": 0.0, "text_only": 0.4})
    with pytest.raises(ConfigurationError):
        with_train(ExperimentConfig(), mixing={"speech_full": 1.2, "speech_text": -0.2, "text_only": 0.0})


def test_overrides_are_parsed_and_revalidated():
    cfg = ExperimentConfig().with_overrides(["train.steps=7", "data.noise_level=0.5", "train.regime=e2e_multitask"])
    assert cfg.train.steps == 7 and cfg.data.noise_level == 0.5 and cfg.train.regime == "e2e_multitask"
    with pytest.raises(ConfigurationError):
        ExperimentConfig().with_overrides(["train.nope=1"])
    with pytest.raises(ConfigurationError):
        ExperimentConfig().with_overrides(["train.steps=-1"])


def test_config_file_round_trip(tmp_path):
    cfg = small_config(3)
    cfg.save(tmp_path / "c.json")
    assert ExperimentConfig.load(tmp_path / "c.json") == cfg
    (tmp_path / "bad.json").write_text(json.dumps({"seed": 1, "extra": 2}))
    with pytest.raises(ConfigurationError):
        ExperimentConfig.load(tmp_path / "bad.json")


def test_child_seeds_stable_and_distinct():
    assert derive_seed(0, "asr.init") == derive_seed(0, "asr.init")
    assert derive_seed(0, "asr.init") != derive_seed(0, "nlu.init")
    assert derive_seed(0, "asr.init") != derive_seed(1, "asr.init")


# ---------------------------------------------------------------- batching

def test_revisits_draw_fresh_noise(small_cfg, small_data):
    items = small_data.subset("train")[:3]
    s = BatchStream(items, 3, np.random.default_rng(0), small_cfg.data, len(small_data.vocab))
    first, second = s.next(), s.next()
    order1 = [it.example.id for it in first.examples]
    order2 = [it.example.id for it in second.examples]
    for i, ex_id in enumerate(order2):
        j = order1.index(ex_id)
        assert np.array_equal(first.ids[j], second.ids[i])
        assert not np.allclose(first.features[j], second.features[i])


# ---------------------------------------------------------------- pretraining

def _quick(cfg, **over):
    return with_train(cfg, **{"steps": 8, "batch_size": 8, "eval_max_examples": 10, **over})


def test_asr_pretraining_is_reproducible(small_cfg, small_data, tmp_path):
    cfg = _quick(small_cfg, regime="asr_pretrain")
    r1, _ = pretrain_asr(cfg, small_data, out_dir=tmp_path / "a")
    r2, _ = pretrain_asr(cfg, small_data, out_dir=tmp_path / "b")
    assert r1.losses == r2.losses and r1.metrics == r2.metrics
    assert (tmp_path / "a" / "losses.jsonl").read_bytes() == (tmp_path / "b" / "losses.jsonl").read_bytes()
    assert set(r1.losses[0]) >= {"step", "asr", "total", "s2i", "t2v"}
    assert "dev_wer" in r1.final_metrics


def test_asr_pretraining_needs_speech(small_cfg, small_data):
    splits = {k: [text_label_view(ex) for ex in v] for k, v in small_data.splits.items()}
    data = data_from_splits(small_cfg, splits, vocab=small_data.vocab)
    with pytest.raises(StreamError):
        pretrain_asr(_quick(small_cfg, regime="asr_pretrain"), data)


def test_nlu_pretraining_needs_labels(small_cfg, small_data):
    splits = {k: [speech_text_view(ex) for ex in v] for k, v in small_data.splits.items()}
    data = data_from_splits(small_cfg, splits, vocab=small_data.vocab)
    with pytest.raises(StreamError):
        pretrain_nlu(_quick(small_cfg, regime="nlu_pretrain"), data)


def test_masking_disabled_zeroes_t2v(small_cfg, small_data):
    rec, _ = pretrain_nlu(_quick(small_cfg, regime="nlu_pretrain", mask_prob=0.0), small_data)
    assert all(row["t2v"] == 0.0 for row in rec.losses)
    assert all(row["s2i"] is None and row["asr"] is None for row in rec.losses)


@pytest.mark.slow
def test_shuffled_labels_give_chance_accuracy(small_cfg, small_data):
    rng = np.random.default_rng(0)
    train = small_data.splits["train"]
    intents = [ex.intent for ex in train]
    rng.shuffle(intents)
    splits = dict(small_data.splits, train=[replace(ex, intent=i) for ex, i in zip(train, intents)])
    data = data_from_splits(small_cfg, splits, vocab=small_data.vocab, labels=small_data.labels)
    cfg = with_train(small_cfg, regime="nlu_pretrain", steps=200, eval_interval=0)
    _, nlu = pretrain_nlu(cfg, data)
    ic = evaluate_nlu_text(nlu, data.subset("test"), data).ic_accuracy
    assert abs(ic - 1 / len(data.labels.intents)) < 0.15


# ---------------------------------------------------------------- composition and e2e

@pytest.fixture(scope="module")
def tiny_pair():
    cfg = tiny_config(0)
    cfg.data.n_examples = 80
    data = quiet_build(cfg)
    _, asr = pretrain_asr(with_train(cfg, regime="asr_pretrain", steps=5), data)
    _, nlu = pretrain_nlu(with_train(cfg, regime="nlu_pretrain", steps=5), data)
    return cfg, data, asr, nlu


def test_compose_both_interfaces(tiny_pair):
    cfg, data, asr, nlu = tiny_pair
    for mode in (CONTINUOUS, DISCRETE):
        preds = []
        rep = compose_inference(asr, nlu, mode, data.subset("dev"), data, predictions=preds)
        assert rep.n_examples == len(data.subset("dev")) == len(preds)
        assert rep.wer is not None
    with pytest.raises(ValueError):
        compose_inference(asr, nlu, "gold", data.subset("dev"), data)
    with pytest.raises(ValueError):
        evaluate_nlu_text(nlu, data.subset("dev"), data, value_source="bogus")
    assert "head" in VALUE_SOURCES


def test_composition_requires_shared_vocabulary(tiny_pair):
    cfg, data, asr, nlu = tiny_pair
    other = data_from_splits(cfg, data.splits, vocab=Vocabulary(list(data.vocab.tokens) + ["zzz"]))
    with pytest.raises(SharedVocabularyError):
        compose_inference(asr, nlu, CONTINUOUS, other.subset("dev"), other)
    with pytest.raises(SharedVocabularyError):
        train_e2e(with_train(cfg, steps=1), other, copy.deepcopy(asr), copy.deepcopy(nlu))


def test_checkpoint_round_trip(tiny_pair, tmp_path):
    cfg, data, asr, nlu = tiny_pair
    from ctislu.trainer import save_checkpoint
    save_checkpoint(tmp_path / "asr.json", asr, data, cfg)
    save_checkpoint(tmp_path / "nlu.json", nlu, data, cfg)
    a2, n2 = load_asr(tmp_path / "asr.json", cfg), load_nlu(tmp_path / "nlu.json", cfg)
    dev = data.subset("dev")
    assert (compose_inference(asr, nlu, CONTINUOUS, dev, data)
            == compose_inference(a2, n2, CONTINUOUS, dev, data))


def test_weighting_controls_logged_components(tiny_pair):
    cfg, data, asr, nlu = tiny_pair
    a_s = with_train(cfg, regime="e2e", steps=6, weights=dict(A_S))
    rec, _, _ = train_e2e(a_s, data, copy.deepcopy(asr), copy.deepcopy(nlu))
    assert all(r["t2i"] is None and r["s2v"] is not None for r in rec.losses)
    assert all(g["asr_encoder"] > 0 for g in rec.grad_norms)
    mixed = with_train(cfg, regime="e2e_multitask", steps=12, weights=dict(A_S_N),
                       mixing={"speech_full": 0.5, "speech_text": 0.0, "text_only": 0.5})
    rec, _, _ = train_e2e(mixed, data, copy.deepcopy(asr), copy.deepcopy(nlu))
    assert any(r["t2i"] is not None for r in rec.losses)
    for r in rec.losses:
        text = r["stream"] == "text_only"
        assert (r["t2i"] is not None) == text and (r["s2i"] is not None) == (not text)


def test_e2e_is_reproducible(tiny_pair):
    cfg, data, asr, nlu = tiny_pair
    e = with_train(cfg, regime="e2e_multitask", steps=6,
                   mixing={"speech_full": 0.4, "speech_text": 0.3, "text_only": 0.3})
    r1 = train_e2e(e, data, copy.deepcopy(asr), copy.deepcopy(nlu))[0]
    r2 = train_e2e(e, data, copy.deepcopy(asr), copy.deepcopy(nlu))[0]
    assert r1.losses == r2.losses and r1.metrics == r2.metrics


def test_greedy_decode_mode_trains(tiny_pair):
    cfg, data, asr, nlu = tiny_pair
    e = with_train(cfg, regime="e2e", steps=2, e2e_decode_mode="greedy")
    rec, _, _ = train_e2e(e, data, copy.deepcopy(asr), copy.deepcopy(nlu))
    assert all(np.isfinite(r["total"]) for r in rec.losses)


@pytest.mark.slow
def test_stream_mix_matches_ratios(tiny_pair):
    cfg, data, asr, nlu = tiny_pair
    ratios = {"speech_full": 0.5, "speech_text": 0.25, "text_only": 0.25}
    e = with_train(cfg, regime="e2e_multitask", steps=1000, batch_size=2, mixing=ratios, eval_interval=0)
    rec, _, _ = train_e2e(e, data, copy.deepcopy(asr), copy.deepcopy(nlu), eval_items=data.subset("dev")[:2])
    streams = [r["stream"] for r in rec.losses]
    for name, p in ratios.items():
        assert abs(streams.count(name) / len(streams) - p) < 0.03


def test_medians_over_seeds():
    runs = [{"seed": s, "x": {"ic": v, "wer": None}} for s, v in enumerate([0.1, 0.5, 0.3])]
    assert medians(runs) == {"x": {"ic": 0.3}}
