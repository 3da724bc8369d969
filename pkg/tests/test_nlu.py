import numpy as np
import pytest

from ctislu import autograd as ag
from ctislu.autograd import Tensor
from ctislu.config import ExperimentConfig, NluConfig
from ctislu.cti import SharedVocabularyError, continuous_interface, gold_interface
from ctislu.nlu import NluModel, mask_tokens, masked_accuracy, masked_lm_loss, mlm_pretrain
from ctislu.trainer import BatchStream, new_nlu
from ctislu.vocab import MASK, PAD

from conftest import quiet_build

V, C, K = 15, 4, 5


def tiny(seed=0):
    return NluModel(NluConfig(d=8, n_layers=1, heads=2, d_ff=16), V, C, K, seed=seed)


def ids_batch(seed=0, B=2, T=6):
    return np.random.default_rng(seed).integers(5, V, size=(B, T))


def test_one_hot_input_equals_text_forward_bitwise():
    m, ids = tiny(), ids_batch()
    lengths = [6, 4]
    a, b = m.forward(gold_interface(ids, V), lengths), m.forward_ids(ids, lengths)
    for x, y in ((a.intent_logits, b.intent_logits), (a.emissions, b.emissions),
                 (a.value_logits, b.value_logits), (a.pooled, b.pooled)):
        assert np.array_equal(x.data, y.data)


def test_output_shapes():
    out = tiny().forward(gold_interface(ids_batch(T=7), V))
    assert out.intent_logits.shape == (2, C)
    assert out.emissions.shape == (2, 7, K)
    assert out.value_logits.shape == (2, 7, V)
    single = tiny().forward(gold_interface(ids_batch(B=1)[0], V))
    assert single.emissions.shape == (1, 6, K)


def test_value_head_and_embedding_share_vocabulary():
    m = tiny()
    assert m.embed.shape[0] == V and m.value_head.weight.shape[1] == V


def test_width_mismatch_raises():
    with pytest.raises(SharedVocabularyError):
        tiny().forward(Tensor(np.ones((1, 3, V + 1)) / (V + 1)))


def test_intent_loss_gradient_wrt_embeddings():
    m = tiny()
    rng = np.random.default_rng(1)
    z = continuous_interface(Tensor(rng.normal(size=(2, 5, V))))
    intents = np.array([1, 3])
    rep = ag.grad_check(lambda: ag.cross_entropy(m.forward(z).intent_logits, intents),
                        {"embed": m.embed}, max_coords=40)
    assert rep.max_rel_err < 1e-4


def test_pool_weights_are_distributions():
    out = tiny().forward(gold_interface(ids_batch(), V), [6, 3])
    w = out.pool_weights
    assert np.all(w >= 0)
    assert np.allclose(w.sum(-1), 1.0, atol=1e-12)
    assert np.all(w[1, 4:] < 1e-12)          # padded positions get no weight


def test_padding_does_not_leak():
    m, ids = tiny(), ids_batch(B=1, T=4)
    short = m.forward_ids(ids, [4])
    padded = m.forward_ids(np.concatenate([ids, [[7, 9]]], axis=1), [4])
    assert np.allclose(short.intent_logits.data, padded.intent_logits.data, atol=1e-12)
    assert np.allclose(short.emissions.data, padded.emissions.data[:, :4], atol=1e-12)


def test_permutation_equivariance_without_positions():
    m = tiny()
    m.use_positions = False
    z = np.random.default_rng(2).dirichlet(np.ones(V), size=(1, 5))
    perm = np.array([3, 0, 4, 1, 2])
    a, b = m.forward(Tensor(z)), m.forward(Tensor(z[:, perm]))
    assert np.allclose(a.emissions.data[:, perm], b.emissions.data, atol=1e-12)
    assert np.allclose(a.value_logits.data[:, perm], b.value_logits.data, atol=1e-12)
    assert np.allclose(a.intent_logits.data, b.intent_logits.data, atol=1e-12)


def test_frozen_model_is_deterministic():
    m = tiny()
    z = continuous_interface(Tensor(np.random.default_rng(3).normal(size=(2, 4, V))))
    assert np.array_equal(m.forward(z).intent_logits.data, m.forward(z).intent_logits.data)


def test_mask_tokens_skips_specials_and_padding():
    ids = np.array([[5, 6, 2, 7], [8, 9, 0, 0]])
    masked, targets = mask_tokens(ids, np.array([4, 2]), 1.0, np.random.default_rng(0))
    assert masked.tolist() == [[MASK, MASK, 2, MASK], [MASK, MASK, 0, 0]]
    assert targets.tolist() == [[5, 6, PAD, 7], [8, 9, PAD, PAD]]


def test_no_masked_positions_give_zero_loss():
    loss, _, targets = masked_lm_loss(tiny(), ids_batch(), np.array([6, 6]), 0.0, np.random.default_rng(0))
    assert np.all(targets == PAD) and loss.item() == 0.0


def test_mlm_rejects_mask_prob_outside_open_interval():
    for p in (0.0, 1.0):
        with pytest.raises(ValueError):
            mlm_pretrain(tiny(), lambda s: (ids_batch(), np.array([6, 6])), p, 1, 0)


@pytest.mark.slow
def test_mlm_pretraining_on_default_corpus():
    cfg = ExperimentConfig(seed=0)
    data = quiet_build(cfg)
    nlu = new_nlu(cfg, data)
    stream = BatchStream(data.subset("train"), 32, np.random.default_rng(0))

    def batches(_):
        b = stream.next()
        return b.ids, b.lengths

    curve = mlm_pretrain(nlu, batches, 0.15, 500, seed=1)
    assert np.mean(curve[-20:]) <= 0.6 * curve[0]
    held = [it for it in data.subset("dev")]
    ids = np.zeros((len(held), max(len(it.ids) for it in held)), dtype=np.int64)
    for i, it in enumerate(held):
        ids[i, :len(it.ids)] = it.ids
    acc = masked_accuracy(nlu, ids, np.array([len(it.ids) for it in held]), 0.15, seed=7)
    assert acc > 1.0 / len(data.vocab)
