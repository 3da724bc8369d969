"""scikit-learn style wrappers around the training regimes.

Inputs are sequences of :class:`~ctislu.synth.UtteranceExample`. Speech is
simulated from each example's transcript and acoustic seed, so ``predict``
needs those two fields but never reads labels.
"""
from __future__ import annotations

from typing import List, Sequence

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .batching import LabelSpace, encode_corpus, make_batch
from .config import AsrConfig, ExperimentConfig, NluConfig
from .cti import CONTINUOUS, DISCRETE
from .experiments import A_S, A_S_N, A_S_NO_S2V
from .metrics import corpus_wer, ic_accuracy
from .synth import UtteranceExample, speech_text_view
from .trainer import (Prediction, compose_inference, data_from_splits, evaluate_nlu_text,
                      pretrain_asr, pretrain_nlu, train_e2e, with_train)


def check_examples(X, require: Sequence[str] = ()) -> List[UtteranceExample]:
    """Validate a non-empty sequence of examples carrying the ``require``d fields.

    ``require`` may name ``speech``, ``transcript`` and ``labels``.
    """
    if isinstance(X, (str, bytes)) or not hasattr(X, "__iter__"):
        raise TypeError(f"expected a sequence of UtteranceExample, got {type(X).__name__}")
    X = list(X)
    if not X:
        raise ValueError("at least one example is required")
    for i, ex in enumerate(X):
        if not isinstance(ex, UtteranceExample):
            raise TypeError(f"item {i} is {type(ex).__name__}, not UtteranceExample")
        if "speech" in require and not ex.has_speech:
            raise ValueError(f"example {ex.id!r} has no speech")
        if "transcript" in require and ex.transcript is None:
            raise ValueError(f"example {ex.id!r} has no transcript")
        if "labels" in require and not ex.has_labels:
            raise ValueError(f"example {ex.id!r} has no intent/slot labels")
    return X


def labels_from(X: Sequence[UtteranceExample]) -> LabelSpace:
    intents = sorted({ex.intent for ex in X if ex.intent is not None})
    slots = sorted({s.slot_type for ex in X if ex.slots for s in ex.slots})
    return LabelSpace(intents, slots)


class _SluEstimator(BaseEstimator):
    """Shared config assembly; subclasses define the hyperparameters."""

    def _config(self) -> ExperimentConfig:
        cfg = ExperimentConfig(seed=self.seed)
        cfg.data.noise_level = getattr(self, "noise_level", 0.0)
        cfg.train.batch_size = self.batch_size
        cfg.train.optimizer.lr = self.lr
        if hasattr(self, "asr_d"):
            cfg.asr = AsrConfig(d=self.asr_d, n_enc=self.asr_layers, n_dec=self.asr_layers,
                                heads=self.heads, d_ff=2 * self.asr_d)
        if hasattr(self, "nlu_d"):
            cfg.nlu = NluConfig(d=self.nlu_d, n_layers=self.nlu_layers, heads=self.heads,
                                d_ff=2 * self.nlu_d)
        return cfg.validate()

    def _data(self, cfg, X):
        return data_from_splits(cfg, {"train": X, "dev": []}, labels=labels_from(X))

    def _encode(self, X):
        return encode_corpus([speech_text_view(ex) for ex in X], self.data_.vocab,
                             self.data_.labels, self.config_.data)


class AsrRecognizer(_SluEstimator):
    """Encoder-decoder recogniser; ``predict`` returns transcripts."""

    def __init__(self, asr_d=64, asr_layers=2, heads=4, steps=600, batch_size=32, lr=1e-3,
                 noise_level=0.3, seed=0):
        self.asr_d = asr_d
        self.asr_layers = asr_layers
        self.heads = heads
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.noise_level = noise_level
        self.seed = seed

    def fit(self, X, y=None):
        X = check_examples(X, ("speech", "transcript"))
        cfg = self._config()
        self.config_ = with_train(cfg, regime="asr_pretrain", steps=self.steps)
        self.data_ = self._data(self.config_, X)
        self.record_, self.model_ = pretrain_asr(self.config_, self.data_)
        return self

    def predict(self, X) -> List[str]:
        check_is_fitted(self, "model_")
        X = check_examples(X, ("speech", "transcript"))
        items = self._encode(X)
        out = []
        for i in range(0, len(items), 64):
            b = make_batch(items[i:i + 64])
            out += [self.data_.vocab.decode(r.ids) for r in self.model_.transcribe(b.features, b.frame_mask)]
        return out

    def score(self, X, y=None) -> float:
        """1 - corpus WER."""
        X = check_examples(X, ("speech", "transcript"))
        return 1.0 - corpus_wer([ex.transcript for ex in X], self.predict(X))


class NluParser(_SluEstimator):
    """Text NLU; ``predict`` maps transcripts to (intent, slots) pairs."""

    def __init__(self, nlu_d=64, nlu_layers=2, heads=4, steps=400, mlm_steps=200, batch_size=32,
                 lr=1e-3, mask_prob=0.15, seed=0):
        self.nlu_d = nlu_d
        self.nlu_layers = nlu_layers
        self.heads = heads
        self.steps = steps
        self.mlm_steps = mlm_steps
        self.batch_size = batch_size
        self.lr = lr
        self.mask_prob = mask_prob
        self.seed = seed

    def fit(self, X, y=None):
        X = check_examples(X, ("transcript", "labels"))
        cfg = self._config()
        self.config_ = with_train(cfg, regime="nlu_pretrain", steps=self.steps, mlm_steps=self.mlm_steps,
                                  mask_prob=self.mask_prob)
        self.data_ = self._data(self.config_, X)
        self.record_, self.model_ = pretrain_nlu(self.config_, self.data_)
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_examples(X, ("transcript",))
        items = encode_corpus([UtteranceExample(ex.id, ex.transcript) for ex in X], self.data_.vocab,
                              self.data_.labels, self.config_.data)
        preds: list = []
        evaluate_nlu_text(self.model_, items, self.data_, predictions=preds)
        return [(p.intent, p.slots) for p in preds]

    def score(self, X, y=None) -> float:
        """Intent accuracy."""
        X = check_examples(X, ("transcript", "labels"))
        return ic_accuracy([ex.intent for ex in X], [p[0] for p in self.predict(X)])


class SluPipeline(_SluEstimator):
    """ASR and NLU pretrained separately, optionally fine-tuned end to end.

    ``e2e_steps=0`` gives the composed baseline; ``interface`` picks how the
    two networks are joined at prediction time.
    """

    def __init__(self, interface=CONTINUOUS, asr_d=64, asr_layers=2, nlu_d=64, nlu_layers=2, heads=4,
                 asr_steps=600, nlu_steps=400, mlm_steps=200, e2e_steps=0, s2v=True, text_mix=0.0,
                 batch_size=32, lr=1e-3, noise_level=0.3, seed=0):
        self.interface = interface
        self.asr_d = asr_d
        self.asr_layers = asr_layers
        self.nlu_d = nlu_d
        self.nlu_layers = nlu_layers
        self.heads = heads
        self.asr_steps = asr_steps
        self.nlu_steps = nlu_steps
        self.mlm_steps = mlm_steps
        self.e2e_steps = e2e_steps
        self.s2v = s2v
        self.text_mix = text_mix
        self.batch_size = batch_size
        self.lr = lr
        self.noise_level = noise_level
        self.seed = seed

    def fit(self, X, y=None):
        if self.interface not in (CONTINUOUS, DISCRETE):
            raise ValueError(f"interface must be {CONTINUOUS!r} or {DISCRETE!r}")
        if not 0.0 <= self.text_mix < 1.0:
            raise ValueError("text_mix must be in [0, 1)")
        X = check_examples(X, ("speech", "transcript", "labels"))
        cfg = self._config()
        self.config_ = cfg
        self.data_ = self._data(cfg, X)
        _, asr = pretrain_asr(with_train(cfg, regime="asr_pretrain", steps=self.asr_steps), self.data_)
        _, nlu = pretrain_nlu(with_train(cfg, regime="nlu_pretrain", steps=self.nlu_steps,
                                         mlm_steps=self.mlm_steps), self.data_)
        if self.e2e_steps > 0:
            if self.text_mix > 0:
                w = dict(A_S_N if self.s2v else {**A_S_N, "s2v": 0.0})
                e = with_train(cfg, regime="e2e_multitask", steps=self.e2e_steps, weights=w,
                               mixing={"speech_full": 1.0 - self.text_mix, "speech_text": 0.0,
                                       "text_only": self.text_mix})
            else:
                e = with_train(cfg, regime="e2e", steps=self.e2e_steps,
                               weights=dict(A_S if self.s2v else A_S_NO_S2V))
            train_e2e(e, self.data_, asr, nlu)
        self.asr_, self.nlu_ = asr, nlu
        return self

    def predict(self, X):
        check_is_fitted(self, "nlu_")
        X = check_examples(X, ("speech", "transcript"))
        preds: List[Prediction] = []
        compose_inference(self.asr_, self.nlu_, self.interface, self._encode(X), self.data_,
                          predictions=preds)
        return [(p.intent, p.slots) for p in preds]

    def score(self, X, y=None) -> float:
        """Intent accuracy."""
        X = check_examples(X, ("speech", "transcript", "labels"))
        return ic_accuracy([ex.intent for ex in X], [p[0] for p in self.predict(X)])
