"""Training regimes: ASR pretraining, NLU pretraining, end-to-end and multi-task fine-tuning,
plus inference-time composition of separately trained networks.
"""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autograd as ag
from .asr import AsrModel
from .batching import Batch, EncodedExample, LabelSpace, encode_corpus, make_batch
from .config import STREAMS, ExperimentConfig, derive_seed
from .crf import viterbi_decode
from .cti import (CONTINUOUS, DISCRETE, SharedVocabularyError, continuous_interface,
                  discrete_interface, dump_topk)
from .iob import tags_to_spans
from .losses import asr_loss, nlu_loss, slu_loss, total_loss
from .metrics import MetricsReport, SlotPrediction, build_report
from .nlu import NluModel, mlm_pretrain
from .synth import (GrammarConfig, UtteranceExample, generate_corpus, split, synthesize_features,
                    with_noise)
from .vocab import PAD, Vocabulary

log = logging.getLogger(__name__)


class StreamError(ValueError):
    """The corpus lacks the supervision a regime needs."""


# ---------------------------------------------------------------------------- data

@dataclass
class SluData:
    vocab: Vocabulary
    labels: LabelSpace
    splits: Dict[str, List[UtteranceExample]]
    encoded: Dict[str, List[EncodedExample]]

    def subset(self, name: str) -> List[EncodedExample]:
        return self.encoded[name]


def build_data(cfg: ExperimentConfig, grammar: Optional[GrammarConfig] = None,
               corpus: Optional[Sequence[UtteranceExample]] = None,
               vocab: Optional[Vocabulary] = None) -> SluData:
    grammar = grammar or GrammarConfig(noise_level=cfg.data.noise_level)
    if corpus is None:
        corpus = generate_corpus(grammar, cfg.data.n_examples, derive_seed(cfg.seed, "data"))
    splits = split(corpus, cfg.data.split_ratios, derive_seed(cfg.seed, "split"))
    return data_from_splits(cfg, splits, grammar, vocab)


def data_from_splits(cfg: ExperimentConfig, splits: Dict[str, List[UtteranceExample]],
                     grammar: Optional[GrammarConfig] = None,
                     vocab: Optional[Vocabulary] = None,
                     labels: Optional[LabelSpace] = None) -> SluData:
    if vocab is None:
        vocab = Vocabulary.build([ex.transcript for ex in splits["train"] if ex.transcript is not None],
                                 cfg.data.min_count)
    if labels is None:
        grammar = grammar or GrammarConfig()
        labels = LabelSpace(grammar.intent_names, grammar.slot_names)
    encoded = {name: encode_corpus(part, vocab, labels, cfg.data) for name, part in splits.items()}
    return SluData(vocab, labels, splits, encoded)


def renoise(data: SluData, cfg: ExperimentConfig, name: str, noise_level: float) -> List[EncodedExample]:
    """Re-encode a split with a different acoustic noise level."""
    return encode_corpus(with_noise(data.splits[name], noise_level), data.vocab, data.labels, cfg.data)


# ---------------------------------------------------------------------------- models

def new_asr(cfg: ExperimentConfig, data: SluData) -> AsrModel:
    model = AsrModel(cfg.asr, len(data.vocab), cfg.data.d_feat, derive_seed(cfg.seed, "asr.init"))
    model._vocab_fp = data.vocab.fingerprint()
    return model


def new_nlu(cfg: ExperimentConfig, data: SluData) -> NluModel:
    model = NluModel(cfg.nlu, len(data.vocab), len(data.labels.intents), len(data.labels.tagset),
                     derive_seed(cfg.seed, "nlu.init"))
    model._vocab_fp = data.vocab.fingerprint()
    model._value_head_full = False
    return model


def check_shared_vocabulary(data: SluData, *models):
    fp = data.vocab.fingerprint()
    for m in models:
        got = getattr(m, "_vocab_fp", None)
        if got != fp:
            raise SharedVocabularyError(f"model vocabulary {got} does not match corpus vocabulary {fp}")
        if m.vocab_size != len(data.vocab):
            raise SharedVocabularyError(f"model vocabulary size {m.vocab_size} != {len(data.vocab)}")


def save_checkpoint(path, model, data: SluData, cfg: ExperimentConfig):
    meta = {"vocab_fingerprint": data.vocab.fingerprint(), "vocab": list(data.vocab.tokens),
            "labels": data.labels.to_dict(), "config": cfg.to_dict(),
            "value_head_full": bool(getattr(model, "_value_head_full", False))}
    ag.save_params(path, model.named_parameters(), extra=meta)


def load_asr(path, cfg: ExperimentConfig) -> AsrModel:
    doc = ag.load_params_json(path)
    meta = doc.pop("__meta__")
    mcfg = ExperimentConfig.from_dict(meta["config"])
    model = AsrModel(mcfg.asr, len(meta["vocab"]), mcfg.data.d_feat)
    ag.assign_params(model.named_parameters(), doc)
    model._vocab_fp = meta["vocab_fingerprint"]
    return model


def load_nlu(path, cfg: ExperimentConfig) -> NluModel:
    doc = ag.load_params_json(path)
    meta = doc.pop("__meta__")
    mcfg = ExperimentConfig.from_dict(meta["config"])
    labels = LabelSpace.from_dict(meta["labels"])
    model = NluModel(mcfg.nlu, len(meta["vocab"]), len(labels.intents), len(labels.tagset))
    ag.assign_params(model.named_parameters(), doc)
    model._vocab_fp = meta["vocab_fingerprint"]
    model._value_head_full = meta.get("value_head_full", False)
    return model


def _snapshot(params: Dict[str, ag.Tensor]) -> Dict[str, np.ndarray]:
    return {n: p.data.copy() for n, p in params.items()}


def _restore(params: Dict[str, ag.Tensor], snap: Dict[str, np.ndarray]):
    for n, p in params.items():
        p.data[...] = snap[n]


# ---------------------------------------------------------------------------- run bookkeeping

@dataclass
class RunRecord:
    config: dict
    losses: List[dict] = field(default_factory=list)
    metrics: List[dict] = field(default_factory=list)
    checkpoints: Dict[str, str] = field(default_factory=dict)
    grad_norms: List[dict] = field(default_factory=list)

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(self.config, indent=2, sort_keys=True))
        with open(out / "losses.jsonl", "w") as fh:
            for row in self.losses:
                fh.write(json.dumps(row) + "\n")
        with open(out / "metrics.jsonl", "w") as fh:
            for row in self.metrics:
                fh.write(json.dumps(row) + "\n")

    @property
    def final_metrics(self) -> dict:
        return self.metrics[-1] if self.metrics else {}


class BatchStream:
    """Epoch-wise shuffled batches over one list of examples.

    With ``data_cfg`` given, every revisit of an utterance after its first
    draws a new acoustic seed, so the network never sees the same noise twice.
    """

    def __init__(self, items: Sequence[EncodedExample], batch_size: int, rng: np.random.Generator,
                 data_cfg=None, vocab_size: Optional[int] = None):
        if not items:
            raise StreamError("empty stream")
        self.items = list(items)
        self.batch_size = min(batch_size, len(self.items))
        self.rng = rng
        self.data_cfg = data_cfg
        self.vocab_size = vocab_size
        self._order: List[int] = []
        self._draws = np.zeros(len(self.items), dtype=np.int64)

    def _item(self, i: int) -> EncodedExample:
        it = self.items[i]
        n = int(self._draws[i])
        self._draws[i] += 1
        if n == 0 or self.data_cfg is None or it.features is None:
            return it
        ex = it.example
        noise = self.data_cfg.noise_level if ex.noise_level is None else ex.noise_level
        seed = derive_seed(ex.acoustic_seed, f"recording{n}")
        feats = synthesize_features(it.ids, self.vocab_size, seed, noise, self.data_cfg.k,
                                    self.data_cfg.d_feat, self.data_cfg.codebook_seed,
                                    self.data_cfg.prototype_scale)
        return EncodedExample(ex, it.ids, it.tags, it.intent, feats)

    def next(self) -> Batch:
        if len(self._order) < self.batch_size:
            self._order += [int(i) for i in self.rng.permutation(len(self.items))]
        idx, self._order = self._order[:self.batch_size], self._order[self.batch_size:]
        return make_batch([self._item(i) for i in idx])


def _stream(items, cfg: ExperimentConfig, data: "SluData", rng) -> BatchStream:
    if cfg.data.resample_train_noise:
        return BatchStream(items, cfg.train.batch_size, rng, cfg.data, len(data.vocab))
    return BatchStream(items, cfg.train.batch_size, rng)


def _eval_slice(items, cfg: ExperimentConfig):
    return list(items)[: cfg.train.eval_max_examples]


def _eval_steps(cfg: ExperimentConfig) -> set:
    n, every = cfg.train.steps, cfg.train.eval_interval
    steps = set(range(every, n + 1, every)) if every > 0 else set()
    steps.add(n)
    return steps


# ---------------------------------------------------------------------------- ASR

def asr_step_loss(asr: AsrModel, batch: Batch, train: bool = True, rng=None) -> ag.Tensor:
    enc = asr.encode(batch.features, batch.frame_mask, train=train, rng=rng)
    logits = asr.decode_teacher_forced(enc, batch.ids, batch.frame_mask, train=train, rng=rng)
    return asr_loss(logits, batch.ids, batch.lengths)


def evaluate_asr(asr: AsrModel, items: Sequence[EncodedExample], vocab: Vocabulary,
                 batch_size: int = 64) -> float:
    from .metrics import corpus_wer
    refs, hyps = [], []
    for i in range(0, len(items), batch_size):
        b = make_batch(items[i:i + batch_size])
        for it, res in zip(b.examples, asr.transcribe(b.features, b.frame_mask)):
            refs.append(list(it.ids))
            hyps.append(res.ids)
    return corpus_wer(refs, hyps)


def pretrain_asr(cfg: ExperimentConfig, data: SluData, asr: Optional[AsrModel] = None,
                 out_dir=None):
    """ASR-only training on (speech, transcript) pairs; dev WER tracked, best kept."""
    cfg.validate()
    train = [it for it in data.subset("train") if it.features is not None and it.ids is not None]
    if not train:
        raise StreamError("ASR pretraining needs (speech, transcript) pairs")
    asr = asr or new_asr(cfg, data)
    rng = np.random.default_rng(derive_seed(cfg.seed, "asr_pretrain"))
    stream = _stream(train, cfg, data, rng)
    params = asr.named_parameters()
    state = ag.AdamState()
    record = RunRecord(cfg.to_dict())
    dev = _eval_slice(data.subset("dev"), cfg)
    best, best_snap = None, None
    eval_at = _eval_steps(cfg)
    for step in range(1, cfg.train.steps + 1):
        batch = stream.next()
        asr.zero_grad()
        loss = asr_step_loss(asr, batch, rng=rng)
        bundle = total_loss({"asr": loss}, cfg.train.weights)
        bundle.total.backward()
        ag.adam_step(params, state, cfg.train.optimizer, cfg.train.freeze)
        record.losses.append(bundle.as_log(step))
        if step in eval_at and dev:
            w = evaluate_asr(asr, dev, data.vocab)
            record.metrics.append({"step": step, "dev_wer": w})
            log.info("asr step %d loss %.4f dev WER %.4f", step, float(loss.data), w)
            if best is None or w < best:
                best, best_snap = w, _snapshot(params)
    if best_snap is not None:
        _restore(params, best_snap)
        record.metrics.append({"step": "best", "dev_wer": best})
    if out_dir is not None:
        _finish(record, out_dir, {"asr": asr}, data, cfg)
    return record, asr


# ---------------------------------------------------------------------------- NLU

def _text_batches(items, batch_size, rng):
    stream = BatchStream(items, batch_size, rng)

    def fn(_step):
        b = stream.next()
        return b.ids, b.lengths
    return fn


def pretrain_nlu(cfg: ExperimentConfig, data: SluData, nlu: Optional[NluModel] = None, out_dir=None):
    """MLM phase (``train.mlm_steps``) then masked-text NLU losses for ``train.steps``."""
    cfg.validate()
    train = [it for it in data.subset("train")
             if it.ids is not None and it.intent is not None and it.tags is not None]
    if not train:
        raise StreamError("NLU pretraining needs (transcript, intent, slots) triples")
    nlu = nlu or new_nlu(cfg, data)
    rng = np.random.default_rng(derive_seed(cfg.seed, "nlu_pretrain"))
    record = RunRecord(cfg.to_dict())
    if cfg.train.mlm_steps > 0:
        curve = mlm_pretrain(nlu, _text_batches(train, cfg.train.batch_size, rng), max(cfg.train.mask_prob, 1e-3),
                             cfg.train.mlm_steps, derive_seed(cfg.seed, "mlm"), cfg.train.optimizer)
        record.metrics.append({"step": 0, "mlm_first": curve[0], "mlm_last": curve[-1]})
    stream = BatchStream(train, cfg.train.batch_size, rng)
    params = nlu.named_parameters()
    state = ag.AdamState()
    which = tuple(n for n in ("t2i", "t2k", "t2v") if cfg.train.weight(n) > 0)
    dev = _eval_slice(data.subset("dev"), cfg)
    best, best_snap = None, None
    eval_at = _eval_steps(cfg)
    for step in range(1, cfg.train.steps + 1):
        b = stream.next()
        nlu.zero_grad()
        comps = nlu_loss(nlu, b.ids, b.lengths, b.intents, b.tags, cfg.train.mask_prob, rng, which=which)
        bundle = total_loss(comps, cfg.train.weights)
        bundle.total.backward()
        ag.adam_step(params, state, cfg.train.optimizer, cfg.train.freeze)
        record.losses.append(bundle.as_log(step))
        if step in eval_at and dev:
            rep = evaluate_nlu_text(nlu, dev, data)
            record.metrics.append({"step": step, "dev_ic": rep.ic_accuracy, "dev_span_f1": rep.span_f1,
                                   "dev_slu_f1": rep.slu_f1})
            log.info("nlu step %d loss %.4f dev IC %.4f", step, float(bundle.total.data), rep.ic_accuracy)
            key = (rep.ic_accuracy, rep.slu_f1)
            if best is None or key > best:
                best, best_snap = key, _snapshot(params)
    if best_snap is not None:
        _restore(params, best_snap)
        record.metrics.append({"step": "best", "dev_ic": best[0], "dev_slu_f1": best[1]})
    if out_dir is not None:
        _finish(record, out_dir, {"nlu": nlu}, data, cfg)
    return record, nlu


# ---------------------------------------------------------------------------- prediction

@dataclass
class Prediction:
    id: str
    intent: str
    slots: List[SlotPrediction]
    hypothesis: List[int]


def _decode_outputs(out, nlu: NluModel, hyps: List[List[int]], data: SluData,
                    value_source: str) -> List[tuple]:
    """Intent argmax plus Viterbi slot spans for each row of an NLU output batch."""
    res = []
    intents = out.intent_logits.data.argmax(-1)
    em = out.emissions.data
    vl = out.value_logits.data
    crf = (nlu.crf.transitions.data, nlu.crf.start.data, nlu.crf.end.data)
    for b, hyp in enumerate(hyps):
        slots = []
        T = len(hyp)
        if T:
            tags, _ = viterbi_decode(em[b, :T], *crf)
            values = vl[b, :T].argmax(-1) if value_source == "head" else np.asarray(hyp)
            for slot_type, s, e in tags_to_spans(tags, data.labels.tagset):
                slots.append(SlotPrediction(slot_type, data.vocab.decode(values[s:e]), s, e))
        res.append((data.labels.intents[int(intents[b])], slots))
    return res


VALUE_SOURCES = ("head", "hypothesis", "auto")


def _value_source(nlu: NluModel, value_source: str) -> str:
    """Where slot value text comes from.

    ``head`` decodes the slot-value head over the predicted span, ``hypothesis``
    copies the recognised tokens, and ``auto`` uses the head only when it was
    trained on every position (s2v) and the hypothesis otherwise.
    """
    if value_source not in VALUE_SOURCES:
        raise ValueError(f"value_source must be one of {VALUE_SOURCES}, got {value_source!r}")
    if value_source == "auto":
        return "head" if getattr(nlu, "_value_head_full", False) else "hypothesis"
    return value_source


def evaluate_nlu_text(nlu: NluModel, items: Sequence[EncodedExample], data: SluData,
                      batch_size: int = 64, value_source: str = "head",
                      predictions: Optional[list] = None) -> MetricsReport:
    """NLU on gold transcripts (the text-only baseline)."""
    vs = _value_source(nlu, value_source)
    gold_i, pred_i, gold_s, pred_s = [], [], [], []
    for i in range(0, len(items), batch_size):
        b = make_batch(items[i:i + batch_size])
        with ag.no_grad():
            out = nlu.forward_ids(b.ids, b.lengths)
        hyps = [list(it.ids) for it in b.examples]
        for it, (intent, slots) in zip(b.examples, _decode_outputs(out, nlu, hyps, data, vs)):
            gold_i.append(it.example.intent)
            pred_i.append(intent)
            gold_s.append(list(it.example.slots or []))
            pred_s.append(slots)
            if predictions is not None:
                predictions.append(Prediction(it.example.id, intent, slots, list(it.ids)))
    return build_report(gold_i, pred_i, gold_s, pred_s)


def compose_inference(asr: AsrModel, nlu: NluModel, interface_mode: str,
                      items: Sequence[EncodedExample], data: SluData, batch_size: int = 64,
                      temperature: float = 1.0, value_source: str = "head",
                      dump_path=None, predictions: Optional[list] = None) -> MetricsReport:
    """Greedy ASR -> interface -> NLU with no training; IC, slot F1 and WER."""
    if interface_mode not in (CONTINUOUS, DISCRETE):
        raise ValueError(f"interface_mode must be continuous or discrete, got {interface_mode!r}")
    check_shared_vocabulary(data, asr, nlu)
    vs = _value_source(nlu, value_source)
    V = len(data.vocab)
    gold_i, pred_i, gold_s, pred_s, refs, hyps_all = [], [], [], [], [], []
    for i in range(0, len(items), batch_size):
        b = make_batch(items[i:i + batch_size])
        with ag.no_grad():
            results = asr.transcribe(b.features, b.frame_mask)
            T = max(max(len(r.ids) for r in results), 1)
            z = np.zeros((len(results), T, V))
            z[:, :, PAD] = 1.0
            for j, r in enumerate(results):
                if not r.ids:
                    continue
                logits = ag.Tensor(r.logits)
                dist = (continuous_interface(logits, temperature) if interface_mode == CONTINUOUS
                        else discrete_interface(logits))
                assert not dist.z.requires_grad
                z[j, :len(r.ids)] = dist.z.data
                if dump_path is not None:
                    dump_topk(dump_path, dist, data.vocab, utterance_id=b.examples[j].example.id)
            lengths = np.array([len(r.ids) for r in results], dtype=np.int64)
            out = nlu.forward(ag.Tensor(z), lengths)
        hyps = [r.ids for r in results]
        for it, r, (intent, slots) in zip(b.examples, results, _decode_outputs(out, nlu, hyps, data, vs)):
            gold_i.append(it.example.intent)
            pred_i.append(intent)
            gold_s.append(list(it.example.slots or []))
            pred_s.append(slots)
            refs.append(list(it.ids))
            hyps_all.append(r.ids)
            if predictions is not None:
                predictions.append(Prediction(it.example.id, intent, slots, r.ids))
    return build_report(gold_i, pred_i, gold_s, pred_s, refs, hyps_all)


# ---------------------------------------------------------------------------- end to end

def _stream_items(data: SluData, name: str) -> List[EncodedExample]:
    train = data.subset("train")
    if name == "speech_full":
        return [it for it in train if it.features is not None and it.tags is not None and it.intent is not None]
    if name == "speech_text":
        return [it for it in train if it.features is not None and it.ids is not None]
    return [it for it in train if it.ids is not None and it.tags is not None and it.intent is not None]


def e2e_components(asr: AsrModel, nlu: NluModel, batch: Batch, stream: str, cfg: ExperimentConfig,
                   rng: np.random.Generator, train: bool = True) -> Dict[str, ag.Tensor]:
    """Loss components one batch of ``stream`` can supervise (zero-weight ones skipped)."""
    w = cfg.train.weight
    comps: Dict[str, ag.Tensor] = {}
    if stream == "text_only":
        which = tuple(n for n in ("t2i", "t2k", "t2v") if w(n) > 0)
        if which:
            comps.update(nlu_loss(nlu, batch.ids, batch.lengths, batch.intents, batch.tags,
                                  cfg.train.mask_prob, rng, train=train, which=which))
        return comps
    enc = asr.encode(batch.features, batch.frame_mask, train=train, rng=rng)
    logits = asr.decode_teacher_forced(enc, batch.ids, batch.frame_mask, train=train, rng=rng)
    if w("asr") > 0:
        comps["asr"] = asr_loss(logits, batch.ids, batch.lengths)
    if stream == "speech_text":
        return comps
    which = tuple(n for n in ("s2i", "s2k", "s2v") if w(n) > 0)
    if not which:
        return comps
    if cfg.train.e2e_decode_mode == "teacher_forced":
        T = batch.ids.shape[1]
        z = continuous_interface(logits[:, :T, :], cfg.train.temperature)
        out = nlu.forward(z, batch.lengths, train=train, rng=rng)
        comps.update(slu_loss(out, nlu, batch.ids, batch.lengths, batch.intents, batch.tags, which))
    else:
        comps.update(_greedy_slu(asr, nlu, enc, batch, cfg, rng, which, train))
    return comps


def _greedy_slu(asr, nlu, enc, batch, cfg, rng, which, train):
    """SLU losses on free-running hypotheses; s2k/s2v only where lengths match gold."""
    from .crf import batch_log_likelihood
    results = asr.decode_greedy(enc, batch.frame_mask)
    B = len(results)
    hyp_len = np.array([max(len(r.ids), 1) for r in results], dtype=np.int64)
    L = int(hyp_len.max())
    hyp = np.full((B, L), PAD, dtype=np.int64)
    for b, r in enumerate(results):
        hyp[b, :len(r.ids)] = r.ids
    logits = asr.decode_teacher_forced(enc, hyp, batch.frame_mask, train=train, rng=rng)
    z = continuous_interface(logits[:, :L, :], cfg.train.temperature)
    out = nlu.forward(z, hyp_len, train=train, rng=rng)
    comps = {}
    if "s2i" in which:
        comps["s2i"] = ag.cross_entropy(out.intent_logits, batch.intents)
    aligned = np.array([len(r.ids) == n for r, n in zip(results, batch.lengths)])
    if "s2k" in which:
        tags = np.zeros((B, L), dtype=np.int64)
        T = batch.tags.shape[1]
        tags[:, :min(L, T)] = batch.tags[:, :min(L, T)]
        ll = batch_log_likelihood(out.emissions, tags, hyp_len, nlu.crf)
        n = max(int(aligned.sum()), 1)
        comps["s2k"] = ag.mul(ag.sum_(ag.mul(ll, aligned.astype(float))), -1.0 / n)
    if "s2v" in which:
        targets = np.full((B, L), PAD, dtype=np.int64)
        for b in np.nonzero(aligned)[0]:
            targets[b, :batch.lengths[b]] = batch.ids[b, :batch.lengths[b]]
        V = out.value_logits.shape[-1]
        comps["s2v"] = ag.cross_entropy(ag.reshape(out.value_logits, (-1, V)), targets.reshape(-1), ignore_index=PAD)
    return comps


def train_e2e(cfg: ExperimentConfig, data: SluData, asr: AsrModel, nlu: NluModel,
              out_dir=None, eval_items: Optional[Sequence[EncodedExample]] = None):
    """Fine-tune ASR -> CTI -> NLU jointly on the weighted loss total.

    Regime ``e2e`` uses only fully annotated speech batches; ``e2e_multitask``
    draws each batch's stream from ``train.mixing``.
    """
    cfg.validate()
    check_shared_vocabulary(data, asr, nlu)
    mixing = ({"speech_full": 1.0} if cfg.train.regime == "e2e"
              else {k: v for k, v in cfg.train.mixing.items() if v > 0})
    rng = np.random.default_rng(derive_seed(cfg.seed, "e2e"))
    mix_rng = np.random.default_rng(derive_seed(cfg.seed, "e2e.mixing"))
    streams = {}
    for name in mixing:
        items = _stream_items(data, name)
        if not items:
            raise StreamError(f"no training examples for stream {name!r}")
        streams[name] = _stream(items, cfg, data, rng)
    names = [s for s in STREAMS if s in mixing]
    probs = np.array([mixing[s] for s in names])
    params = dict(asr.named_parameters())
    params.update(nlu.named_parameters())
    state = ag.AdamState()
    record = RunRecord(cfg.to_dict())
    dev = _eval_slice(eval_items if eval_items is not None else data.subset("dev"), cfg)
    if cfg.train.weight("s2v") > 0 and "speech_full" in names:
        nlu._value_head_full = True
    best, best_snap = None, None
    eval_at = _eval_steps(cfg)
    for step in range(1, cfg.train.steps + 1):
        stream = names[int(mix_rng.choice(len(names), p=probs))]
        batch = streams[stream].next()
        asr.zero_grad()
        nlu.zero_grad()
        comps = e2e_components(asr, nlu, batch, stream, cfg, rng)
        if not comps:
            record.losses.append({"step": step, "stream": stream, "skipped": True})
            continue
        bundle = total_loss(comps, cfg.train.weights)
        bundle.total.backward()
        enc_norm = _grad_norm(params, "asr.enc_layers")
        ag.adam_step(params, state, cfg.train.optimizer, cfg.train.freeze)
        row = bundle.as_log(step)
        row["stream"] = stream
        record.losses.append(row)
        record.grad_norms.append({"step": step, "asr_encoder": enc_norm})
        if step in eval_at and dev:
            rep = compose_inference(asr, nlu, CONTINUOUS, dev, data, temperature=cfg.train.temperature)
            record.metrics.append({"step": step, "dev_ic": rep.ic_accuracy, "dev_span_f1": rep.span_f1,
                                   "dev_slu_f1": rep.slu_f1, "dev_wer": rep.wer})
            log.info("e2e step %d loss %.4f dev IC %.4f", step, float(bundle.total.data), rep.ic_accuracy)
            key = (rep.ic_accuracy, rep.slu_f1)
            if best is None or key > best:
                best, best_snap = key, _snapshot(params)
    if best_snap is not None:
        _restore(params, best_snap)
        record.metrics.append({"step": "best", "dev_ic": best[0], "dev_slu_f1": best[1]})
    if out_dir is not None:
        _finish(record, out_dir, {"asr": asr, "nlu": nlu}, data, cfg)
    return record, asr, nlu


def _grad_norm(params, prefix: str) -> float:
    return float(np.sqrt(sum(float((p.grad ** 2).sum()) for n, p in params.items()
                             if prefix in n and p.grad is not None)))


def _finish(record: RunRecord, out_dir, models: dict, data: SluData, cfg: ExperimentConfig):
    out = Path(out_dir)
    ck = out / "checkpoints"
    ck.mkdir(parents=True, exist_ok=True)
    for name, model in models.items():
        path = ck / f"{name}.json"
        save_checkpoint(path, model, data, cfg)
        record.checkpoints[name] = str(path)
    record.write(out)


def with_train(cfg: ExperimentConfig, **overrides) -> ExperimentConfig:
    """Copy of ``cfg`` with fields of ``cfg.train`` replaced."""
    new = copy.deepcopy(cfg)
    for k, v in overrides.items():
        if not hasattr(new.train, k):
            raise AttributeError(k)
        setattr(new.train, k, v)
    return new.validate()
