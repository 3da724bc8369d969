"""WER, intent accuracy and slot F1 (exact span, bag-of-words, bag-of-characters)."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple


class UndefinedMetricError(ValueError):
    pass


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class SlotPrediction:
    slot_type: str
    value: str
    start: int = 0
    end: int = 0


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def _tokens(x):
    return x.split() if isinstance(x, str) else list(x)


def wer(ref, hyp) -> float:
    """(S + D + I) / len(ref); may exceed 1."""
    ref, hyp = _tokens(ref), _tokens(hyp)
    if not ref:
        raise UndefinedMetricError("WER is undefined for an empty reference")
    return edit_distance(ref, hyp) / len(ref)


def corpus_wer(refs: Sequence, hyps: Sequence) -> float:
    refs = [_tokens(r) for r in refs]
    hyps = [_tokens(h) for h in hyps]
    n = sum(len(r) for r in refs)
    if n == 0:
        raise UndefinedMetricError("WER is undefined for an empty reference")
    return float(sum(edit_distance(r, h) for r, h in zip(refs, hyps)) / n)


def ic_accuracy(gold: Sequence, pred: Sequence) -> float:
    if len(gold) != len(pred):
        raise EvaluationError(f"{len(gold)} gold intents vs {len(pred)} predictions")
    if not gold:
        raise EvaluationError("no examples to score")
    return sum(g == p for g, p in zip(gold, pred)) / len(gold)


def normalize_value(text: str) -> str:
    return " ".join(text.lower().split())


def _bag_f1(gold: Counter, pred: Counter) -> float:
    overlap = sum((gold & pred).values())
    if overlap == 0:
        return 0.0
    p = overlap / sum(pred.values())
    r = overlap / sum(gold.values())
    return 2 * p * r / (p + r)


def pair_credit(gold_value: str, pred_value: str, variant: str) -> float:
    g, p = normalize_value(gold_value), normalize_value(pred_value)
    if variant == "span":
        return float(g == p)
    if variant == "word":
        return _bag_f1(Counter(g.split()), Counter(p.split()))
    if variant == "char":
        return _bag_f1(Counter(g.replace(" ", "")), Counter(p.replace(" ", "")))
    raise ValueError(f"unknown slot F1 variant {variant!r}")


def _as_pred(s) -> SlotPrediction:
    if isinstance(s, SlotPrediction):
        return s
    if hasattr(s, "slot_type"):
        return SlotPrediction(s.slot_type, s.value, getattr(s, "start_token", 0), getattr(s, "end_token", 0))
    return SlotPrediction(*s)


def match_slots(gold: Sequence, pred: Sequence, variant: str) -> Tuple[float, int, int]:
    """Greedy one-to-one matching for one utterance -> (credit, n_pred, n_gold).

    Predictions are visited by span start; each takes the unused gold slot of the
    same type with the highest credit (first wins ties).
    """
    gold = [_as_pred(s) for s in gold]
    pred = sorted((_as_pred(s) for s in pred), key=lambda s: (s.start, s.end))
    used = [False] * len(gold)
    credit = 0.0
    for p in pred:
        best, best_j = (0.0, False), -1
        for j, g in enumerate(gold):
            if used[j] or g.slot_type != p.slot_type:
                continue
            # exact matches win ties so partial variants never undercut the span variant
            key = (pair_credit(g.value, p.value, variant),
                   normalize_value(g.value) == normalize_value(p.value))
            if key[0] > 0 and key > best:
                best, best_j = key, j
        if best_j >= 0:
            used[best_j] = True
            credit += best[0]
    return credit, len(pred), len(gold)


def slot_f1(gold: Sequence[Sequence], pred: Sequence[Sequence], variant: str = "span") -> Tuple[float, float, float]:
    """Micro-averaged (precision, recall, f1) over utterances.

    ``gold`` and ``pred`` are per-utterance slot lists. Empty gold and empty
    predictions score 1.0.
    """
    tp = n_pred = n_gold = 0.0
    for g, p in zip(gold, pred):
        c, np_, ng = match_slots(g, p, variant)
        tp += c
        n_pred += np_
        n_gold += ng
    if n_pred == 0 and n_gold == 0:
        return 1.0, 1.0, 1.0
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


@dataclass
class MetricsReport:
    n_examples: int
    ic_accuracy: float
    span_f1: float
    word_f1: float
    char_f1: float
    slu_f1: float
    wer: Optional[float] = None
    confusion: Dict[str, Dict[str, int]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def build_report(gold_intents: List[str], pred_intents: List[str], gold_slots: List[list],
                 pred_slots: List[list], refs: Optional[List] = None,
                 hyps: Optional[List] = None) -> MetricsReport:
    f1s = {v: slot_f1(gold_slots, pred_slots, v)[2] for v in ("span", "word", "char")}
    confusion: Dict[str, Dict[str, int]] = {}
    for g, p in zip(gold_intents, pred_intents):
        row = confusion.setdefault(str(g), {})
        row[str(p)] = row.get(str(p), 0) + 1
    return MetricsReport(
        n_examples=len(gold_intents),
        ic_accuracy=ic_accuracy(gold_intents, pred_intents),
        span_f1=f1s["span"], word_f1=f1s["word"], char_f1=f1s["char"],
        slu_f1=(f1s["span"] + f1s["word"] + f1s["char"]) / 3,
        wer=corpus_wer(refs, hyps) if refs is not None else None,
        confusion=confusion)
