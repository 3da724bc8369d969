"""Command-line entry point.

Exit status: 0 success, 1 usage or validation error, 2 runtime failure
(including a failed gradient or oracle check). Every command prints one
summary line on stdout; progress goes to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .config import ExperimentConfig
from .cti import CONTINUOUS, DISCRETE, SharedVocabularyError
from .vocab import ConfigurationError

log = logging.getLogger("ctislu")

COMMANDS = ("gen-data", "train-asr", "train-nlu", "train-e2e", "compose-eval", "eval", "gradcheck",
            "oracle-check")


class UsageError(Exception):
    pass


class CheckFailed(Exception):
    def __init__(self, summary: str):
        super().__init__(summary)
        self.summary = summary


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ctislu", description="Differentiable ASR -> NLU pipeline experiments")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def common(sp, out_required=True):
        sp.add_argument("--config", type=Path, help="experiment config JSON")
        sp.add_argument("--out", type=Path, required=out_required, help="output directory")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, repeatable")
        sp.add_argument("--seed", type=int, help="top-level seed (overrides config)")

    def checkpoints(sp, required=False):
        sp.add_argument("--asr", type=Path, required=required, help="ASR checkpoint JSON")
        sp.add_argument("--nlu", type=Path, required=required, help="NLU checkpoint JSON")

    common(sub.add_parser("gen-data", help="write train/dev/test JSONL and vocab.json"))
    for name in ("train-asr", "train-nlu"):
        common(sub.add_parser(name, help=f"{name.split('-')[1].upper()} pretraining"))
    sp = sub.add_parser("train-e2e", help="end-to-end or multi-task fine-tuning")
    common(sp)
    checkpoints(sp)
    sp = sub.add_parser("compose-eval", help="compose pretrained networks at inference")
    common(sp)
    checkpoints(sp, required=True)
    sp.add_argument("--interface", choices=(DISCRETE, CONTINUOUS), help="default: both")
    sp.add_argument("--split", default="dev", choices=("dev", "test"))
    sp.add_argument("--dump-z", type=Path, help="append top-5 token distributions as JSONL")
    sp = sub.add_parser("eval", help="test-split metrics of a checkpoint pair")
    common(sp)
    checkpoints(sp, required=True)
    sp = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    common(sp, out_required=False)
    sp.add_argument("--target", default="all", help="op name, 'full', or 'all'")
    sp.add_argument("--trials", type=int, default=100)
    sp = sub.add_parser("oracle-check", help="CRF enumeration and interface oracles")
    common(sp, out_required=False)
    sp.add_argument("--instances", type=int, default=1000)
    return p


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.overrides:
        cfg = cfg.with_overrides(args.overrides)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg.validate()


def _data(cfg):
    from .trainer import build_data
    return build_data(cfg)


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------- commands

def cmd_gen_data(args, cfg) -> str:
    from .synth import GrammarConfig, save_grammar, save_jsonl
    data = _data(cfg)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    for name, part in data.splits.items():
        save_jsonl(out / f"{name}.jsonl", part)
    data.vocab.save(out / "vocab.json")
    save_grammar(out / "grammar.json", GrammarConfig(noise_level=cfg.data.noise_level))
    cfg.save(out / "config.json")
    sizes = ", ".join(f"{k} {len(v)}" for k, v in data.splits.items())
    return f"gen-data: {sizes}; vocabulary {len(data.vocab)} -> {out}"


def cmd_train_asr(args, cfg) -> str:
    from .trainer import pretrain_asr, with_train
    cfg = with_train(cfg, regime="asr_pretrain")
    rec, _ = pretrain_asr(cfg, _data(cfg), out_dir=args.out)
    wer = rec.final_metrics.get("dev_wer")
    return f"train-asr: {cfg.train.steps} steps, dev WER {wer:.4f} -> {args.out}"


def cmd_train_nlu(args, cfg) -> str:
    from .trainer import pretrain_nlu, with_train
    cfg = with_train(cfg, regime="nlu_pretrain")
    rec, _ = pretrain_nlu(cfg, _data(cfg), out_dir=args.out)
    m = rec.final_metrics
    return (f"train-nlu: {cfg.train.steps} steps, dev IC {m.get('dev_ic', float('nan')):.4f} "
            f"SLU-F1 {m.get('dev_slu_f1', float('nan')):.4f} -> {args.out}")


def _models(args, cfg, data):
    from .trainer import load_asr, load_nlu, pretrain_asr, pretrain_nlu, with_train
    if args.asr is not None:
        asr = load_asr(args.asr, cfg)
    else:
        log.info("no --asr checkpoint; pretraining one")
        _, asr = pretrain_asr(with_train(cfg, regime="asr_pretrain"), data, out_dir=args.out / "asr")
    if args.nlu is not None:
        nlu = load_nlu(args.nlu, cfg)
    else:
        log.info("no --nlu checkpoint; pretraining one")
        _, nlu = pretrain_nlu(with_train(cfg, regime="nlu_pretrain"), data, out_dir=args.out / "nlu")
    return asr, nlu


def cmd_train_e2e(args, cfg) -> str:
    from .trainer import train_e2e, with_train
    if cfg.train.regime not in ("e2e", "e2e_multitask"):
        cfg = with_train(cfg, regime="e2e")
    data = _data(cfg)
    asr, nlu = _models(args, cfg, data)
    rec, _, _ = train_e2e(cfg, data, asr, nlu, out_dir=args.out)
    m = rec.final_metrics
    return (f"train-e2e: {cfg.train.regime} {cfg.train.steps} steps, dev IC {m.get('dev_ic', float('nan')):.4f} "
            f"SLU-F1 {m.get('dev_slu_f1', float('nan')):.4f} -> {args.out}")


def cmd_compose_eval(args, cfg) -> str:
    from .trainer import compose_inference, load_asr, load_nlu
    data = _data(cfg)
    asr, nlu = load_asr(args.asr, cfg), load_nlu(args.nlu, cfg)
    modes = [args.interface] if args.interface else [DISCRETE, CONTINUOUS]
    args.out.mkdir(parents=True, exist_ok=True)
    if args.dump_z is not None:
        args.dump_z.parent.mkdir(parents=True, exist_ok=True)
    parts = []
    for mode in modes:
        rep = compose_inference(asr, nlu, mode, data.subset(args.split), data,
                                temperature=cfg.train.temperature, dump_path=args.dump_z)
        _write_json(args.out / f"metrics_{mode}.json", rep.to_dict())
        parts.append(f"{mode} IC {rep.ic_accuracy:.4f} SLU-F1 {rep.slu_f1:.4f}")
    return f"compose-eval ({args.split}): " + "; ".join(parts) + f"; WER {rep.wer:.4f}"


def cmd_eval(args, cfg) -> str:
    from .trainer import compose_inference, evaluate_nlu_text, load_asr, load_nlu
    data = _data(cfg)
    asr, nlu = load_asr(args.asr, cfg), load_nlu(args.nlu, cfg)
    test = data.subset("test")
    rep = compose_inference(asr, nlu, CONTINUOUS, test, data, temperature=cfg.train.temperature)
    text = evaluate_nlu_text(nlu, test, data)
    _write_json(args.out / "metrics.json", {"speech": rep.to_dict(), "gold_text": text.to_dict()})
    return (f"eval (test): IC {rep.ic_accuracy:.4f} SLU-F1 {rep.slu_f1:.4f} WER {rep.wer:.4f}; "
            f"gold-text IC {text.ic_accuracy:.4f}")


def cmd_gradcheck(args, cfg) -> str:
    from . import gradsuite
    if args.target not in ("all", "full") and args.target not in gradsuite.OP_CASES:
        raise UsageError(f"unknown --target {args.target!r}; choose from "
                         f"{', '.join(sorted(gradsuite.OP_CASES))}, full, all")
    res = gradsuite.run(args.target, trials=args.trials, seed=cfg.seed)
    if args.out is not None:
        _write_json(args.out / "gradcheck.json", res)
    bad = [r["name"] for r in res["reports"] if not r["passed"]]
    summary = (f"gradcheck {args.target}: {'PASS' if res['passed'] else 'FAIL'} "
               f"max rel err {res['max_rel_err']:.2e} over {len(res['reports'])} checks "
               f"in {res['seconds']:.1f}s" + (f"; failing {bad}" if bad else ""))
    if not res["passed"]:
        raise CheckFailed(summary)
    return summary


def cmd_oracle_check(args, cfg) -> str:
    from . import oracles
    res = oracles.run_all(seed=cfg.seed, crf_instances=args.instances)
    if args.out is not None:
        _write_json(args.out / "oracle_check.json", res)
    line = {"command": "oracle-check", "passed": res["passed"],
            "suites": {r["name"]: r["passed"] for r in res["reports"]},
            "seconds": round(res["seconds"], 3)}
    failing = [f for r in res["reports"] for f in r["failures"]]
    if failing:
        line["failing_case"] = failing[0]
    summary = json.dumps(line, sort_keys=True)
    if not res["passed"]:
        raise CheckFailed(summary)
    return summary


HANDLERS = {"gen-data": cmd_gen_data, "train-asr": cmd_train_asr, "train-nlu": cmd_train_nlu,
            "train-e2e": cmd_train_e2e, "compose-eval": cmd_compose_eval, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "oracle-check": cmd_oracle_check}


def run(argv: Optional[List[str]] = None) -> int:
    """Parse ``argv``, run one command and return its exit status."""
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args)
    except UsageError as e:
        print(str(e).rstrip(), file=sys.stderr)
        return 1
    except (ConfigurationError, ValueError, KeyError, TypeError, OSError) as e:
        print(f"ctislu: invalid configuration: {e}", file=sys.stderr)
        return 1
    try:
        print(HANDLERS[args.command](args, cfg))
        return 0
    except CheckFailed as e:
        print(e.summary)
        return 2
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except (ConfigurationError, SharedVocabularyError) as e:
        print(f"ctislu {args.command}: invalid input: {e}", file=sys.stderr)
        return 1
    except Exception as e:                                 # noqa: BLE001 - reported as runtime failure
        log.exception("command failed")
        print(f"ctislu {args.command}: FAILED: {type(e).__name__}: {e}")
        return 2


def main():
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    sys.exit(run())


if __name__ == "__main__":
    main()
