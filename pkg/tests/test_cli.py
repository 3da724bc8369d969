import functools
import json

import pytest

from ctislu import cli, oracles

# a 40-utterance corpus leaves some intents out of the small splits
pytestmark = pytest.mark.filterwarnings("ignore:split .* has no examples")

TINY = ["asr.d=8", "asr.n_enc=1", "asr.n_dec=1", "asr.heads=2", "asr.d_ff=16",
        "nlu.d=8", "nlu.n_layers=1", "nlu.heads=2", "nlu.d_ff=16",
        "data.n_examples=40", "data.d_feat=8",
        "train.steps=4", "train.batch_size=4", "train.eval_max_examples=4"]


def sets(*extra):
    out = []
    for kv in TINY + list(extra):
        out += ["--set", kv]
    return out


def test_gen_data_writes_splits(tmp_path, capsys):
    assert cli.run(["gen-data", "--out", str(tmp_path), *sets()]) == 0
    for name in ("train.jsonl", "dev.jsonl", "test.jsonl", "vocab.json"):
        assert (tmp_path / name).exists()
    out = capsys.readouterr().out.strip().splitlines()
    assert len(out) == 1 and out[0].startswith("gen-data:")


def test_usage_errors_exit_one(tmp_path, capsys):
    assert cli.run([]) == 1
    assert cli.run(["bogus"]) == 1
    assert cli.run(["gen-data", "--out", str(tmp_path), "--nope"]) == 1
    assert "usage" in capsys.readouterr().err


def test_invalid_overrides_exit_one(tmp_path):
    assert cli.run(["gen-data", "--out", str(tmp_path), "--set", "train.steps=-3"]) == 1
    assert cli.run(["gen-data", "--out", str(tmp_path), "--set", "train.nope=1"]) == 1
    assert cli.run(["gen-data", "--out", str(tmp_path), "--set", "no_equals_sign"]) == 1
    assert not (tmp_path / "train.jsonl").exists()          # validation precedes work


def test_bad_config_file_exits_one(tmp_path):
    bad = tmp_path / "c.json"
    bad.write_text("{not json")
    assert cli.run(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1


def test_gradcheck_single_op(capsys):
    assert cli.run(["gradcheck", "--target", "softmax", "--trials", "3"]) == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith("gradcheck softmax: PASS")
    assert cli.run(["gradcheck", "--target", "nope"]) == 1


def test_oracle_check_prints_json(tmp_path, capsys):
    assert cli.run(["oracle-check", "--instances", "50", "--out", str(tmp_path)]) == 0
    line = json.loads(capsys.readouterr().out.strip())
    assert line["passed"] and all(line["suites"].values())
    assert (tmp_path / "oracle_check.json").exists()


def test_oracle_check_mutation_exits_two(monkeypatch, capsys):
    monkeypatch.setattr(oracles, "run_all", functools.partial(oracles.run_all, mutation="crf_transition_sign"))
    assert cli.run(["oracle-check", "--instances", "50"]) == 2
    line = json.loads(capsys.readouterr().out.strip())
    assert not line["passed"] and "failing_case" in line


@pytest.fixture(scope="module")
def checkpoints(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.run(["train-asr", "--out", str(root / "asr"), *sets()]) == 0
    assert cli.run(["train-nlu", "--out", str(root / "nlu"), *sets()]) == 0
    return root, root / "asr" / "checkpoints" / "asr.json", root / "nlu" / "checkpoints" / "nlu.json"


def test_training_commands_write_logs(checkpoints):
    root, asr, nlu = checkpoints
    assert asr.exists() and nlu.exists()
    assert (root / "asr" / "losses.jsonl").read_text().count("\n") == 4


def test_compose_eval_writes_one_report_per_interface(checkpoints, capsys):
    root, asr, nlu = checkpoints
    out = root / "compose"
    capsys.readouterr()
    assert cli.run(["compose-eval", "--asr", str(asr), "--nlu", str(nlu), "--out", str(out), *sets()]) == 0
    line = capsys.readouterr().out.strip()
    assert "continuous IC" in line and "discrete IC" in line
    for mode in ("continuous", "discrete"):
        rep = json.loads((out / f"metrics_{mode}.json").read_text())
        assert 0.0 <= rep["ic_accuracy"] <= 1.0


def test_compose_eval_missing_checkpoint_is_runtime_failure(tmp_path):
    args = ["compose-eval", "--asr", str(tmp_path / "x.json"), "--nlu", str(tmp_path / "y.json"),
            "--out", str(tmp_path), *sets()]
    assert cli.run(args) == 2


def test_eval_and_train_e2e(checkpoints, capsys):
    root, asr, nlu = checkpoints
    assert cli.run(["eval", "--asr", str(asr), "--nlu", str(nlu), "--out", str(root / "eval"), *sets()]) == 0
    assert (root / "eval" / "metrics.json").exists()
    assert cli.run(["train-e2e", "--asr", str(asr), "--nlu", str(nlu), "--out", str(root / "e2e"),
                    *sets("train.regime=e2e_multitask")]) == 0
    assert "e2e_multitask" in capsys.readouterr().out.strip().splitlines()[-1]


def test_train_asr_is_byte_reproducible(tmp_path):
    for run in ("a", "b"):
        assert cli.run(["train-asr", "--out", str(tmp_path / run), "--seed", "5", *sets()]) == 0
    for name in ("losses.jsonl", "metrics.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
