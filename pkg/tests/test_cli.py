import json
import re

import numpy as np
import pytest

from kgreason.cli import main
from kgreason.fari import read_rules
from kgreason.kg import Scenario, load_dataset

TRAIN_ARGS = ["--epochs", "40", "--seed", "1", "--d", "8", "--lr", "0.005", "--L", "2"]


def write_toy(path, with_test=False):
    """Six copies of the pattern a -p-> b -q-> c with the shortcut a -h-> c."""
    path.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(6):
        lines += [f"a{i}\tp\tb{i}", f"b{i}\tq\tc{i}", f"a{i}\th\tc{i}"]
    (path / "train.txt").write_text("\n".join(lines) + "\n")
    (path / "valid.txt").write_text("")
    (path / "test.txt").write_text("")
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = write_toy(root / "data")
    out = root / "run"
    assert main(["train", "--data", str(data), "--out", str(out), *TRAIN_ARGS]) == 0
    return data, out


def test_missing_dataset_exits_with_usage_code(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2
    assert "does not exist" in capsys.readouterr().err


def test_no_dataset_exits_with_usage_code(tmp_path):
    assert main(["train", "--out", str(tmp_path / "o")]) == 2


def test_bad_flag_exits_with_usage_code():
    assert main(["train", "--pooling", "max"]) == 2


def test_train_writes_checkpoint_and_loss_log(trained):
    _, out = trained
    assert (out / "last.json").exists()
    rows = (out / "loss.csv").read_text().strip().splitlines()
    assert rows[0] == "epoch,loss" and len(rows) == 41
    assert json.loads((out / "config.json").read_text())["train"]["epochs"] == 40


def test_same_seed_reproduces_final_loss(trained, tmp_path):
    data, out = trained
    assert main(["train", "--data", str(data), "--out", str(tmp_path), *TRAIN_ARGS]) == 0
    assert (tmp_path / "loss.csv").read_text() == (out / "loss.csv").read_text()


def test_toy_model_fits_its_training_split(trained, capsys):
    data, out = trained
    assert main(["eval", "--data", str(data), "--checkpoint", str(out / "last.json"), "--split", "train"]) == 0
    metrics = json.loads(capsys.readouterr().out.split("\nmetric")[0])
    assert metrics["hits1"] == 1.0 and metrics["n_queries"] == 36


def test_corrupt_checkpoint_is_a_runtime_error(trained, tmp_path, capsys):
    data, _ = trained
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["eval", "--data", str(data), "--checkpoint", str(bad), "--split", "train"]) == 1
    assert "error" in capsys.readouterr().err


def test_checkpoint_from_other_graph_is_rejected(trained, tmp_path):
    _, out = trained
    other = tmp_path / "other"
    other.mkdir()
    (other / "train.txt").write_text("x\tr\ty\n")
    (other / "valid.txt").write_text("")
    (other / "test.txt").write_text("")
    assert main(["eval", "--data", str(other), "--checkpoint", str(out / "last.json"), "--split", "train"]) == 1


def test_empty_split_reports_no_queries(trained, capsys):
    data, out = trained
    assert main(["eval", "--data", str(data), "--checkpoint", str(out / "last.json"), "--split", "test"]) == 1
    assert "no queries" in capsys.readouterr().err


def test_top_k_zero_writes_empty_rule_file(trained, tmp_path):
    data, out = trained
    target = tmp_path / "rules.txt"
    assert main(["induce-rules", "--data", str(data), "--checkpoint", str(out / "last.json"),
                 "--out", str(target), "--top-k", "0"]) == 0
    assert target.read_text() == ""


def test_rule_file_reads_back(trained, tmp_path):
    data, out = trained
    target = tmp_path / "rules.txt"
    assert main(["induce-rules", "--data", str(data), "--checkpoint", str(out / "last.json"),
                 "--out", str(target), "--relation", "h"]) == 0
    vocab = load_dataset(data, Scenario.SKG_T).kg.vocab
    rules = read_rules(target, vocab)
    assert rules and all(r.head == vocab.relation_id["h"] for r in rules)
    top = rules[0]
    assert [vocab.relations[a] for a, _ in top.body] == ["p", "q"]
    assert all(a.confidence >= b.confidence for a, b in zip(rules, rules[1:]))


def test_unknown_relation_filter_is_a_usage_error(trained, tmp_path):
    data, out = trained
    assert main(["induce-rules", "--data", str(data), "--checkpoint", str(out / "last.json"),
                 "--out", str(tmp_path / "r.txt"), "--relation", "nope"]) == 2


def explain(data, out, query, capsys):
    assert main(["explain", "--data", str(data), "--checkpoint", str(out / "last.json"), "--query", query]) == 0
    return capsys.readouterr().out


def test_explain_lists_every_layer_with_normalised_attention(trained, capsys):
    data, out = trained
    text = explain(data, out, "a0 h", capsys)
    headers = re.findall(r"^layer (\d+):", text, flags=re.M)
    assert headers == ["0", "1", "2"]
    blocks = re.split(r"^layer \d+:.*$", text, flags=re.M)[1:]
    for block in blocks:
        node_alpha = [float(v) for v in re.findall(r"^  \[\d+\] \S+  alpha=([0-9.]+)", block, flags=re.M)]
        assert abs(sum(node_alpha) - 1) < 1e-3


def test_explain_top_rule_matches_single_query_rule_export(trained, tmp_path, capsys):
    data, out = trained
    text = explain(data, out, "b2 q", capsys)
    shown = text.split("top rules:\n")[1].splitlines()[0].strip()
    target = tmp_path / "rules.txt"
    assert main(["induce-rules", "--data", str(data), "--checkpoint", str(out / "last.json"),
                 "--out", str(target), "--query", "b2 q"]) == 0
    assert target.read_text().splitlines()[0] == shown


def test_explain_unknown_name_is_a_lookup_error(trained, capsys):
    data, out = trained
    assert main(["explain", "--data", str(data), "--checkpoint", str(out / "last.json"), "--query", "zz h"]) == 2
    assert "lookup error" in capsys.readouterr().err


def test_synth_writes_loadable_dataset_and_planted_rules(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--seed", "3"]) == 0
    ds = load_dataset(tmp_path, Scenario.SKG_T)
    rules = read_rules(tmp_path / "planted_rules.txt", ds.kg.vocab)
    assert len(rules) == 3 and len(ds.splits.test) > 0
    again = tmp_path / "again"
    assert main(["synth", "--out", str(again), "--seed", "3"]) == 0
    assert (again / "train.txt").read_text() == (tmp_path / "train.txt").read_text()


def test_threads_must_be_positive(trained):
    data, out = trained
    assert main(["eval", "--threads", "-1", "--data", str(data), "--checkpoint", str(out / "last.json")]) == 2


def test_flags_override_config_file(tmp_path):
    data = write_toy(tmp_path / "data")
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"data": str(data), "train": {"epochs": 3, "d": 4}}))
    assert main(["train", "--config", str(cfg), "--epochs", "2", "--out", str(tmp_path / "o")]) == 0
    stored = json.loads((tmp_path / "o" / "config.json").read_text())["train"]
    assert stored["epochs"] == 2 and stored["d"] == 4
    assert len(np.loadtxt(tmp_path / "o" / "loss.csv", delimiter=",", skiprows=1, ndmin=2)) == 2
