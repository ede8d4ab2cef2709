"""Command-line entry point.

Exit codes: 0 on success, 2 for usage or configuration errors, 1 for errors
raised while running a command.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import numerics as nx
from .fari import format_rule, write_rules
from .graph import render_graph
from .kg import Dataset, KGParseError, KGValidationError, Query, Scenario, load_dataset
from .model import POOLING_MODES, LambdaMode, ModelParams, forward
from .synth import SynthSpec, synth_kg, write_tsv
from .training import (TrainConfig, evaluate, induce_rule_set, train,
                       write_loss_csv)

log = logging.getLogger("kgreason")


class ConfigError(Exception):
    """Bad flags, config file or dataset layout (exit code 2)."""


@dataclass
class RunConfig:
    scenario: Scenario = Scenario.SKG_T
    data: str | None = None
    out: str = "run"
    checkpoint: str | None = None
    train: TrainConfig = field(default_factory=TrainConfig)


_TRAIN_FLAGS = {"seed": "seed", "lambda_mode": "lambda_mode", "L": "L", "M": "M", "N": "N",
                "epochs": "epochs", "batch_size": "batch_size", "lr": "learning_rate", "d": "d",
                "weight_decay": "weight_decay", "pooling": "pooling"}


def load_run_config(args) -> RunConfig:
    """Config file first, then flags (flags win)."""
    raw: dict = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {args.config} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
    train_raw = dict(raw.get("train", {}))
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(train_raw) - known
    if unknown:
        raise ConfigError(f"unknown train settings: {sorted(unknown)}")
    for flag, key in _TRAIN_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            train_raw[key] = value
    try:
        tcfg = TrainConfig(**train_raw)
        scenario = Scenario(args.scenario or raw.get("scenario", Scenario.SKG_T.value))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(scenario=scenario,
                     data=getattr(args, "data", None) or raw.get("data"),
                     out=args.out or raw.get("out", "run"),
                     checkpoint=getattr(args, "checkpoint", None) or raw.get("checkpoint"),
                     train=tcfg)


def _dataset(rc: RunConfig) -> Dataset:
    if not rc.data:
        raise ConfigError("no dataset given (use --data or the config's \"data\" key)")
    if not Path(rc.data).is_dir():
        raise ConfigError(f"dataset path does not exist: {rc.data}")
    try:
        return load_dataset(rc.data, rc.scenario)
    except (FileNotFoundError, KGParseError, KGValidationError) as exc:
        raise ConfigError(str(exc)) from None


def _checkpoint(rc: RunConfig) -> tuple[ModelParams, TrainConfig]:
    """Load parameters; the checkpoint's own training setup fills in unset flags."""
    if not rc.checkpoint:
        raise ConfigError("no checkpoint given (use --checkpoint)")
    path = Path(rc.checkpoint)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    params = ModelParams.load(path)
    _, meta = nx.load_tensors(path)
    return params, TrainConfig(**meta.get("train", {}))


def _merge_eval_config(stored: TrainConfig, args) -> TrainConfig:
    merged = stored.to_dict()
    for flag, key in _TRAIN_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            merged[key] = value
    try:
        return TrainConfig(**merged)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _graph_for_split(ds: Dataset, split: str):
    """Graph, queries and filter facts for evaluating ``split``."""
    if split == "train":
        return ds.kg, ds.splits.train, ds.train_known_facts
    return ds.eval_kg, ds.eval_splits[split], ds.known_facts


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    rc = load_run_config(args)
    ds = _dataset(rc)
    try:
        rc.train.model_config(ds.kg, rc.scenario)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(
        {"scenario": rc.scenario.value, "data": rc.data, "train": rc.train.to_dict()}, indent=2))
    result = train(ds.kg, ds.splits.train, rc.train, checkpoint_dir=out)
    write_loss_csv(out / "loss.csv", result.losses)
    report = {"final_loss": result.losses[-1] if result.losses else None, "epochs": len(result.losses)}
    split = "test" if ds.eval_splits.test else "valid"
    queries = ds.eval_splits[split]
    if queries:
        m = evaluate(ds.eval_kg, queries, result.params, rc.train, ds.known_facts)
        report[split] = m.to_dict()
        print(m.table())
    (out / "metrics.json").write_text(json.dumps(report, indent=2))
    print(f"checkpoint written to {out / 'last.json'}")
    return 0


def cmd_eval(args) -> int:
    rc = load_run_config(args)
    ds = _dataset(rc)
    params, stored = _checkpoint(rc)
    cfg = _merge_eval_config(stored, args)
    kg, queries, known = _graph_for_split(ds, args.split)
    if not queries:
        raise RuntimeError("no queries")
    m = evaluate(kg, queries, params, cfg, known, exclude_query_facts=args.split == "train")
    print(m.to_json())
    print(m.table())
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / f"metrics_{args.split}.json").write_text(m.to_json())
    return 0


def _sample_queries(queries, k, seed):
    if k is None or len(queries) <= k:
        return list(queries)
    idx = np.sort(np.random.default_rng(seed).choice(len(queries), size=k, replace=False))
    return [queries[i] for i in idx]


def cmd_induce_rules(args) -> int:
    rc = load_run_config(args)
    ds = _dataset(rc)
    params, stored = _checkpoint(rc)
    cfg = _merge_eval_config(stored, args)
    if args.query:
        rules = induce_rule_set(ds.eval_kg, [_lookup_query(args.query, ds, rc.scenario)], params, cfg,
                                top_k=args.top_k)
        return _write_rule_file(rc, rules, ds.eval_kg.vocab)
    vocab = ds.kg.vocab
    heads = None
    if args.relation:
        try:
            heads = [vocab.relation_id[name] for name in args.relation]
        except KeyError as exc:
            raise ConfigError(f"unknown relation {exc.args[0]!r}") from None
    queries = ds.splits.train
    if heads is not None:
        queries = [q for q in queries if q.r in set(heads)]
    by_head: dict[int, list[Query]] = {}
    for q in queries:
        by_head.setdefault(q.r, []).append(q)
    sampled = []
    for h in sorted(by_head):
        sampled.extend(_sample_queries(by_head[h], args.max_queries, cfg.seed + h))
    rules = induce_rule_set(ds.kg, sampled, params, cfg, top_k=args.top_k)
    return _write_rule_file(rc, rules, vocab)


def _write_rule_file(rc: RunConfig, rules, vocab) -> int:
    target = Path(rc.out) if rc.out.endswith(".txt") else Path(rc.out) / "rules.txt"
    target.parent.mkdir(parents=True, exist_ok=True)
    write_rules(target, rules, vocab)
    print(f"{len(rules)} rule(s) written to {target}")
    return 0


def parse_query(text: str, ds: Dataset, scenario: Scenario) -> Query:
    """``"subject relation [time]"`` using vocabulary names (tab or space separated)."""
    parts = text.split("\t") if "\t" in text else text.split()
    vocab = ds.eval_kg.vocab
    temporal = scenario.temporal
    if len(parts) != (3 if temporal else 2):
        raise ConfigError("query must be 'subject relation" + (" time'" if temporal else "'"))
    try:
        s = vocab.entity_id[parts[0]]
        r = vocab.relation_id[parts[1]]
    except KeyError as exc:
        raise LookupError(f"unknown name {exc.args[0]!r}") from None
    t = None
    if temporal:
        key = next((tid for tid, v in enumerate(vocab.times) if str(v) == parts[2]), None)
        if key is None:
            raise LookupError(f"unknown time {parts[2]!r}")
        t = key
    return Query(s, r, t, scenario)


def _lookup_query(text: str, ds: Dataset, scenario: Scenario) -> Query:
    try:
        return parse_query(text, ds, scenario)
    except LookupError as exc:
        raise ConfigError(f"lookup error: {exc}") from None


def cmd_explain(args) -> int:
    rc = load_run_config(args)
    ds = _dataset(rc)
    params, stored = _checkpoint(rc)
    cfg = _merge_eval_config(stored, args)
    query = _lookup_query(args.query, ds, rc.scenario)
    kg = ds.eval_kg
    with nx.no_grad():
        res = forward([query], kg, params, cfg.expansion(), np.random.default_rng(cfg.seed + 3))
    text = render_graph(res.graph, kg, 0, res.node_attention("alpha"), res.node_attention("beta"),
                        res.edge_attention("alpha"), res.edge_attention("beta"))
    scores = res.scores.data[0]
    order = np.argsort(-scores, kind="stable")[:5]
    lines = [text, "top answers:"]
    lines += [f"  {kg.vocab.entities[i]}  {scores[i]:.4f}" for i in order]
    rules = induce_rule_set(kg, [query], params, cfg, top_k=args.top_k)
    lines.append("top rules:")
    for rule in rules:
        lines.append("  " + format_rule(rule, kg.vocab))
    print("\n".join(lines))
    return 0


def cmd_synth(args) -> int:
    out = Path(args.out or "synth")
    spec = SynthSpec(temporal=args.temporal)
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
            spec = SynthSpec(**{**raw.get("synth", {}), "temporal": args.temporal or raw.get("synth", {}).get("temporal", False)})
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise ConfigError(f"bad synth config: {exc}") from None
    seed = 0 if args.seed is None else args.seed
    try:
        skg = synth_kg(spec, seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    write_tsv(skg, out)
    write_rules(out / "planted_rules.txt", skg.rules, skg.kg.vocab)
    print(f"synthetic {'temporal' if spec.temporal else 'static'} KG written to {out} "
          f"({len(skg.facts['train'])} train / {len(skg.facts['test'])} test facts)")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser, data=True, checkpoint=False):
    p.add_argument("--config", help="JSON run configuration; flags override its values")
    p.add_argument("--scenario", choices=[s.value for s in Scenario])
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="cap on numeric worker threads (default: all cores)")
    p.add_argument("--lambda-mode", dest="lambda_mode", choices=[m.value for m in LambdaMode])
    p.add_argument("--L", type=int)
    p.add_argument("--M", type=int)
    p.add_argument("--N", type=int)
    p.add_argument("--out")
    if data:
        p.add_argument("--data", help="dataset directory with train/valid/test.txt")
    if checkpoint:
        p.add_argument("--checkpoint", help="parameter file written by 'train'")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kgreason", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--d", type=int, help="embedding width")
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--pooling", choices=list(POOLING_MODES), help="how edge messages are pooled per node")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="filtered MRR / Hits@k on a split")
    _common(p, checkpoint=True)
    p.add_argument("--split", choices=["train", "valid", "test"], default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("induce-rules", help="export weighted rules read off the model")
    _common(p, checkpoint=True)
    p.add_argument("--relation", action="append", help="head relation name (repeatable)")
    p.add_argument("--top-k", dest="top_k", type=int, default=10)
    p.add_argument("--max-queries", dest="max_queries", type=int, default=200,
                   help="training queries sampled per head relation")
    p.add_argument("--query", help="read rules off this single query instead ('subject relation [time]')")
    p.set_defaults(func=cmd_induce_rules)

    p = sub.add_parser("explain", help="dump one query's reasoning graph with attentions")
    _common(p, checkpoint=True)
    p.add_argument("--query", required=True, help="'subject relation [time]'")
    p.add_argument("--top-k", dest="top_k", type=int, default=5)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("synth", help="write a synthetic dataset with planted rules")
    _common(p, data=False)
    p.add_argument("--temporal", action="store_true")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = args.threads or os.cpu_count() or 1
    if threads < 1:
        print("error: --threads must be positive", file=sys.stderr)
        return 2
    try:
        with threadpool_limits(limits=threads):
            return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, ValueError, OSError, nx.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
