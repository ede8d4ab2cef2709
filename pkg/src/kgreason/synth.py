"""Synthetic knowledge graphs with planted chain rules.

Body relations get random facts (plus a share of random noise facts across
all relations); every head fact entailed by a planted rule is materialised.
A random part of the entailed facts is held out, so those test answers can
only be reached through the planted rules.  In temporal graphs only facts
whose answer is unambiguous under the rules at their time are held out.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .fari import Rule, RuleClass, Tag
from .kg import NO_TIME, KnowledgeGraph, Query, Scenario, Splits, Vocab, queries_from_facts


@dataclass
class SynthSpec:
    n_entities: int = 50
    n_relations: int = 8
    # each rule is (head, [body relations]); relation ids refer to base relations
    rules: list[tuple[int, list[int]]] = field(
        default_factory=lambda: [(5, [0, 1]), (6, [2, 3]), (7, [4, 0])])
    facts_per_relation: int = 60
    noise: float = 0.1
    temporal: bool = False
    n_times: int = 40
    max_delay: int = 3
    test_ratio: float = 0.15
    valid_ratio: float = 0.05

    def validate(self):
        if self.n_entities < 2 or self.n_relations < 1:
            raise ValueError("need at least 2 entities and 1 relation")
        heads = set()
        for head, body in self.rules:
            for r in [head, *body]:
                if not 0 <= r < self.n_relations:
                    raise ValueError(f"rule uses unknown relation {r}")
            if not body:
                raise ValueError("rule body must not be empty")
            heads.add(head)
        for _, body in self.rules:
            if heads & set(body):
                raise ValueError("head relations may not appear in rule bodies")
        if not 0 <= self.noise < 1:
            raise ValueError("noise must lie in [0, 1)")


@dataclass
class SynthKG:
    spec: SynthSpec
    kg: KnowledgeGraph
    splits: Splits
    rules: list[Rule]
    facts: dict[str, np.ndarray]   # base facts of each split, (s, r, o, t)
    known_facts: np.ndarray
    entailed: np.ndarray           # every fact produced by a planted rule

    @property
    def scenario(self) -> Scenario:
        return Scenario.TKG_E if self.spec.temporal else Scenario.SKG_T

    def rule_queries(self, split: str) -> list[Query]:
        """Tail queries of ``split`` whose relation is the head of a planted rule."""
        heads = {r.head for r in self.rules}
        return [q for q in self.splits[split] if q.r in heads]


def _entail(rule_body: Sequence[int], facts: np.ndarray, temporal: bool, max_delay: int,
            rng: np.random.Generator) -> list[tuple]:
    """All groundings of a chain body; returns (s, o, t_head) with t_head > last body time."""
    by_rel: dict[int, dict[int, list]] = {}
    for s, r, o, t in facts.tolist():
        by_rel.setdefault(r, {}).setdefault(s, []).append((o, t))
    # frontier: (start, current, last_time)
    frontier = [(s, s, -1) for s in sorted({s for s, r, _, _ in facts.tolist() if r == rule_body[0]})]
    for r in rule_body:
        nxt = []
        for start, cur, last in frontier:
            for o, t in by_rel.get(r, {}).get(cur, ()):
                if temporal and t < last:
                    continue
                nxt.append((start, o, t))
        frontier = nxt
    out = set()
    for start, end, last in frontier:
        if temporal:
            out.add((start, end, last))
        else:
            out.add((start, end, NO_TIME))
    result = []
    for s, o, last in sorted(out):
        t = last + int(rng.integers(1, max_delay + 1)) if temporal else NO_TIME
        result.append((s, o, t))
    return result


def synth_kg(spec: SynthSpec | None = None, rng: np.random.Generator | int = 0) -> SynthKG:
    spec = spec or SynthSpec()
    spec.validate()
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    n_e, n_r = spec.n_entities, spec.n_relations
    heads = sorted({h for h, _ in spec.rules})
    body_rels = sorted(set(range(n_r)) - set(heads))
    horizon = spec.n_times

    def rand_facts(rels, n):
        s = rng.integers(0, n_e, size=n)
        o = rng.integers(0, n_e, size=n)
        r = rng.choice(np.asarray(rels), size=n)
        t = rng.integers(0, horizon, size=n) if spec.temporal else np.full(n, NO_TIME)
        keep = s != o
        return np.stack([s[keep], r[keep], o[keep], t[keep]], axis=1)

    base = rand_facts(body_rels, spec.facts_per_relation * len(body_rels))
    n_noise = int(round(spec.noise / (1 - spec.noise) * len(base)))
    noise = rand_facts(list(range(n_r)), n_noise)
    background = _unique_rows(np.concatenate([base, noise]))

    entailed = []
    for head, body in spec.rules:
        for s, o, t in _entail(body, background, spec.temporal, spec.max_delay, rng):
            entailed.append((s, head, o, t))
    entailed = _unique_rows(np.asarray(entailed, dtype=np.int64).reshape(-1, 4))
    if len(entailed) == 0:
        raise ValueError("planted rules produced no facts; increase facts_per_relation")

    n_test = max(1, int(round(spec.test_ratio * len(entailed))))
    n_valid = int(round(spec.valid_ratio * len(entailed)))
    eligible = np.arange(len(entailed))
    if spec.temporal:
        eligible = _unambiguous(entailed, background, dict(spec.rules))
    perm = rng.permutation(eligible)
    test = entailed[np.sort(perm[:n_test])]
    valid = entailed[np.sort(perm[n_test:n_test + n_valid])]
    held_idx = set(perm[:n_test + n_valid].tolist())
    rest = entailed[[i for i in range(len(entailed)) if i not in held_idx]]
    train = _unique_rows(np.concatenate([background, rest]))
    # a held-out fact must not sneak back in as noise
    held = {tuple(x) for x in np.concatenate([test, valid]).tolist()}
    train = np.asarray([f for f in train.tolist() if tuple(f) not in held], dtype=np.int64).reshape(-1, 4)

    times = None
    if spec.temporal:
        t_max = int(max(train[:, 3].max(), entailed[:, 3].max())) + 1
        times = list(range(t_max))
    vocab = Vocab([f"e{i}" for i in range(n_e)], [f"r{i}" for i in range(n_r)], times)
    kg = KnowledgeGraph(vocab, train)
    scenario = Scenario.TKG_E if spec.temporal else Scenario.SKG_T
    splits = Splits(queries_from_facts(train, vocab, scenario),
                    queries_from_facts(valid, vocab, scenario),
                    queries_from_facts(test, vocab, scenario))
    cls = RuleClass.TEH if spec.temporal else RuleClass.CCH
    planted = []
    for head, body in spec.rules:
        if spec.temporal:
            tags = tuple((r, Tag.UNCONSTRAINED if i == 0 else Tag.GE_PREV) for i, r in enumerate(body))
        else:
            tags = tuple((r, Tag.NONE) for r in body)
        planted.append(Rule(head, tags, 1.0, cls))
    known = np.concatenate([train, valid, test])
    return SynthKG(spec, kg, splits, planted, {"train": train, "valid": valid, "test": test},
                   known, entailed)


def _unambiguous(entailed: np.ndarray, background: np.ndarray, bodies: dict) -> np.ndarray:
    """Indices of temporal head facts whose object is the only new answer at their time.

    A query (s, head, ?, t) can be grounded through every body chain that ends
    before t, so older chains compete with the intended one.  Only facts where
    every competing answer is itself a true fact at time t are returned.
    """
    by_rel: dict[int, dict[int, list]] = {}
    for s, r, o, t in background.tolist():
        by_rel.setdefault(r, {}).setdefault(s, []).append((o, t))
    truth: dict[tuple, set] = {}
    for s, h, o, t in entailed.tolist():
        truth.setdefault((s, h, t), set()).add(o)
    keep = []
    for i, (s, h, o, t) in enumerate(entailed.tolist()):
        frontier = [(s, -1)]
        for r in bodies[h]:
            frontier = [(nxt, tt) for cur, last in frontier
                        for nxt, tt in by_rel.get(r, {}).get(cur, ()) if last <= tt < t]
        if {e for e, _ in frontier} - truth[(s, h, t)] == set():
            keep.append(i)
    return np.asarray(keep, dtype=np.int64)


def _unique_rows(a: np.ndarray) -> np.ndarray:
    if len(a) == 0:
        return a.reshape(0, 4).astype(np.int64)
    return np.unique(a.astype(np.int64), axis=0)


def write_tsv(skg: SynthKG, directory) -> None:
    """Write train/valid/test files in the loader's TSV layout."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    v = skg.kg.vocab
    for name, facts in skg.facts.items():
        with open(d / f"{name}.txt", "w", encoding="utf-8") as fh:
            for s, r, o, t in facts.tolist():
                cols = [v.entities[s], v.relations[r], v.entities[o]]
                if skg.spec.temporal:
                    cols.append(str(v.times[t]))
                fh.write("\t".join(cols) + "\n")

