"""Knowledge-graph data model, TSV loading and neighbour lookup."""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

SELF = "self"
INV_SUFFIX = "^-1"
NO_TIME = -1


class Scenario(str, Enum):
    SKG_T = "SKG_T"   # static, transductive
    SKG_I = "SKG_I"   # static, inductive
    TKG_I = "TKG_I"   # temporal interpolation
    TKG_E = "TKG_E"   # temporal extrapolation

    @property
    def temporal(self) -> bool:
        return self in (Scenario.TKG_I, Scenario.TKG_E)


class KGParseError(ValueError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


class KGValidationError(ValueError):
    pass


class Vocab:
    """Dense id maps for entities, relations and (optionally) timestamps.

    Relations are laid out as ``[base_0 .. base_{R-1}, inv_0 .. inv_{R-1}, self]``
    so that ``inverse(r) = (r + R) mod 2R`` for every non-self relation.
    """

    def __init__(self, entities: Sequence[str], base_relations: Sequence[str],
                 times: Sequence | None = None):
        if len(set(entities)) != len(entities):
            raise KGValidationError("duplicate entity names")
        if len(set(base_relations)) != len(base_relations):
            raise KGValidationError("duplicate relation names")
        for r in base_relations:
            if r == SELF or r.endswith(INV_SUFFIX):
                raise KGValidationError(f"reserved relation name {r!r}")
        self.entities = list(entities)
        self.entity_id = {e: i for i, e in enumerate(self.entities)}
        self.n_base = len(base_relations)
        self.relations = (list(base_relations)
                          + [r + INV_SUFFIX for r in base_relations] + [SELF])
        self.relation_id = {r: i for i, r in enumerate(self.relations)}
        self.self_id = 2 * self.n_base
        if times is None:
            self.times = None
            self.time_values = None
            self.time_offsets = None
            self.time_id = {}
        else:
            self.times = list(times)
            if any(a >= b for a, b in zip(self.times, self.times[1:])):
                raise KGValidationError("timestamps must be strictly increasing")
            self.time_id = {t: i for i, t in enumerate(self.times)}
            self.time_values = np.asarray([_time_numeric(t) for t in self.times], dtype=np.float64)
            if np.any(np.diff(self.time_values) <= 0):
                raise KGValidationError("numeric time values must be strictly increasing")
            # offsets from the first timestamp keep the cosine encoder well scaled
            self.time_offsets = self.time_values - self.time_values[0]

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    @property
    def n_times(self) -> int:
        return 0 if self.times is None else len(self.times)

    @property
    def temporal(self) -> bool:
        return self.times is not None

    def inverse(self, r: int) -> int:
        if r == self.self_id:
            raise ValueError("the self relation has no inverse")
        return (r + self.n_base) % (2 * self.n_base)

    def relation_name(self, r: int) -> str:
        return self.relations[r]


def _time_numeric(t) -> float:
    if isinstance(t, dt.date):
        return float(t.toordinal())
    return float(t)


def _parse_time(raw: str):
    raw = raw.strip()
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return dt.date.fromisoformat(raw)
    except ValueError:
        raise ValueError(f"unparseable timestamp {raw!r}") from None


@dataclass(frozen=True)
class Query:
    s: int
    r: int
    t: int | None = None
    scenario: Scenario = Scenario.SKG_T
    label: int | None = None

    def __post_init__(self):
        if self.scenario.temporal != (self.t is not None):
            raise KGValidationError(f"query time must be present iff scenario is temporal: {self}")


@dataclass(frozen=True)
class NodeRef:
    entity: int
    time: int | None = None


class KnowledgeGraph:
    """Immutable fact store with a CSR adjacency that includes reverse edges.

    ``facts`` is an ``(n, 4)`` int array of base facts ``(s, r, o, t)``; ``t``
    is ``NO_TIME`` for static graphs.  Adjacency rows for each subject are
    sorted by ``(relation, object, time)``.
    """

    def __init__(self, vocab: Vocab, facts: np.ndarray):
        facts = np.asarray(facts, dtype=np.int64).reshape(-1, 4)
        if facts.shape[0] == 0:
            raise KGValidationError("no facts")
        n_e, n_b = vocab.n_entities, vocab.n_base
        if facts[:, [0, 2]].min() < 0 or facts[:, [0, 2]].max() >= n_e:
            raise KGValidationError("entity id out of range")
        if facts[:, 1].min() < 0 or facts[:, 1].max() >= n_b:
            raise KGValidationError("facts must use base relations only")
        if vocab.temporal:
            if facts[:, 3].min() < 0 or facts[:, 3].max() >= vocab.n_times:
                raise KGValidationError("time id out of range")
        elif np.any(facts[:, 3] != NO_TIME):
            raise KGValidationError("static graph facts must not carry times")
        self.vocab = vocab
        self.facts = facts
        self.facts.setflags(write=False)
        rev = np.stack([facts[:, 2], facts[:, 1] + n_b, facts[:, 0], facts[:, 3]], axis=1)
        both = np.concatenate([facts, rev])
        order = np.lexsort((both[:, 3], both[:, 2], both[:, 1], both[:, 0]))
        both = both[order]
        self.adj_rel = both[:, 1].copy()
        self.adj_obj = both[:, 2].copy()
        self.adj_time = both[:, 3].copy()
        counts = np.bincount(both[:, 0], minlength=n_e)
        self.adj_ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        for arr in (self.adj_rel, self.adj_obj, self.adj_time, self.adj_ptr):
            arr.setflags(write=False)
        self._fact_set = None

    @property
    def temporal(self) -> bool:
        return self.vocab.temporal

    @property
    def n_entities(self) -> int:
        return self.vocab.n_entities

    def out_edges(self, entity: int):
        """(relations, objects, times) arrays for one subject."""
        lo, hi = self.adj_ptr[entity], self.adj_ptr[entity + 1]
        return self.adj_rel[lo:hi], self.adj_obj[lo:hi], self.adj_time[lo:hi]

    def has_fact(self, s: int, r: int, o: int, t: int = NO_TIME) -> bool:
        """Membership test that understands reverse relations."""
        if self._fact_set is None:
            self._fact_set = set(map(tuple, self.facts.tolist()))
        if r >= self.vocab.n_base:
            s, r, o = o, r - self.vocab.n_base, s
        return (s, r, o, t) in self._fact_set

    def time_value(self, t: int | None) -> float:
        if t is None or t == NO_TIME:
            raise ValueError("no time")
        return float(self.vocab.time_values[t])


def posterior_neighbors(kg: KnowledgeGraph, node: NodeRef, scenario: Scenario,
                        query_time: int | None = None) -> list[tuple[int, NodeRef]]:
    """Successors of ``node`` under the scenario's time constraints.

    Static graphs ignore time.  Interpolation returns every fact.  For
    extrapolation only facts with ``node.time <= t_j < query_time`` are kept
    (a time-less start node only needs ``t_j < query_time``).  The ``self``
    successor is not included.
    """
    rels, objs, times = kg.out_edges(node.entity)
    if scenario == Scenario.TKG_E:
        if query_time is None:
            raise ValueError("extrapolation lookups need a query time")
        keep = times < query_time
        if node.time is not None:
            keep &= times >= node.time
        rels, objs, times = rels[keep], objs[keep], times[keep]
    if scenario.temporal:
        return [(int(r), NodeRef(int(o), int(t))) for r, o, t in zip(rels, objs, times)]
    return [(int(r), NodeRef(int(o))) for r, o in zip(rels, objs)]


# ---------------------------------------------------------------------------
# loading


def _read_rows(path, ncols: int | None) -> list[tuple[int, list[str]]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            cols = [c.strip() for c in line.split("\t")]
            if ncols is not None and len(cols) != ncols:
                raise KGParseError(path, lineno, f"expected {ncols} tab-separated columns, got {len(cols)}")
            rows.append((lineno, cols))
    return rows


@dataclass
class Splits:
    train: list[Query] = field(default_factory=list)
    valid: list[Query] = field(default_factory=list)
    test: list[Query] = field(default_factory=list)

    def __getitem__(self, name: str) -> list[Query]:
        if name not in ("train", "valid", "test"):
            raise KeyError(name)
        return getattr(self, name)


def queries_from_facts(facts: np.ndarray, vocab: Vocab, scenario: Scenario,
                       both_directions: bool = True) -> list[Query]:
    """Tail queries (s, r, ?) -> o, plus head queries rewritten via r^-1."""
    out = []
    for s, r, o, t in np.asarray(facts).tolist():
        tq = t if scenario.temporal else None
        out.append(Query(s, r, tq, scenario, o))
        if both_directions:
            out.append(Query(o, vocab.inverse(r), tq, scenario, s))
    return out


def _load(paths: Sequence, temporal: bool, scenario: Scenario,
          relations: Sequence[str] | None = None, times: Sequence | None = None):
    ncols = 4 if temporal else 3
    per_split = [_read_rows(p, ncols) for p in paths]
    if not per_split[0]:
        raise KGValidationError(f"no facts in {paths[0]}")
    entities: dict[str, None] = {}
    rel_seen: dict[str, None] = {}
    time_seen = set()
    parsed = []
    for path, rows in zip(paths, per_split):
        split_rows = []
        for lineno, (s, r, o, *rest) in rows:
            entities.setdefault(s)
            entities.setdefault(o)
            rel_seen.setdefault(r)
            if temporal:
                try:
                    tv = _parse_time(rest[0])
                except ValueError as exc:
                    raise KGParseError(path, lineno, str(exc)) from None
                time_seen.add(tv)
            else:
                tv = None
            split_rows.append((s, r, o, tv))
        parsed.append(split_rows)
    if temporal:
        kinds = {type(t) for t in time_seen}
        if len(kinds) > 1:
            raise KGValidationError("mixed timestamp formats (dates and integers)")
    if relations is None:
        base = sorted(rel_seen)
    else:
        base = list(relations)
        unknown = sorted(set(rel_seen) - set(base))
        if unknown:
            raise KGValidationError(f"relations not in the shared vocabulary: {unknown[:5]}")
    if temporal and times is None:
        times = sorted(time_seen)
    vocab = Vocab(sorted(entities), base, times if temporal else None)
    arrays = []
    for rows in parsed:
        arr = np.array([[vocab.entity_id[s], vocab.relation_id[r], vocab.entity_id[o],
                         vocab.time_id[t] if temporal else NO_TIME] for s, r, o, t in rows],
                       dtype=np.int64).reshape(-1, 4)
        arrays.append(arr)
    kg = KnowledgeGraph(vocab, arrays[0])
    splits = Splits(*(queries_from_facts(a, vocab, scenario) for a in arrays))
    return kg, splits, arrays


def load_static_kg(train_path, valid_path, test_path, scenario: Scenario = Scenario.SKG_T,
                   relations: Sequence[str] | None = None):
    """Load TSV triples; returns ``(kg, splits, fact_arrays)``.

    Only the training facts are indexed for reasoning.  ``fact_arrays`` holds
    the raw ``(s, r, o, t)`` id arrays of the three splits (used for
    filtered evaluation).
    """
    return _load([train_path, valid_path, test_path], False, scenario, relations)


def load_temporal_kg(train_path, valid_path, test_path, scenario: Scenario = Scenario.TKG_E):
    """Load TSV quadruples; timestamps become dense rank-order ids."""
    if not scenario.temporal:
        raise KGValidationError(f"{scenario.value} is not a temporal scenario")
    return _load([train_path, valid_path, test_path], True, scenario)


@dataclass
class Dataset:
    """A loaded dataset ready for training and evaluation.

    For the inductive scenario ``kg`` is the training graph and ``eval_kg`` the
    disjoint-entity test graph; otherwise both are the same object.
    """
    scenario: Scenario
    kg: KnowledgeGraph
    splits: Splits
    eval_kg: KnowledgeGraph
    eval_splits: Splits
    known_facts: np.ndarray        # all true facts of the evaluation graph (filtering)
    train_known_facts: np.ndarray  # all true facts of the training graph


def load_dataset(directory, scenario: Scenario) -> Dataset:
    """Load ``train.txt/valid.txt/test.txt`` (+ ``inductive/`` for SKG_I)."""
    d = Path(directory)
    files = [d / "train.txt", d / "valid.txt", d / "test.txt"]
    for f in files:
        if not f.exists():
            raise FileNotFoundError(f"missing dataset file {f}")
    if scenario.temporal:
        kg, splits, arrays = load_temporal_kg(*files, scenario=scenario)
        known = np.concatenate(arrays)
        return Dataset(scenario, kg, splits, kg, splits, known, known)
    kg, splits, arrays = load_static_kg(*files, scenario=scenario)
    known = np.concatenate(arrays)
    if scenario == Scenario.SKG_T:
        return Dataset(scenario, kg, splits, kg, splits, known, known)
    ind = d / "inductive"
    ind_files = [ind / "train.txt", ind / "valid.txt", ind / "test.txt"]
    for f in ind_files:
        if not f.exists():
            raise FileNotFoundError(f"missing inductive dataset file {f}")
    base = kg.vocab.relations[: kg.vocab.n_base]
    ind_kg, ind_splits, ind_arrays = load_static_kg(*ind_files, scenario=scenario, relations=base)
    overlap = set(kg.vocab.entities) & set(ind_kg.vocab.entities)
    if overlap:
        raise KGValidationError(
            f"inductive entity set overlaps training entities ({len(overlap)} shared, e.g. {sorted(overlap)[:3]})")
    return Dataset(scenario, kg, splits, ind_kg, ind_splits, np.concatenate(ind_arrays), known)

