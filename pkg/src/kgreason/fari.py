"""Rule induction from first-order attentions, and symbolic rule application.

Induction walks the reasoning graph forward, carrying every partial rule body
together with its share of the node's accumulated attention.  After each
step the node weights are softmax-normalised over the layer and the bodies
are rescaled so that they still add up to their node's weight.
"""

from __future__ import annotations

import math
import re
from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .graph import ReasoningGraph
from .kg import KnowledgeGraph, Query, Scenario, Vocab


class RuleClass(str, Enum):
    CCH = "CCH"   # connected and closed Horn rule
    TIH = "TIH"   # temporal interpolation: relative order of body times recorded
    TEH = "TEH"   # temporal extrapolation: body times non-decreasing, before the head


class Tag(str, Enum):
    NONE = "none"
    UNCONSTRAINED = "any"
    GE_PREV = ">=prev"
    LE_PREV = "<=prev"


@dataclass(frozen=True)
class Rule:
    head: int
    body: tuple[tuple[int, Tag], ...]
    confidence: float
    cls: RuleClass = RuleClass.CCH

    @property
    def relations(self) -> tuple[int, ...]:
        return tuple(r for r, _ in self.body)

    @property
    def key(self):
        return (self.head, self.body, self.cls)

    def __len__(self):
        return len(self.body)


class RuleInductionError(ValueError):
    pass


def rule_class_for(scenario: Scenario) -> RuleClass:
    if scenario == Scenario.TKG_I:
        return RuleClass.TIH
    if scenario == Scenario.TKG_E:
        return RuleClass.TEH
    return RuleClass.CCH


def _softmax(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max())
    return e / e.sum()


def _edges_of(rg: ReasoningGraph, l: int, qi: int) -> np.ndarray:
    layer = rg.layers[l]
    return np.flatnonzero(layer.edge_q == qi)


def propagate_bodies(rg: ReasoningGraph, beta_edges: Sequence[np.ndarray], qi: int = 0,
                     normalize: bool = True):
    """Run the forward body propagation for one query.

    ``beta_edges[l]`` holds the normalised first-order attention of every edge
    entering layer ``l`` (index 0 is unused).  Returns a list over layers of
    ``{node index: (weight, {body: confidence})}`` where a body is a tuple of
    ``(relation, fact_time)`` atoms, self atoms included.
    """
    if len(beta_edges) < len(rg.layers):
        raise RuleInductionError("missing first-order attentions for some layers")
    root = int(np.flatnonzero(rg.layers[0].node_q == qi)[0])
    dicts = [{root: (1.0, {(): 1.0})}]
    for l in range(1, len(rg.layers)):
        layer = rg.layers[l]
        beta = np.asarray(beta_edges[l], dtype=np.float64)
        if beta.shape != (layer.n_edges,):
            raise RuleInductionError(f"layer {l}: expected {layer.n_edges} edge attentions, got {beta.shape}")
        prev = dicts[-1]
        bodies: dict[int, dict] = defaultdict(dict)
        for k in _edges_of(rg, l, qi):
            i, j = int(layer.edge_src[k]), int(layer.edge_dst[k])
            atom = (int(layer.edge_rel[k]), int(layer.edge_time[k]))
            target = bodies[j]
            for body, eps in prev[i][1].items():
                nb = body + (atom,)
                target[nb] = target.get(nb, 0.0) + eps * beta[k]
        nodes = sorted(bodies)
        raw = np.array([sum(bodies[j].values()) for j in nodes])
        weights = _softmax(raw) if normalize else raw
        cur = {}
        for j, w_raw, w in zip(nodes, raw, weights):
            scale = w / w_raw if w_raw > 0 else 0.0
            cur[j] = (float(w), {b: e * scale for b, e in bodies[j].items()})
        dicts.append(cur)
    return dicts


def node_weights(rg: ReasoningGraph, beta_edges: Sequence[np.ndarray], qi: int = 0,
                 normalize: bool = True) -> list[dict[int, float]]:
    return [{n: w for n, (w, _) in d.items()} for d in propagate_bodies(rg, beta_edges, qi, normalize)]


def tag_body(atoms: Sequence[tuple[int, int]], cls: RuleClass) -> tuple[tuple[int, Tag], ...]:
    """Attach temporal-order tags to a self-stripped body of (relation, time) atoms."""
    if cls == RuleClass.CCH:
        return tuple((r, Tag.NONE) for r, _ in atoms)
    out = []
    prev_t = None
    for r, t in atoms:
        if prev_t is None:
            tag = Tag.UNCONSTRAINED
        elif cls == RuleClass.TEH or t >= prev_t:
            tag = Tag.GE_PREV
        else:
            tag = Tag.LE_PREV
        out.append((r, tag))
        prev_t = t
    return tuple(out)


def strip_self(atoms: Iterable[tuple], self_id: int) -> tuple:
    return tuple(a for a in atoms if a[0] != self_id)


def merge_rules(rules: Iterable[Rule]) -> list[Rule]:
    """Sum confidences of identical rules, capped at 1, in a deterministic order."""
    acc: dict = {}
    for r in rules:
        acc[r.key] = acc.get(r.key, 0.0) + r.confidence
    merged = [Rule(h, b, min(1.0, c), cls) for (h, b, cls), c in acc.items()]
    return sort_rules(merged)


def sort_rules(rules: Iterable[Rule]) -> list[Rule]:
    return sorted(rules, key=lambda r: (r.head, -r.confidence, _body_sort_key(r.body), r.cls.value))


def _body_sort_key(body):
    return tuple((r, t.value) for r, t in body)


def induce_rules(rg: ReasoningGraph, beta_edges: Sequence[np.ndarray], self_id: int, qi: int = 0,
                 normalize: bool = True, terminal_nodes: Iterable[int] | None = None) -> list[Rule]:
    """Extract weighted Horn rules for query ``qi`` from its reasoning graph.

    One candidate rule is produced per accumulated body at each final-layer
    node (restricted to ``terminal_nodes`` when given).  Self atoms are
    deleted, empty bodies dropped and duplicates merged.
    """
    dicts = propagate_bodies(rg, beta_edges, qi, normalize)
    query = rg.queries[qi]
    cls = rule_class_for(rg.scenario)
    last = dicts[-1]
    nodes = sorted(last) if terminal_nodes is None else [n for n in terminal_nodes if n in last]
    out = []
    for n in nodes:
        for body, eps in last[n][1].items():
            atoms = strip_self(body, self_id)
            if not atoms:
                continue
            out.append(Rule(query.r, tag_body(atoms, cls), float(eps), cls))
    return merge_rules(out)


def path_sum_oracle(rg: ReasoningGraph, beta_edges: Sequence[np.ndarray], qi: int = 0,
                    normalize: bool = True, max_paths: int = 200_000) -> list[dict[int, float]]:
    """Per-node confidence by explicit enumeration of root-to-node paths.

    A path's confidence is the product of its edge attentions times the
    per-layer rescaling factors (normalised weight / raw weight) of the nodes
    it passes through.  Used to cross-check :func:`propagate_bodies`.
    """
    root = int(np.flatnonzero(rg.layers[0].node_q == qi)[0])
    paths = [((root,), 1.0)]   # (node sequence, confidence)
    result = [{root: 1.0}]
    for l in range(1, len(rg.layers)):
        layer = rg.layers[l]
        beta = np.asarray(beta_edges[l], dtype=np.float64)
        incoming = defaultdict(list)
        for k in _edges_of(rg, l, qi):
            incoming[int(layer.edge_src[k])].append(k)
        new_paths = []
        for nodes, conf in paths:
            for k in incoming.get(nodes[-1], ()):
                new_paths.append((nodes + (int(layer.edge_dst[k]),), conf * beta[k]))
                if len(new_paths) > max_paths:
                    raise RuleInductionError(f"more than {max_paths} paths; graph too large for enumeration")
        raw = defaultdict(float)
        for nodes, conf in new_paths:
            raw[nodes[-1]] += conf
        keys = sorted(raw)
        vals = np.array([raw[k] for k in keys])
        normed = _softmax(vals) if normalize else vals
        scale = {k: (w / v if v > 0 else 0.0) for k, v, w in zip(keys, vals, normed)}
        paths = [(nodes, conf * scale[nodes[-1]]) for nodes, conf in new_paths]
        result.append({k: float(w) for k, w in zip(keys, normed)})
    return result


# ---------------------------------------------------------------------------
# grounding


def ground_rule(rule: Rule, kg: KnowledgeGraph, query: Query, limit: int | None = None):
    """Chain-match the rule body from the query subject.

    Returns ``[(answer entity, witness)]`` with one witness path (a tuple of
    ``(s, r, o, t)`` facts) per distinct answer, in discovery order.
    """
    if not rule.body:
        raise ValueError("rule body is empty")
    temporal = rule.cls != RuleClass.CCH and kg.temporal
    qt = query.t
    found: dict[int, tuple] = {}
    n = len(rule.body)
    stack = [(query.s, 0, None, ())]
    while stack:
        ent, depth, prev_t, witness = stack.pop()
        if depth == n:
            if ent not in found:
                found[ent] = witness
                if limit is not None and len(found) >= limit:
                    break
            continue
        r, tag = rule.body[depth]
        rels, objs, times = kg.out_edges(ent)
        lo, hi = np.searchsorted(rels, r, side="left"), np.searchsorted(rels, r, side="right")
        children = []
        for o, t in zip(objs[lo:hi].tolist(), times[lo:hi].tolist()):
            if temporal:
                if rule.cls == RuleClass.TEH:
                    if qt is None or t >= qt or (prev_t is not None and t < prev_t):
                        continue
                elif prev_t is not None:
                    if tag == Tag.GE_PREV and t < prev_t:
                        continue
                    if tag == Tag.LE_PREV and t > prev_t:
                        continue
            children.append((o, depth + 1, t if temporal else None, witness + ((ent, r, o, t),)))
        stack.extend(reversed(children))
    return list(found.items())


def score_by_grounding(rules: Iterable[Rule], kg: KnowledgeGraph, query: Query) -> np.ndarray:
    """Sum of confidences of the query-relation rules that reach each entity."""
    scores = np.zeros(kg.n_entities)
    for rule in rules:
        if rule.head != query.r or not rule.body:
            continue
        for ent, _ in ground_rule(rule, kg, query):
            scores[ent] += rule.confidence
    return scores


def aggregate_rules(per_query: Sequence[Sequence[Rule]], n_queries: int | None = None) -> list[Rule]:
    """Average each rule's confidence over queries (absent counts as 0)."""
    n = n_queries if n_queries is not None else len(per_query)
    if n == 0:
        return []
    acc: dict = defaultdict(float)
    for rules in per_query:
        for r in rules:
            acc[r.key] += r.confidence
    return sort_rules(Rule(h, b, c / n, cls) for (h, b, cls), c in acc.items())


def top_rules(rules: Iterable[Rule], k: int, head: int | None = None) -> list[Rule]:
    by_head = defaultdict(list)
    for r in sort_rules(rules):
        if head is None or r.head == head:
            by_head[r.head].append(r)
    out = []
    for h in sorted(by_head):
        out.extend(by_head[h][:k])
    return out


# ---------------------------------------------------------------------------
# rule file format


def _vars(n: int) -> list[str]:
    if n == 1:
        return ["X", "Z"]
    return ["X"] + [f"Y{i}" for i in range(1, n)] + ["Z"]


def format_rule(rule: Rule, vocab: Vocab) -> str:
    v = _vars(len(rule.body))
    atoms = []
    for i, (r, tag) in enumerate(rule.body):
        atom = f"{vocab.relations[r]}({v[i]},{v[i + 1]})"
        if tag != Tag.NONE:
            atom += f":{tag.value}"
        atoms.append(atom)
    head = f"{vocab.relations[rule.head]}(X,Z)"
    if rule.cls != RuleClass.CCH:
        head += f":{rule.cls.value}"
    return f"{rule.confidence!r}\t{head} <- {' & '.join(atoms)}"


_ATOM = re.compile(r"^(?P<rel>.+)\((?P<a>[^(),]+),(?P<b>[^(),]+)\)(?::(?P<suffix>[^():]+))?$")


def parse_rule(line: str, vocab: Vocab) -> Rule:
    try:
        conf_s, rest = line.rstrip("\n").split("\t", 1)
        head_s, body_s = rest.split(" <- ", 1)
    except ValueError:
        raise ValueError(f"malformed rule line: {line!r}") from None
    conf = float(conf_s)
    if not (0.0 <= conf <= 1.0) or math.isnan(conf):
        raise ValueError(f"confidence out of range in {line!r}")
    hm = _ATOM.match(head_s.strip())
    if hm is None:
        raise ValueError(f"malformed rule head: {head_s!r}")
    cls = RuleClass(hm.group("suffix")) if hm.group("suffix") else RuleClass.CCH
    body = []
    atoms = body_s.split(" & ")
    v = _vars(len(atoms))
    for i, a in enumerate(atoms):
        m = _ATOM.match(a.strip())
        if m is None:
            raise ValueError(f"malformed atom: {a!r}")
        if (m.group("a"), m.group("b")) != (v[i], v[i + 1]):
            raise ValueError(f"atom {a!r} breaks the variable chain")
        tag = Tag(m.group("suffix")) if m.group("suffix") else Tag.NONE
        body.append((vocab.relation_id[m.group("rel")], tag))
    return Rule(vocab.relation_id[hm.group("rel")], tuple(body), conf, cls)


def write_rules(path, rules: Iterable[Rule], vocab: Vocab) -> None:
    lines = [format_rule(r, vocab) for r in rules]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_rules(path, vocab: Vocab) -> list[Rule]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip() and not line.startswith("#"):
            out.append(parse_rule(line, vocab))
    return out
