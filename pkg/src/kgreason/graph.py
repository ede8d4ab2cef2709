"""Per-query layered reasoning graphs.

A :class:`ReasoningGraph` may hold several queries at once (a batch is the
disjoint union of the per-query graphs); every node carries the index of the
query it belongs to.  All structure is kept in flat int arrays so the model can
run one vectorised pass per layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .kg import NO_TIME, KnowledgeGraph, NodeRef, Query, Scenario

_I64 = np.int64


@dataclass
class ExpansionConfig:
    L: int = 3
    M: int = 50
    N: int = 200
    rng_seed: int = 0

    def __post_init__(self):
        if self.L < 1 or self.M < 1 or self.N < 1:
            raise ValueError(f"L, M and N must be >= 1 (got {self.L}, {self.M}, {self.N})")


@dataclass
class Layer:
    """Nodes of step ``index`` and the edges entering them from step ``index-1``.

    ``edge_time`` holds the time id of the fact behind each edge (``NO_TIME``
    for self edges and static graphs); it survives interpolation fusion.
    """
    index: int
    node_q: np.ndarray
    node_ent: np.ndarray
    node_time: np.ndarray
    edge_src: np.ndarray = field(default_factory=lambda: np.zeros(0, _I64))
    edge_rel: np.ndarray = field(default_factory=lambda: np.zeros(0, _I64))
    edge_dst: np.ndarray = field(default_factory=lambda: np.zeros(0, _I64))
    edge_time: np.ndarray = field(default_factory=lambda: np.zeros(0, _I64))

    @property
    def n_nodes(self) -> int:
        return len(self.node_ent)

    @property
    def n_edges(self) -> int:
        return len(self.edge_src)

    def node_ref(self, i: int) -> NodeRef:
        t = int(self.node_time[i])
        return NodeRef(int(self.node_ent[i]), None if t == NO_TIME else t)

    def edges(self) -> list[tuple[int, int, int]]:
        return list(zip(self.edge_src.tolist(), self.edge_rel.tolist(), self.edge_dst.tolist()))

    @property
    def edge_q(self) -> np.ndarray:
        return self.node_q[self.edge_dst]


@dataclass
class ReasoningGraph:
    queries: list[Query]
    scenario: Scenario
    layers: list[Layer]
    L: int

    @property
    def n_queries(self) -> int:
        return len(self.queries)

    @property
    def expansions(self) -> int:
        return len(self.layers) - 1

    def query_times(self) -> np.ndarray:
        return np.array([NO_TIME if q.t is None else q.t for q in self.queries], dtype=_I64)


def init_reasoning_graph(queries: Query | Sequence[Query], L: int = 3) -> ReasoningGraph:
    """Layer 0 holds only the (time-less) start entity of each query."""
    if isinstance(queries, Query):
        queries = [queries]
    queries = list(queries)
    if not queries:
        raise ValueError("no queries")
    scenario = queries[0].scenario
    if any(q.scenario != scenario for q in queries):
        raise ValueError("all queries of a reasoning graph must share a scenario")
    n = len(queries)
    layer0 = Layer(0, np.arange(n, dtype=_I64), np.array([q.s for q in queries], dtype=_I64),
                   np.full(n, NO_TIME, dtype=_I64))
    return ReasoningGraph(queries, scenario, [layer0], L)


def _gather_adjacency(kg: KnowledgeGraph, ents: np.ndarray):
    """All adjacency rows of ``ents``; returns (owner index, rel, obj, time)."""
    starts = kg.adj_ptr[ents]
    counts = kg.adj_ptr[ents + 1] - starts
    total = int(counts.sum())
    owner = np.repeat(np.arange(len(ents), dtype=_I64), counts)
    if total == 0:
        z = np.zeros(0, _I64)
        return owner, z, z, z
    offsets = np.arange(total, dtype=_I64) - np.repeat(np.cumsum(counts) - counts, counts)
    idx = np.repeat(starts, counts) + offsets
    return owner, kg.adj_rel[idx], kg.adj_obj[idx], kg.adj_time[idx]


def sampling_weights(cand_times: np.ndarray, query_time: float) -> np.ndarray:
    """exp(t' - t~) normalised over the candidates (max-shifted)."""
    z = np.asarray(cand_times, dtype=np.float64) - float(query_time)
    z = z - z.max()
    w = np.exp(z)
    return w / w.sum()


def sample_posterior(candidates: Sequence, M: int, query_time: float, rng: np.random.Generator,
                     times: Sequence[float] | None = None) -> list:
    """Time-aware weighted sampling without replacement, keeping input order.

    ``candidates`` are ``(relation, NodeRef)`` pairs; ``times`` gives the
    numeric time of each candidate (defaults to the NodeRef time ids).
    """
    candidates = list(candidates)
    if len(candidates) <= M:
        return candidates
    if times is None:
        times = [c[1].time for c in candidates]
    p = sampling_weights(np.asarray(times, dtype=np.float64), query_time)
    chosen = _weighted_choice(rng, len(candidates), M, p)
    return [candidates[i] for i in chosen]


def _weighted_choice(rng: np.random.Generator, n: int, m: int, p: np.ndarray) -> np.ndarray:
    nonzero = int(np.count_nonzero(p))
    if nonzero < m:
        # underflowed weights: take every positive one, then fill uniformly from the rest
        pos = np.flatnonzero(p)
        rest = np.setdiff1d(np.arange(n), pos)
        extra = rng.choice(rest, size=m - nonzero, replace=False)
        return np.sort(np.concatenate([pos, extra]))
    return np.sort(rng.choice(n, size=m, replace=False, p=p))


def expand_layer(rg: ReasoningGraph, kg: KnowledgeGraph, cfg: ExpansionConfig,
                 rng: np.random.Generator | None = None,
                 exclude_query_facts: bool = False) -> Layer:
    """Grow ``rg`` by one step and return the new layer.

    Every node keeps a ``self`` successor.  With ``exclude_query_facts`` the
    fact a training query was built from (and its reverse) is hidden, so the
    answer cannot be read off a direct edge.
    """
    if rg.expansions >= rg.L:
        raise ValueError(f"reasoning graph already has {rg.L} expansions")
    scenario = rg.scenario
    prev = rg.layers[-1]
    l = prev.index
    qtimes = rg.query_times()
    owner, rel, obj, tim = _gather_adjacency(kg, prev.node_ent)
    src_q = prev.node_q[owner]
    keep = np.ones(len(owner), dtype=bool)
    if scenario == Scenario.TKG_E:
        keep &= tim < qtimes[src_q]
        keep &= tim >= prev.node_time[owner]   # NO_TIME (-1) on the start node never filters
    if exclude_query_facts:
        qs = np.array([q.s for q in rg.queries], dtype=_I64)
        qr = np.array([q.r for q in rg.queries], dtype=_I64)
        qo = np.array([-1 if q.label is None else q.label for q in rg.queries], dtype=_I64)
        inv_r = np.array([kg.vocab.inverse(r) if r != kg.vocab.self_id else r for r in qr], dtype=_I64)
        subj = prev.node_ent[owner]
        same_t = (tim == qtimes[src_q]) if scenario.temporal else np.ones(len(owner), dtype=bool)
        fwd = (subj == qs[src_q]) & (rel == qr[src_q]) & (obj == qo[src_q])
        bwd = (subj == qo[src_q]) & (rel == inv_r[src_q]) & (obj == qs[src_q])
        keep &= ~((fwd | bwd) & same_t)
    owner, rel, obj, tim = owner[keep], rel[keep], obj[keep], tim[keep]

    if scenario == Scenario.TKG_E and len(owner):
        rng = rng if rng is not None else np.random.default_rng(cfg.rng_seed)
        counts = np.bincount(owner, minlength=prev.n_nodes)
        if np.any(counts > cfg.M):
            starts = np.concatenate([[0], np.cumsum(counts)])
            mask = np.ones(len(owner), dtype=bool)
            tv = kg.vocab.time_values
            for i in np.flatnonzero(counts > cfg.M):
                lo, hi = starts[i], starts[i + 1]
                qt = tv[qtimes[prev.node_q[i]]]
                p = sampling_weights(tv[tim[lo:hi]], qt)
                chosen = _weighted_choice(rng, hi - lo, cfg.M, p)
                sub = np.zeros(hi - lo, dtype=bool)
                sub[chosen] = True
                mask[lo:hi] = sub
            owner, rel, obj, tim = owner[mask], rel[mask], obj[mask], tim[mask]

    # self successors
    self_src = np.arange(prev.n_nodes, dtype=_I64)
    self_time = prev.node_time.copy()
    if scenario == Scenario.TKG_E and l == 0:
        self_time[:] = 0   # minimum time id
    edge_src = np.concatenate([owner, self_src])
    edge_rel = np.concatenate([rel, np.full(prev.n_nodes, kg.vocab.self_id, dtype=_I64)])
    tgt_ent = np.concatenate([obj, prev.node_ent])
    tgt_time = np.concatenate([tim, self_time]) if scenario.temporal else np.full(len(edge_src), NO_TIME, _I64)
    edge_time = np.concatenate([tim, np.full(prev.n_nodes, NO_TIME, dtype=_I64)])
    if not scenario.temporal:
        edge_time[:] = NO_TIME
    tgt_q = prev.node_q[edge_src]

    layer = _dedupe(l + 1, tgt_q, tgt_ent, tgt_time, edge_src, edge_rel, edge_time)
    if scenario == Scenario.TKG_I:
        layer = fuse_entity_nodes(layer)
    rg.layers.append(layer)
    return layer


def _dedupe(index, tgt_q, tgt_ent, tgt_time, edge_src, edge_rel, edge_time) -> Layer:
    keys = np.stack([tgt_q, tgt_ent, tgt_time], axis=1)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    return Layer(index, uniq[:, 0].copy(), uniq[:, 1].copy(), uniq[:, 2].copy(),
                 edge_src.astype(_I64), edge_rel.astype(_I64), inverse.astype(_I64),
                 edge_time.astype(_I64))


def fuse_entity_nodes(layer: Layer) -> Layer:
    """Collapse entity-time nodes that share an entity into one time-less node."""
    return _dedupe(layer.index, layer.node_q[layer.edge_dst], layer.node_ent[layer.edge_dst],
                   np.full(layer.n_edges, NO_TIME, _I64), layer.edge_src, layer.edge_rel,
                   layer.edge_time) if layer.n_edges else Layer(
        layer.index, layer.node_q.copy(), layer.node_ent.copy(),
        np.full(layer.n_nodes, NO_TIME, _I64))


def prune_edges_topN(layer: Layer, edge_attentions: np.ndarray, N: int):
    """Keep each query's ``N`` highest-attention edges; drop orphaned nodes.

    Returns ``(pruned_layer, kept_edge_indices, kept_node_indices)``.  Ties
    are broken by edge order.
    """
    att = np.asarray(edge_attentions, dtype=np.float64)
    if att.shape != (layer.n_edges,):
        raise ValueError("one attention value per edge is required")
    eq = layer.edge_q
    order = np.lexsort((np.arange(layer.n_edges), -att, eq))
    # rank of each edge within its query after sorting
    sorted_q = eq[order]
    first = np.searchsorted(sorted_q, sorted_q, side="left")
    rank = np.arange(len(order)) - first
    kept = np.sort(order[rank < N])
    if len(kept) == layer.n_edges:
        return layer, kept, np.arange(layer.n_nodes, dtype=_I64)
    alive = np.zeros(layer.n_nodes, dtype=bool)
    alive[layer.edge_dst[kept]] = True
    kept_nodes = np.flatnonzero(alive)
    remap = np.full(layer.n_nodes, -1, dtype=_I64)
    remap[kept_nodes] = np.arange(len(kept_nodes))
    pruned = Layer(layer.index, layer.node_q[kept_nodes], layer.node_ent[kept_nodes],
                   layer.node_time[kept_nodes], layer.edge_src[kept], layer.edge_rel[kept],
                   remap[layer.edge_dst[kept]], layer.edge_time[kept])
    return pruned, kept, kept_nodes


def build_reasoning_graph(queries: Sequence[Query], kg: KnowledgeGraph, cfg: ExpansionConfig,
                          rng: np.random.Generator | None = None,
                          exclude_query_facts: bool = False) -> ReasoningGraph:
    """Fully expand a graph without pruning (structure only)."""
    rg = init_reasoning_graph(queries, cfg.L)
    rng = rng if rng is not None else np.random.default_rng(cfg.rng_seed)
    for _ in range(cfg.L):
        expand_layer(rg, kg, cfg, rng, exclude_query_facts)
    return rg


def query_slice(rg: ReasoningGraph, qi: int):
    """Per-layer (node indices, edge indices) belonging to query ``qi``."""
    out = []
    for layer in rg.layers:
        nodes = np.flatnonzero(layer.node_q == qi)
        edges = np.flatnonzero(layer.edge_q == qi) if layer.n_edges else np.zeros(0, _I64)
        out.append((nodes, edges))
    return out


def render_graph(rg: ReasoningGraph, kg: KnowledgeGraph, qi: int = 0,
                 node_alpha=None, node_beta=None, edge_alpha=None, edge_beta=None) -> str:
    """Plain-text dump of one query's layers, optionally annotated with attentions."""
    vocab = kg.vocab

    def node_name(layer, i):
        name = vocab.entities[int(layer.node_ent[i])]
        t = int(layer.node_time[i])
        if t != NO_TIME:
            name += f"@{vocab.times[t]}"
        return name

    lines = []
    q = rg.queries[qi]
    qt = "" if q.t is None else f", {vocab.times[q.t]}"
    lines.append(f"query: ({vocab.entities[q.s]}, {vocab.relations[q.r]}, ?{qt})")
    for l, layer in enumerate(rg.layers):
        nodes = np.flatnonzero(layer.node_q == qi)
        lines.append(f"layer {l}: {len(nodes)} node(s)")
        for i in nodes:
            extra = ""
            if node_alpha is not None:
                extra += f"  alpha={node_alpha[l][i]:.4f}"
            if node_beta is not None:
                extra += f"  beta={node_beta[l][i]:.4f}"
            lines.append(f"  [{i}] {node_name(layer, i)}{extra}")
        if l == 0:
            continue
        prev = rg.layers[l - 1]
        for k in np.flatnonzero(layer.edge_q == qi):
            s, r, d = int(layer.edge_src[k]), int(layer.edge_rel[k]), int(layer.edge_dst[k])
            extra = ""
            if edge_alpha is not None:
                extra += f"  alpha={edge_alpha[l][k]:.4f}"
            if edge_beta is not None:
                extra += f"  beta={edge_beta[l][k]:.4f}"
            lines.append(f"    {node_name(prev, s)} --{vocab.relations[r]}--> {node_name(layer, d)}{extra}")
    return "\n".join(lines)
