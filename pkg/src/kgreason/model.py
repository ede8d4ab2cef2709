"""Forward logic message passing over reasoning graphs.

Each step runs two channels over the edges entering the new layer:

* propositional: entity-aware messages and query-conditioned edge attention;
* first-order: a GRU over the relation sequence of each path, with the
  prior node's attention flowing into the edge attention.

Edge attentions are normalised with a softmax over all edges of the layer
(per query), so node attentions form a distribution over the layer.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from . import numerics as nx
from .graph import ExpansionConfig, Layer, ReasoningGraph, expand_layer, init_reasoning_graph, prune_edges_topN
from .kg import NO_TIME, KnowledgeGraph, Query, Scenario
from .numerics import GruParams, Tensor, TimeEncoderParams


class LambdaMode(str, Enum):
    DYNAMIC = "dynamic"
    FIXED_0 = "fixed-0"
    FIXED_1 = "fixed-1"
    GLOBAL = "global-scalar"


POOLING_MODES = ("mean", "sum", "count")


@dataclass
class ModelConfig:
    n_entities: int
    n_relations: int
    d: int = 16
    d_t: int = 8
    L: int = 3
    temporal: bool = False
    inductive: bool = False
    lambda_mode: LambdaMode = LambdaMode.DYNAMIC
    dtype: str = "float64"
    # how incoming messages become a node embedding: "mean" divides the
    # attention-weighted sum by the node's attention, "sum" leaves it scaled
    pooling: str = "count"

    def __post_init__(self):
        self.lambda_mode = LambdaMode(self.lambda_mode)
        if self.pooling not in POOLING_MODES:
            raise ValueError(f"pooling must be one of {POOLING_MODES}")
        if self.d < 1 or self.L < 1 or (self.temporal and self.d_t < 1):
            raise ValueError("d, L (and d_t for temporal graphs) must be positive")
        if self.inductive and self.lambda_mode != LambdaMode.FIXED_1:
            raise ValueError("the inductive scenario runs the first-order channel only (lambda-mode fixed-1)")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["lambda_mode"] = self.lambda_mode.value
        return out


class ModelParams:
    """Named trainable tensors.

    The second projection called W5 in the scoring formula is stored as
    ``W_out``; the per-layer first-order attention heads are ``W5.<l>``.
    """

    def __init__(self, cfg: ModelConfig, tensors: dict[str, Tensor]):
        self.cfg = cfg
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def values(self) -> list[Tensor]:
        return list(self.tensors.values())

    def items(self):
        return self.tensors.items()

    @property
    def time(self) -> TimeEncoderParams | None:
        if not self.cfg.temporal:
            return None
        return TimeEncoderParams(self["time_w"], self["time_b"])

    @property
    def gru(self) -> GruParams:
        return GruParams(self["gru.w_in"], self["gru.w_hid"], self["gru.b"])

    def shapes(self) -> dict[str, tuple]:
        return {k: tuple(v.shape) for k, v in self.tensors.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, {k: Tensor(v.data.copy(), requires_grad=True, name=k)
                                      for k, v in self.tensors.items()})

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def save(self, path, meta: dict | None = None):
        nx.save_tensors(path, self.tensors, {"model": self.cfg.to_dict(), **(meta or {})})

    @classmethod
    def load(cls, path, cfg: ModelConfig | None = None) -> "ModelParams":
        if cfg is None:
            _, meta = nx.load_tensors(path)
            if "model" not in meta:
                raise nx.CheckpointError("checkpoint lacks model configuration")
            cfg = ModelConfig(**meta["model"])
        expected = param_shapes(cfg)
        arrays, _ = nx.load_tensors(path, expected)
        dtype = np.dtype(cfg.dtype)
        return cls(cfg, {k: Tensor(arrays[k].astype(dtype), requires_grad=True, name=k) for k in expected})


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    d, d_t = cfg.d, (cfg.d_t if cfg.temporal else 0)
    shapes: dict[str, tuple] = {}
    if cfg.inductive:
        shapes["anon_entity"] = (1, d)
    else:
        shapes["entity"] = (cfg.n_entities, d)
    shapes["relation"] = (cfg.n_relations, d)
    if cfg.temporal:
        shapes["time_w"] = (d_t,)
        shapes["time_b"] = (d_t,)
    shapes["W_n"] = (d + d_t, d)
    shapes["W_q"] = (2 * d + d_t, d)
    for l in range(cfg.L):
        shapes[f"W1.{l}"] = (d, d)
        shapes[f"W2.{l}"] = (d, d)
        shapes[f"W3.{l}"] = (3 * d, d)
        shapes[f"W4.{l}"] = (2 * d, 1)
        shapes[f"W5.{l}"] = (d, 1)
    shapes["gru.w_in"] = (d, 3 * d)
    shapes["gru.w_hid"] = (d, 3 * d)
    shapes["gru.b"] = (3 * d,)
    shapes["W_lambda"] = (3 * d, 1)
    if cfg.lambda_mode == LambdaMode.GLOBAL:
        shapes["lambda_logit"] = (1,)
    shapes["W_out"] = (d, 1)
    shapes["y0"] = (d,)
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator | int = 0) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).

    Fan-in is the leading dimension; embedding tables and y0 use ``d``.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    dtype = np.dtype(cfg.dtype)
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        fan_in = cfg.d if name in ("entity", "anon_entity", "relation", "y0") else shape[0]
        bound = 1.0 / np.sqrt(fan_in)
        tensors[name] = Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype),
                               requires_grad=True, name=name)
    return ModelParams(cfg, tensors)


# ---------------------------------------------------------------------------
# pieces of the forward pass


def _const(a, dtype) -> Tensor:
    return Tensor(np.asarray(a, dtype=dtype))


def entity_features(p: ModelParams, ents: np.ndarray) -> Tensor:
    if p.cfg.inductive:
        return nx.take(p["anon_entity"], np.zeros(len(ents), dtype=np.int64))
    return nx.take(p["entity"], ents)


def time_features(p: ModelParams, kg: KnowledgeGraph, time_ids: np.ndarray) -> Tensor | None:
    """Cosine features per row; rows without a time get zeros."""
    if not p.cfg.temporal:
        return None
    time_ids = np.asarray(time_ids, dtype=np.int64)
    has = time_ids != NO_TIME
    if has.all():
        return nx.time_encode(kg.vocab.time_offsets[time_ids], p.time)
    if not has.any():
        return _const(np.zeros((len(time_ids), p.cfg.d_t)), p["time_w"].data.dtype)
    enc = nx.time_encode(kg.vocab.time_offsets[time_ids[has]], p.time)
    return nx.segment_sum(enc, np.flatnonzero(has), len(time_ids))


def node_base_features(p: ModelParams, kg: KnowledgeGraph, layer: Layer) -> Tensor:
    """W_n [h_e || e_t] for every node of a (non-root) layer."""
    h = entity_features(p, layer.node_ent)
    tf = time_features(p, kg, layer.node_time)
    feats = h if tf is None else nx.concat([h, tf])
    return nx.matmul(feats, p["W_n"])


def embed_query(queries: Sequence[Query], p: ModelParams, kg: KnowledgeGraph) -> Tensor:
    """q = W_q [h_s || g_r || e_t] (time slice only for temporal graphs)."""
    s = np.array([q.s for q in queries], dtype=np.int64)
    r = np.array([q.r for q in queries], dtype=np.int64)
    parts = [entity_features(p, s), nx.take(p["relation"], r)]
    if p.cfg.temporal:
        t = np.array([NO_TIME if q.t is None else q.t for q in queries], dtype=np.int64)
        parts.append(time_features(p, kg, t))
    return nx.matmul(nx.concat(parts), p["W_q"])


@dataclass
class EdgeScores:
    """Unnormalised edge quantities for one step."""
    m: Tensor          # messages (E, d)
    e_raw: Tensor      # propositional attention logits in (0, 1)
    y_edge: Tensor     # first-order hidden per edge (E, d)
    b_raw: Tensor      # first-order attention after the prior's flow-in


@dataclass
class StepState:
    """Node and edge states of one layer after normalisation."""
    x: Tensor
    alpha: Tensor
    y: Tensor
    beta: Tensor
    alpha_edge: Tensor | None = None
    beta_edge: Tensor | None = None


def edge_scores(layer: Layer, l: int, prev: StepState, base: Tensor, q_vec: Tensor,
                p: ModelParams) -> EdgeScores:
    src, dst, rel = layer.edge_src, layer.edge_dst, layer.edge_rel
    g_r = nx.take(p["relation"], rel)
    m = nx.matmul(nx.concat([nx.take(prev.x, src), g_r, nx.take(base, dst)]), p[f"W3.{l}"])
    e_raw = nx.reshape(nx.sigmoid(nx.matmul(nx.concat([m, nx.take(q_vec, layer.edge_q)]), p[f"W4.{l}"])), (-1,))
    y_edge = nx.gru_cell(g_r, nx.take(prev.y, src), p.gru)
    b = nx.reshape(nx.sigmoid(nx.matmul(y_edge, p[f"W5.{l}"])), (-1,))
    b_raw = nx.mul(b, nx.take(prev.beta, src))
    return EdgeScores(m, e_raw, y_edge, b_raw)


def _pool(layer: Layer, weights: Tensor, values: Tensor, pooling: str):
    """Attention-weighted pooling of edge vectors onto their target nodes.

    Returns ``(pooled, node_weight)``; the node weight is always the plain sum
    of its in-edge weights.
    """
    node_w = nx.segment_sum(weights, layer.edge_dst, layer.n_nodes)
    pooled = nx.segment_sum(nx.mul(nx.reshape(weights, (-1, 1)), values), layer.edge_dst, layer.n_nodes)
    if pooling == "mean":
        pooled = nx.div(pooled, nx.reshape(node_w, (-1, 1)))
    elif pooling == "count":
        n_edges = np.bincount(layer.edge_q, minlength=int(layer.node_q.max()) + 1)[layer.node_q]
        pooled = nx.mul(pooled, n_edges.astype(np.float64).reshape(-1, 1))
    return pooled, node_w


def propositional_step(layer: Layer, l: int, scores: EdgeScores, base: Tensor, n_queries: int,
                       p: ModelParams):
    """Normalise propositional edge attention; aggregate node embedding and attention.

    Returns ``(x_nodes, alpha_nodes, alpha_edges)``.
    """
    if layer.n_edges == 0:
        raise ValueError("cannot normalise a layer without edges")
    alpha_e = nx.grouped_softmax(scores.e_raw, layer.edge_q, n_queries)
    msg, alpha = _pool(layer, alpha_e, nx.matmul(scores.m, p[f"W2.{l}"]), p.cfg.pooling)
    x = nx.add(nx.matmul(base, p[f"W1.{l}"]), msg)
    return x, alpha, alpha_e


def fol_step(layer: Layer, scores: EdgeScores, n_queries: int, pooling: str = "count"):
    """Normalise first-order edge attention; aggregate hidden state and attention.

    Returns ``(y_nodes, beta_nodes, beta_edges)``.
    """
    if layer.n_edges == 0:
        raise ValueError("cannot normalise a layer without edges")
    beta_e = nx.grouped_softmax(scores.b_raw, layer.edge_q, n_queries)
    y, beta = _pool(layer, beta_e, scores.y_edge, pooling)
    return y, beta, beta_e


def combine_and_score(x: Tensor, y: Tensor, alpha: Tensor, beta: Tensor, q_rows: Tensor,
                      p: ModelParams, lambda_mode: LambdaMode | None = None):
    """Mix the two channels and project to one score per row.

    Returns ``(scores, lam)`` where ``lam`` is the per-row mixing weight as a
    numpy array.
    """
    mode = LambdaMode(lambda_mode or p.cfg.lambda_mode)
    w_out = p["W_out"]
    if mode == LambdaMode.FIXED_0:
        score = nx.add(nx.reshape(nx.matmul(x, w_out), (-1,)), alpha)
        return score, np.zeros(len(alpha.data))
    if mode == LambdaMode.FIXED_1:
        score = nx.add(nx.reshape(nx.matmul(y, w_out), (-1,)), beta)
        return score, np.ones(len(beta.data))
    if mode == LambdaMode.DYNAMIC:
        lam = nx.sigmoid(nx.matmul(nx.concat([x, y, q_rows]), p["W_lambda"]))  # (n, 1)
    else:
        lam = nx.mul(nx.sigmoid(p["lambda_logit"]), _const(np.ones((len(alpha.data), 1)), x.data.dtype))
    one_minus = nx.sub(1.0, lam)
    h = nx.add(nx.mul(one_minus, x), nx.mul(lam, y))
    lam_flat = nx.reshape(lam, (-1,))
    gamma = nx.add(nx.mul(nx.sub(1.0, lam_flat), alpha), nx.mul(lam_flat, beta))
    score = nx.add(nx.reshape(nx.matmul(h, w_out), (-1,)), gamma)
    return score, lam.data.reshape(-1).copy()


@dataclass
class EntityStates:
    q: np.ndarray
    ent: np.ndarray
    x: Tensor
    y: Tensor
    alpha: Tensor
    beta: Tensor


def aggregate_entity_states(layer: Layer, state: StepState) -> EntityStates:
    """Merge nodes sharing (query, entity): attentions add, embeddings average.

    Embeddings use attention-weighted means (weights alpha for x, beta for y).
    Layers whose nodes are already unique per entity pass through untouched.
    """
    keys = np.stack([layer.node_q, layer.node_ent], axis=1)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = np.asarray(inv).reshape(-1)
    if len(uniq) == layer.n_nodes and np.array_equal(inv, np.arange(layer.n_nodes)):
        return EntityStates(layer.node_q, layer.node_ent, state.x, state.y, state.alpha, state.beta)
    n = len(uniq)
    alpha = nx.segment_sum(state.alpha, inv, n)
    beta = nx.segment_sum(state.beta, inv, n)
    x_sum = nx.segment_sum(nx.mul(nx.reshape(state.alpha, (-1, 1)), state.x), inv, n)
    y_sum = nx.segment_sum(nx.mul(nx.reshape(state.beta, (-1, 1)), state.y), inv, n)
    x = nx.div(x_sum, nx.reshape(alpha, (-1, 1)))
    y = nx.div(y_sum, nx.reshape(beta, (-1, 1)))
    return EntityStates(uniq[:, 0].copy(), uniq[:, 1].copy(), x, y, alpha, beta)


@dataclass
class ForwardResult:
    graph: ReasoningGraph
    states: list[StepState]
    scores: Tensor                 # (n_queries, n_entities); unreached entities are exactly 0
    reached: np.ndarray            # bool (n_queries, n_entities)
    entity_lambda: np.ndarray      # mixing weight per (query, reached entity) row
    entities: EntityStates
    query_vec: Tensor = field(repr=False, default=None)

    def edge_attention(self, which: str = "beta") -> list[np.ndarray]:
        key = "alpha_edge" if which == "alpha" else "beta_edge"
        out = [np.zeros(0)]
        for st in self.states[1:]:
            out.append(getattr(st, key).data.copy())
        return out

    def node_attention(self, which: str = "beta") -> list[np.ndarray]:
        return [getattr(st, which).data.copy() for st in self.states]


def forward(queries: Sequence[Query], kg: KnowledgeGraph, p: ModelParams,
            cfg: ExpansionConfig | None = None, rng: np.random.Generator | None = None,
            exclude_query_facts: bool = False, lambda_mode: LambdaMode | None = None,
            prune: bool | None = None) -> ForwardResult:
    """Build the reasoning graph for ``queries`` and score every entity.

    Top-N pruning runs only for extrapolation (or when ``prune`` forces it);
    it ranks edges by propositional attention, or by first-order attention
    when the propositional channel is switched off.
    """
    queries = list(queries)
    cfg = cfg or ExpansionConfig(L=p.cfg.L)
    if cfg.L != p.cfg.L:
        raise ValueError(f"expansion depth {cfg.L} does not match model depth {p.cfg.L}")
    mode = LambdaMode(lambda_mode or p.cfg.lambda_mode)
    rng = rng if rng is not None else np.random.default_rng(cfg.rng_seed)
    rg = init_reasoning_graph(queries, cfg.L)
    scenario = rg.scenario
    if scenario.temporal != p.cfg.temporal:
        raise ValueError(f"scenario {scenario.value} does not match the model's graph flavour")
    if kg.vocab.n_relations != p.cfg.n_relations or (not p.cfg.inductive and kg.n_entities != p.cfg.n_entities):
        raise ValueError(f"parameter shapes ({p.cfg.n_entities} entities, {p.cfg.n_relations} relations) do not "
                         f"match the graph ({kg.n_entities} entities, {kg.vocab.n_relations} relations)")
    do_prune = (scenario == Scenario.TKG_E) if prune is None else prune
    B = len(queries)
    dtype = p["relation"].data.dtype
    q_vec = embed_query(queries, p, kg)
    root = rg.layers[0]
    states = [StepState(x=entity_features(p, root.node_ent),
                        alpha=_const(np.ones(B), dtype),
                        y=nx.mul(nx.reshape(p["y0"], (1, -1)), _const(np.ones((B, 1)), dtype)),
                        beta=_const(np.ones(B), dtype))]
    for l in range(cfg.L):
        layer = expand_layer(rg, kg, cfg, rng, exclude_query_facts)
        base = node_base_features(p, kg, layer)
        sc = edge_scores(layer, l, states[-1], base, q_vec, p)
        if do_prune and _needs_prune(layer, B, cfg.N):
            key = sc.b_raw if mode == LambdaMode.FIXED_1 else sc.e_raw
            att = nx.grouped_softmax_np(key.data, layer.edge_q, B)
            layer, kept_e, kept_n = prune_edges_topN(layer, att, cfg.N)
            rg.layers[-1] = layer
            base = nx.take(base, kept_n)
            sc = EdgeScores(nx.take(sc.m, kept_e), nx.take(sc.e_raw, kept_e),
                            nx.take(sc.y_edge, kept_e), nx.take(sc.b_raw, kept_e))
        x, alpha, alpha_e = propositional_step(layer, l, sc, base, B, p)
        y, beta, beta_e = fol_step(layer, sc, B, p.cfg.pooling)
        states.append(StepState(x, alpha, y, beta, alpha_e, beta_e))

    last = rg.layers[-1]
    ents = aggregate_entity_states(last, states[-1])
    score, lam = combine_and_score(ents.x, ents.y, ents.alpha, ents.beta,
                                   nx.take(q_vec, ents.q), p, mode)
    n_e = kg.n_entities
    flat = ents.q * n_e + ents.ent
    dense = nx.reshape(nx.segment_sum(score, flat, B * n_e), (B, n_e))
    reached = np.zeros(B * n_e, dtype=bool)
    reached[flat] = True
    return ForwardResult(rg, states, dense, reached.reshape(B, n_e), lam, ents, q_vec)


def _needs_prune(layer: Layer, n_queries: int, N: int) -> bool:
    return bool(np.any(np.bincount(layer.edge_q, minlength=n_queries) > N))
