"""Loss, optimisation loop and filtered ranking evaluation."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import numerics as nx
from .fari import Rule, aggregate_rules, induce_rules, sort_rules, top_rules
from .graph import ExpansionConfig
from .kg import NO_TIME, KnowledgeGraph, Query, Scenario
from .model import LambdaMode, ModelConfig, ModelParams, forward, init_params
from .numerics import Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    L: int = 3
    M: int = 50
    N: int = 200
    d: int = 16
    d_t: int = 8
    lambda_mode: LambdaMode = LambdaMode.DYNAMIC
    seed: int = 0
    float_width: int = 64
    exclude_query_facts: bool = True
    pooling: str = "count"

    def __post_init__(self):
        self.lambda_mode = LambdaMode(self.lambda_mode)
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        for name in ("batch_size", "L", "M", "N", "d", "d_t"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.float_width not in (32, 64):
            raise ValueError("float_width must be 32 or 64")

    @property
    def dtype(self) -> str:
        return "float64" if self.float_width == 64 else "float32"

    def expansion(self) -> ExpansionConfig:
        return ExpansionConfig(L=self.L, M=self.M, N=self.N, rng_seed=self.seed)

    def model_config(self, kg: KnowledgeGraph, scenario: Scenario) -> ModelConfig:
        if scenario == Scenario.SKG_I and self.lambda_mode != LambdaMode.FIXED_1:
            raise ValueError("inductive training requires lambda-mode fixed-1")
        return ModelConfig(n_entities=kg.n_entities, n_relations=kg.vocab.n_relations, d=self.d,
                           d_t=self.d_t, L=self.L, temporal=scenario.temporal,
                           inductive=scenario == Scenario.SKG_I, lambda_mode=self.lambda_mode,
                           dtype=self.dtype, pooling=self.pooling)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["lambda_mode"] = self.lambda_mode.value
        return out


class TrainingError(RuntimeError):
    pass


def multiclass_logloss(scores: Tensor, labels: Sequence[int]) -> Tensor:
    """Sum over rows of ``-s[label] + log sum_o exp(s[o])``."""
    labels = np.asarray(labels, dtype=np.int64)
    B, n = scores.shape
    picked = nx.take(nx.reshape(scores, (-1,)), np.arange(B) * n + labels)
    return nx.total(nx.sub(nx.logsumexp_rows(scores), picked))


class Adam:
    """Adam with optional decoupled weight decay (off by default)."""

    def __init__(self, params: Sequence[Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def batch_loss(queries: Sequence[Query], kg: KnowledgeGraph, params: ModelParams, cfg: TrainConfig,
               rng: np.random.Generator, exclude_query_facts: bool | None = None) -> Tensor:
    excl = cfg.exclude_query_facts if exclude_query_facts is None else exclude_query_facts
    res = forward(queries, kg, params, cfg.expansion(), rng, exclude_query_facts=excl)
    return multiclass_logloss(res.scores, [q.label for q in queries])


@dataclass
class TrainResult:
    params: ModelParams
    losses: list[float] = field(default_factory=list)


def train(kg: KnowledgeGraph, queries: Sequence[Query], cfg: TrainConfig,
          params: ModelParams | None = None, checkpoint_dir=None,
          on_epoch: Callable[[int, float, ModelParams], None] | None = None) -> TrainResult:
    """Mini-batch Adam on the multi-class log-loss.

    Queries are shuffled uniformly each epoch.  With ``checkpoint_dir`` the
    parameters are rewritten to ``last.json`` after every epoch and the loss
    trajectory to ``loss.csv``.
    """
    queries = list(queries)
    if not queries:
        raise TrainingError("no training queries")
    if any(q.label is None for q in queries):
        raise TrainingError("training queries need labels")
    scenario = queries[0].scenario
    if params is None:
        params = init_params(cfg.model_config(kg, scenario), cfg.seed)
    opt = Adam(params.values(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    order_rng = np.random.default_rng(cfg.seed)
    graph_rng = np.random.default_rng(cfg.seed + 1)
    losses: list[float] = []
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckdir is not None:
        ckdir.mkdir(parents=True, exist_ok=True)
    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(len(queries))
        total = 0.0
        for start in range(0, len(perm), cfg.batch_size):
            batch = [queries[i] for i in perm[start:start + cfg.batch_size]]
            params.zero_grad()
            try:
                loss = batch_loss(batch, kg, params, cfg, graph_rng)
                loss.backward()
            except FloatingPointError as exc:
                raise TrainingError(f"non-finite value in epoch {epoch}, batch at {start}: {exc}") from exc
            if not math.isfinite(float(loss.data)):
                raise TrainingError(f"NaN loss in epoch {epoch}")
            opt.step()
            total += float(loss.data)
        mean = total / len(queries)
        losses.append(mean)
        log.info("epoch %d loss %.6f", epoch, mean)
        if ckdir is not None:
            meta = {"epoch": epoch, "train": cfg.to_dict()}
            params.save(ckdir / "last.json", meta)
            write_loss_csv(ckdir / "loss.csv", losses)
        if on_epoch is not None:
            on_epoch(epoch, mean, params)
    return TrainResult(params, losses)


def write_loss_csv(path, losses: Sequence[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(float(v))])


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class RankingMetrics:
    mrr: float
    hits1: float
    hits3: float
    hits10: float
    n_queries: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        return ("metric    value\n"
                f"MRR       {self.mrr:.4f}\n"
                f"Hits@1    {self.hits1:.4f}\n"
                f"Hits@3    {self.hits3:.4f}\n"
                f"Hits@10   {self.hits10:.4f}\n"
                f"queries   {self.n_queries}")


def rank_of(scores, label: int, filter_out: Iterable[int] = ()) -> float:
    """Filtered rank with ties sharing the mean position.

    rank = #{x: s_x > s_label} + #{x != label: s_x = s_label} / 2 + 1, where
    entities in ``filter_out`` are ignored.
    """
    s = np.asarray(scores, dtype=np.float64)
    filt = set(int(e) for e in filter_out)
    if label in filt:
        raise ValueError("the label itself is filtered out")
    mask = np.ones(len(s), dtype=bool)
    if filt:
        mask[list(filt)] = False
    target = s[label]
    higher = int(np.count_nonzero(s[mask] > target))
    ties = int(np.count_nonzero(s[mask] == target)) - 1
    return higher + ties / 2.0 + 1.0


def metrics_from_ranks(ranks: Sequence[float]) -> RankingMetrics:
    r = np.asarray(ranks, dtype=np.float64)
    if r.size == 0:
        raise ValueError("no queries")
    return RankingMetrics(mrr=float(np.mean(1.0 / r)), hits1=float(np.mean(r <= 1)),
                          hits3=float(np.mean(r <= 3)), hits10=float(np.mean(r <= 10)),
                          n_queries=int(r.size))


def build_filter(known_facts: np.ndarray, n_base: int) -> dict[tuple, set]:
    """Map (s, r, t) -> all true objects, including reversed facts."""
    out: dict[tuple, set] = defaultdict(set)
    for s, r, o, t in np.asarray(known_facts).reshape(-1, 4).tolist():
        out[(s, r, t)].add(o)
        out[(o, r + n_base, t)].add(s)
    return out


def query_filter(q: Query, filt: dict[tuple, set]) -> set:
    t = NO_TIME if q.t is None else q.t
    return filt.get((q.s, q.r, t), set()) - {q.label}


def score_queries(kg: KnowledgeGraph, queries: Sequence[Query], params: ModelParams,
                  cfg: TrainConfig, batch_size: int | None = None,
                  exclude_query_facts: bool = False) -> np.ndarray:
    """Dense (n_queries, n_entities) score matrix, no gradients recorded."""
    bs = batch_size or cfg.batch_size
    rng = np.random.default_rng(cfg.seed + 2)
    rows = []
    with nx.no_grad():
        for start in range(0, len(queries), bs):
            batch = list(queries[start:start + bs])
            res = forward(batch, kg, params, cfg.expansion(), rng, exclude_query_facts=exclude_query_facts)
            rows.append(res.scores.data)
    return np.concatenate(rows) if rows else np.zeros((0, kg.n_entities))


def evaluate(kg: KnowledgeGraph, queries: Sequence[Query], params: ModelParams, cfg: TrainConfig,
             known_facts: np.ndarray | None = None, exclude_query_facts: bool = False) -> RankingMetrics:
    """Filtered MRR / Hits@k of the labels of ``queries``.

    ``known_facts`` (all true ``(s, r, o, t)`` facts across splits) drives
    the filter; without it the raw setting is used.
    """
    queries = list(queries)
    if not queries:
        raise ValueError("no queries")
    scores = score_queries(kg, queries, params, cfg, exclude_query_facts=exclude_query_facts)
    filt = build_filter(known_facts, kg.vocab.n_base) if known_facts is not None else {}
    ranks = [rank_of(scores[i], q.label, query_filter(q, filt)) for i, q in enumerate(queries)]
    return metrics_from_ranks(ranks)



# ---------------------------------------------------------------------------
# rule induction from a trained model


def induce_for_queries(kg: KnowledgeGraph, queries: Sequence[Query], params: ModelParams,
                       cfg: TrainConfig, batch_size: int | None = None,
                       exclude_query_facts: bool = True) -> list[list[Rule]]:
    """Rules per query, read off the final-layer nodes of the query's answer.

    The answer is the label when present and the top-scored entity otherwise.
    Query facts are hidden by default so a rule cannot collapse to the fact
    it is asked to explain.
    """
    bs = batch_size or cfg.batch_size
    rng = np.random.default_rng(cfg.seed + 3)
    out: list[list[Rule]] = []
    with nx.no_grad():
        for start in range(0, len(queries), bs):
            batch = list(queries[start:start + bs])
            res = forward(batch, kg, params, cfg.expansion(), rng, exclude_query_facts=exclude_query_facts)
            betas = res.edge_attention("beta")
            last = res.graph.layers[-1]
            for qi, q in enumerate(batch):
                answer = q.label if q.label is not None else int(np.argmax(res.scores.data[qi]))
                nodes = np.flatnonzero((last.node_q == qi) & (last.node_ent == answer)).tolist()
                out.append(induce_rules(res.graph, betas, kg.vocab.self_id, qi, terminal_nodes=nodes))
    return out


def induce_rule_set(kg: KnowledgeGraph, queries: Sequence[Query], params: ModelParams,
                    cfg: TrainConfig, top_k: int | None = None, heads: Iterable[int] | None = None,
                    exclude_query_facts: bool = True) -> list[Rule]:
    """Rules averaged over queries sharing a head relation, top-k per head."""
    wanted = None if heads is None else set(heads)
    by_head: dict[int, list[Query]] = defaultdict(list)
    for q in queries:
        if wanted is None or q.r in wanted:
            by_head[q.r].append(q)
    rules: list[Rule] = []
    for head in sorted(by_head):
        qs = by_head[head]
        per_query = induce_for_queries(kg, qs, params, cfg, exclude_query_facts=exclude_query_facts)
        rules.extend(aggregate_rules(per_query, len(qs)))
    rules = sort_rules(rules)
    return rules if top_k is None else top_rules(rules, top_k)
