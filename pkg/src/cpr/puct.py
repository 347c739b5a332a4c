"""PUCT-guided exploration that collects relation priors and training pairs.

Each training query gets a fresh visit-count table. Rollouts pick relations
with the PUCT rule, move to a seeded-uniform tail of the chosen relation and
stop at the first answer hit, a dead end, or the hop budget. Outcomes feed a
global Beta-Bernoulli success prior per relation.
"""

from __future__ import annotations

import json
import math
import zlib
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .embed import EmbeddingProvider, relation_text, similarity
from .kg import ConfigError, KnowledgeGraph, Path, Query, ground_truth_paths


class ContractError(ValueError):
    pass


@dataclass
class RolloutConfig:
    c_puct: float = 2.0
    rollouts_per_query: int = 32
    max_hop: int = 2
    temperature: float = 1.0

    def __post_init__(self):
        if self.c_puct < 0:
            raise ConfigError("c_puct must be >= 0")
        if self.rollouts_per_query < 1:
            raise ConfigError("rollouts_per_query must be >= 1")
        if self.max_hop < 1:
            raise ConfigError("max_hop must be >= 1")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")


@dataclass
class PairCaps:
    positives: int = 8
    neg_per_pos: int = 16


class BetaPrior:
    """Per-relation Beta(alpha, beta) counts, all starting at (1, 1)."""

    def __init__(self):
        self._counts: dict[int, list[float]] = {}

    def get(self, r: int) -> tuple[float, float]:
        a, b = self._counts.get(r, (1.0, 1.0))
        return float(a), float(b)

    def record(self, r: int, success: bool) -> None:
        cell = self._counts.setdefault(r, [1.0, 1.0])
        cell[0 if success else 1] += 1.0

    def rho(self, r: int) -> float:
        a, b = self.get(r)
        return a / (a + b)

    def relations(self) -> list[int]:
        return sorted(self._counts)

    def total_increments(self) -> float:
        return sum(a + b - 2.0 for a, b in self._counts.values())

    def merge(self, delta: "BetaPrior") -> None:
        for r in delta.relations():
            a, b = delta.get(r)
            cell = self._counts.setdefault(r, [1.0, 1.0])
            cell[0] += a - 1.0
            cell[1] += b - 1.0

    def __eq__(self, other):
        return isinstance(other, BetaPrior) and {
            r: self.get(r) for r in self.relations()
        } == {r: other.get(r) for r in other.relations()}

    def to_tsv(self, g: KnowledgeGraph) -> str:
        lines = []
        for r in self.relations():
            a, b = self.get(r)
            lines.append(f"{g.relations.label(r)}\t{a!r}\t{b!r}\n")
        return "".join(lines)

    def save(self, path, g: KnowledgeGraph) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_tsv(g))

    @classmethod
    def load(cls, path, g: KnowledgeGraph) -> "BetaPrior":
        prior = cls()
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                fields = line.rstrip("\n").split("\t")
                if len(fields) != 3:
                    raise ValueError(f"line {lineno}: expected relation<TAB>alpha<TAB>beta")
                a, b = float(fields[1]), float(fields[2])
                if a < 1 or b < 1:
                    raise ValueError(f"line {lineno}: Beta counts must be >= 1")
                prior._counts[g.relation_id(fields[0])] = [a, b]
        return prior


def rho(beta: BetaPrior, r: int) -> float:
    return beta.rho(r)


class NodeStats:
    """Visit counts N(p, r) and reward sums W(p, r) keyed by relation prefix."""

    def __init__(self):
        self._n: dict[tuple, int] = defaultdict(int)
        self._w: dict[tuple, float] = defaultdict(float)

    def n(self, sig, r) -> int:
        return self._n.get((sig, r), 0)

    def w(self, sig, r) -> float:
        return self._w.get((sig, r), 0.0)

    def q(self, sig, r) -> float:
        n = self.n(sig, r)
        return self.w(sig, r) / n if n > 0 else 0.0

    def n_parent(self, sig, candidates) -> int:
        return sum(self.n(sig, r) for r in candidates)

    def visit(self, sig, r, reward) -> None:
        self._n[(sig, r)] += 1
        self._w[(sig, r)] += reward

    def cells(self):
        return {k: (self._n[k], self._w[k]) for k in self._n}


def softmax(scores, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(scores, dtype=np.float64) / temperature
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def semantic_prior(provider: EmbeddingProvider, question: str, g: KnowledgeGraph, p: Path,
                   candidates, temperature: float = 1.0) -> np.ndarray:
    """Softmax over query similarity to each candidate plus to the path so far.

    ``candidates`` must be non-empty; the returned probabilities follow its
    order.
    """
    candidates = list(candidates)
    if not candidates:
        raise ContractError("semantic_prior needs at least one candidate relation")
    q_emb = provider.embed_text(question)
    s_path = similarity(q_emb, provider.embed_text(relation_text(g, p.relations)))
    raw = [similarity(q_emb, provider.embed_text(g.relations.label(r))) + s_path for r in candidates]
    return softmax(raw, temperature)


def puct_score(q: float, prior: float, n_parent: int, n: int, c_puct: float) -> float:
    return q + c_puct * prior * math.sqrt(n_parent) / (1 + n)


def puct_select(stats: NodeStats, sig, prior, candidates, c_puct: float) -> int:
    """Relation maximizing the PUCT score.

    Ties go to the higher prior, then to the lower relation id. With no
    visits yet every score is zero, so the first move is prior-greedy.
    """
    candidates = list(candidates)
    if not candidates:
        raise ContractError("puct_select needs at least one candidate relation")
    n_parent = stats.n_parent(sig, candidates)
    best, best_key = None, None
    for r, pr in zip(candidates, prior):
        pr = float(pr)
        key = (puct_score(stats.q(sig, r), pr, n_parent, stats.n(sig, r), c_puct), pr, -r)
        if best_key is None or key > best_key:
            best, best_key = r, key
    return best


def rollout(g: KnowledgeGraph, q: Query, stats: NodeStats, provider: EmbeddingProvider,
            cfg: RolloutConfig, rng: np.random.Generator) -> tuple[Path, int]:
    """One PUCT descent. Returns the walked path and its 0/1 reward."""
    topics = sorted(q.topic_entities)
    p = Path(topics[int(rng.integers(len(topics)))])
    while p.hops < cfg.max_hop:
        cands = sorted(g.available_relations(p))
        if not cands:
            break
        prior = semantic_prior(provider, q.question, g, p, cands, cfg.temperature)
        r = puct_select(stats, p.relations, prior, cands, cfg.c_puct)
        tails = g.tails(p.terminal, r)
        e = tails[int(rng.integers(len(tails)))]
        p = Path(p.origin, p.steps + ((r, e),))
        if e in q.answers:
            break
    reward = int(p.hops > 0 and p.terminal in q.answers)
    return p, reward


def backup(stats: NodeStats, path: Path, reward: int) -> None:
    rels = path.relations
    for i, r in enumerate(rels):
        stats.visit(rels[:i], r, reward)


def update_beta(beta: BetaPrior, path: Path, reward: int) -> None:
    # a relation repeated within one rollout is counted once
    for r in sorted(set(path.relations)):
        beta.record(r, bool(reward))


@dataclass
class PathPairSet:
    query_id: str
    positives: list[Path] = field(default_factory=list)
    negatives: list[Path] = field(default_factory=list)
    pairs: list[tuple[int, int]] = field(default_factory=list)
    skipped: bool = False
    reason: str = ""

    def to_records(self, g: KnowledgeGraph) -> list[dict]:
        by_pos = defaultdict(list)
        for i, j in self.pairs:
            by_pos[i].append(j)
        return [
            {
                "query_id": self.query_id,
                "positive": p.to_labels(g),
                "negatives": [self.negatives[j].to_labels(g) for j in by_pos[i]],
            }
            for i, p in enumerate(self.positives)
        ]


def collect_pairs(g: KnowledgeGraph, q: Query, max_hop: int, caps: PairCaps | None = None,
                  seed=0) -> PathPairSet:
    """Positive paths into the answer set and last-hop deviations from them."""
    caps = caps or PairCaps()
    out = PathPairSet(q.id)
    if not q.answers:
        out.skipped, out.reason = True, "no answers"
        return out
    positives = ground_truth_paths(g, q, max_hop, caps.positives)
    if not positives:
        out.skipped, out.reason = True, "no positive path"
        return out
    rng = np.random.default_rng([seed & 0xFFFFFFFF, zlib.crc32(q.id.encode())])
    neg_index: dict[Path, int] = {}
    for i, pos in enumerate(positives):
        pre = pos.prefix(pos.hops - 1)
        options = [
            (r, e) for r, e in g.neighbors(pre.terminal)
            if e not in q.answers and (r, e) != pos.steps[-1]
        ]
        if len(options) > caps.neg_per_pos:
            keep = np.sort(rng.choice(len(options), size=caps.neg_per_pos, replace=False))
            options = [options[k] for k in keep]
        for step in options:
            neg = Path(pre.origin, pre.steps + (step,))
            j = neg_index.get(neg)
            if j is None:
                j = neg_index[neg] = len(out.negatives)
                out.negatives.append(neg)
            out.pairs.append((i, j))
    out.positives = positives
    if not out.pairs:
        out.skipped, out.reason = True, "no deviating last-hop edge"
    return out


def _query_rng(seed: int, qid: str) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFF, zlib.crc32(qid.encode()), 1])


def explore_query(g, q, provider, cfg: RolloutConfig, seed=0):
    """Run all rollouts for one query; returns (beta delta, stats, log)."""
    stats = NodeStats()
    delta = BetaPrior()
    rng = _query_rng(seed, q.id)
    log = []
    for _ in range(cfg.rollouts_per_query):
        path, reward = rollout(g, q, stats, provider, cfg, rng)
        backup(stats, path, reward)
        update_beta(delta, path, reward)
        log.append((path, reward))
    return delta, stats, log


@dataclass
class CollectionResult:
    prior: BetaPrior
    pair_sets: list[PathPairSet]
    n_rollouts: int = 0
    n_success: int = 0


def run_collection(g: KnowledgeGraph, train: list[Query], provider: EmbeddingProvider,
                   cfg: RolloutConfig | None = None, seed=0, caps: PairCaps | None = None,
                   workers: int = 1) -> CollectionResult:
    """Explore every training query and gather its pair set.

    Queries are processed in id order. Per-query prior deltas are merged in
    that order whatever the worker count, so results are identical.
    """
    cfg = cfg or RolloutConfig()
    caps = caps or PairCaps()
    queries = sorted(train, key=lambda q: q.id)

    def one(q):
        delta, _, log = explore_query(g, q, provider, cfg, seed)
        pairs = collect_pairs(g, q, cfg.max_hop, caps, seed)
        return delta, pairs, sum(r for _, r in log)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, queries))
    else:
        results = [one(q) for q in queries]
    prior = BetaPrior()
    pair_sets = []
    n_success = 0
    for delta, pairs, succ in results:
        prior.merge(delta)
        pair_sets.append(pairs)
        n_success += succ
    return CollectionResult(prior, pair_sets, cfg.rollouts_per_query * len(queries), n_success)


def save_pair_sets(path, g: KnowledgeGraph, pair_sets) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ps in pair_sets:
            for rec in ps.to_records(g):
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def load_pair_sets(path, g: KnowledgeGraph) -> list[PathPairSet]:
    sets: dict[str, PathPairSet] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            ps = sets.setdefault(rec["query_id"], PathPairSet(rec["query_id"]))
            i = len(ps.positives)
            ps.positives.append(Path.from_labels(g, rec["positive"]))
            for neg in rec["negatives"]:
                ps.pairs.append((i, len(ps.negatives)))
                ps.negatives.append(Path.from_labels(g, neg))
    return list(sets.values())
