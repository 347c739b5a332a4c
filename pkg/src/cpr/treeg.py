"""Deterministic tree retrieval with hint-augmented path scores.

Starting from the topic entities, every hop scores each one-step extension
of the active paths by ``v' = v - hint_weight * hint_bonus``, keeps the best
``branch_out`` extensions per path, then the best ``active_set`` overall.
The returned pool is the union of the active sets of all hops, so answers
at any depth up to ``max_hop`` stay reachable.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .kg import ConfigError, KnowledgeGraph, Path, Query
from .rcvnet import PathScorer

log = logging.getLogger(__name__)


@dataclass
class TreeGConfig:
    branch_out: int = 32
    active_set: int = 32
    max_hop: int = 2
    hint_weight: float = 0.1

    def __post_init__(self):
        if self.branch_out < 1 or self.active_set < 1 or self.max_hop < 1:
            raise ConfigError("branch_out, active_set and max_hop must all be >= 1")
        if self.hint_weight < 0:
            raise ConfigError("hint_weight must be >= 0")


@dataclass(frozen=True)
class ScoredPath:
    path: Path
    v: float
    hint_bonus: float
    v_prime: float

    @property
    def terminal(self) -> int:
        return self.path.terminal


def score_hinted(v, bonus, beta):
    if np.any(np.asarray(beta) < 0):
        raise ConfigError("hint weight must be >= 0")
    return v - beta * bonus


class HintMatcher:
    """Per-relation best similarity to a hint set."""

    def __init__(self, scorer: PathScorer, hint_set):
        self.hints = sorted(hint_set)
        rel_emb = scorer._rel_emb
        if self.hints:
            H = np.stack([scorer.provider.embed_text(h) for h in self.hints])
            self.best = np.clip(rel_emb @ H.T, -1.0, 1.0).max(axis=1)
        else:
            self.best = np.zeros(len(rel_emb))

    def bonus(self, relations) -> float:
        if not self.hints:
            return 0.0
        return float(sum(self.best[r] for r in relations))


def hint_bonus(scorer: PathScorer, p: Path, hint_set) -> float:
    """Sum over the path's relations of the best similarity to any hint."""
    return HintMatcher(scorer, hint_set).bonus(p.relations)


def _rank(items):
    # items: (v_prime, path, ...) ; ties broken by path id order
    return sorted(items, key=lambda it: (it[0], it[1].sort_key()))


def retrieve(g: KnowledgeGraph, q: Query, scorer: PathScorer, hint_set=frozenset(),
             cfg: TreeGConfig | None = None) -> list[ScoredPath]:
    cfg = cfg or TreeGConfig()
    topics = [e for e in sorted(set(q.topic_entities)) if 0 <= e < g.n_entities]
    if not topics:
        log.warning("query %s: no topic entity resolves in the graph", q.id)
        return []
    matcher = HintMatcher(scorer, hint_set if cfg.hint_weight > 0 else ())
    cache: dict[tuple, tuple[float, float, float]] = {}
    active = [Path(e) for e in topics]
    pool: list[ScoredPath] = []
    for _ in range(cfg.max_hop):
        expansions = []
        fresh = set()
        for p in active:
            nb = g.neighbors(p.terminal)
            expansions.append(nb)
            rels = p.relations
            for r in {r for r, _ in nb}:
                seq = rels + (r,)
                if seq not in cache:
                    fresh.add(seq)
        if fresh:
            seqs = sorted(fresh)
            v = scorer.score(q.question, seqs)
            for seq, vi in zip(seqs, v):
                b = matcher.bonus(seq)
                cache[seq] = (float(vi), b, float(score_hinted(vi, b, cfg.hint_weight)))
        candidates = []
        for p, nb in zip(active, expansions):
            local = []
            for r, e in nb:
                child = Path(p.origin, p.steps + ((r, e),))
                v, b, vp = cache[child.relations]
                local.append((vp, child, v, b))
            candidates.extend(_rank(local)[: cfg.branch_out])
        assert len(candidates) <= len(active) * cfg.branch_out
        if not candidates:
            break
        top = _rank(candidates)[: cfg.active_set]
        pool.extend(ScoredPath(path, v, b, vp) for vp, path, v, b in top)
        active = [path for _, path, _, _ in top]
    assert len(pool) <= cfg.max_hop * cfg.active_set
    return pool


def retrieve_all(g, queries, scorer, hints_for, cfg=None, workers=1) -> dict[str, list[ScoredPath]]:
    """Retrieve pools for many queries; ``hints_for(query) -> hint set``."""
    def one(q):
        return q.id, retrieve(g, q, scorer, hints_for(q), cfg)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(one, queries))
    else:
        results = [one(q) for q in queries]
    return dict(sorted(results))


def pool_to_record(g: KnowledgeGraph, qid: str, pool) -> dict:
    return {
        "query_id": qid,
        "paths": [
            {"path": sp.path.to_labels(g), "v": sp.v, "hint_bonus": sp.hint_bonus, "v_prime": sp.v_prime}
            for sp in pool
        ],
    }


def save_pools(path, g, pools: dict[str, list[ScoredPath]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid in sorted(pools):
            fh.write(json.dumps(pool_to_record(g, qid, pools[qid]), ensure_ascii=False) + "\n")


def load_pools(path, g) -> dict[str, list[ScoredPath]]:
    pools = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            pools[rec["query_id"]] = [
                ScoredPath(Path.from_labels(g, it["path"]), float(it["v"]), float(it["hint_bonus"]),
                           float(it["v_prime"]))
                for it in rec["paths"]
            ]
    return pools
