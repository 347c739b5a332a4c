"""Knowledge-graph storage, reasoning paths and the query/dataset model.

Entities and relations are interned to dense integer ids in sorted label
order. Triples are deduplicated at load time and the adjacency of every
head entity is kept sorted by ``(relation id, tail id)`` so that expansion
order never depends on the input order of duplicates.
"""

from __future__ import annotations

import io
import json
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path as FsPath

import numpy as np


class GraphError(Exception):
    """Base class for graph and dataset errors."""


class GraphLoadError(GraphError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyGraphError(GraphLoadError):
    pass


class LookupFailure(GraphError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class PathError(GraphError):
    """Raised for extensions that are not graph edges."""


class HopBudgetError(PathError):
    pass


class ConfigError(ValueError):
    pass


class Vocabulary:
    """Bijective label <-> dense id table."""

    def __init__(self, labels: Iterable[str] = ()):
        self._labels: list[str] = []
        self._ids: dict[str, int] = {}
        for label in labels:
            self.intern(label)

    def intern(self, label: str) -> int:
        idx = self._ids.get(label)
        if idx is None:
            idx = len(self._labels)
            self._labels.append(label)
            self._ids[label] = idx
        return idx

    def id(self, label: str) -> int:
        try:
            return self._ids[label]
        except KeyError:
            raise LookupFailure(f"unknown label {label!r}") from None

    def label(self, idx: int) -> str:
        if not 0 <= idx < len(self._labels):
            raise LookupFailure(f"unknown id {idx}")
        return self._labels[idx]

    def get(self, label, default=None):
        return self._ids.get(label, default)

    def __contains__(self, label) -> bool:
        return label in self._ids

    def __len__(self) -> int:
        return len(self._labels)

    @property
    def labels(self) -> list[str]:
        return list(self._labels)


@dataclass(frozen=True)
class Triple:
    head: int
    relation: int
    tail: int


class KnowledgeGraph:
    """Immutable triple store with a head-indexed CSR adjacency.

    Parameters
    ----------
    entities, relations : Vocabulary
        Label tables. Every id referenced by ``triples`` must resolve.
    triples : array-like of shape (n, 3)
        ``(head, relation, tail)`` id rows. Duplicates are removed.
    """

    def __init__(self, entities: Vocabulary, relations: Vocabulary, triples):
        arr = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        if len(arr):
            if arr[:, [0, 2]].max() >= len(entities) or arr[:, 1].max() >= len(relations):
                raise GraphLoadError("triple references an unknown id")
            if arr.min() < 0:
                raise GraphLoadError("negative id in triple")
            arr = np.unique(arr, axis=0)  # sorts by (head, relation, tail)
        self.entities = entities
        self.relations = relations
        self.triples = arr
        self.triples.setflags(write=False)
        counts = np.bincount(arr[:, 0], minlength=len(entities)) if len(arr) else np.zeros(len(entities), np.int64)
        self._offsets = np.concatenate([[0], np.cumsum(counts)])
        self._adj_cache: dict[int, tuple[tuple[int, int], ...]] = {}
        self._edges = {(int(h), int(r), int(t)) for h, r, t in arr}

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    def __len__(self) -> int:
        return len(self.triples)

    def has_edge(self, head: int, relation: int, tail: int) -> bool:
        return (head, relation, tail) in self._edges

    def neighbors(self, e: int) -> tuple[tuple[int, int], ...]:
        """Outgoing ``(relation, tail)`` pairs of ``e`` sorted by ids."""
        cached = self._adj_cache.get(e)
        if cached is not None:
            return cached
        if not 0 <= e < self.n_entities:
            raise LookupFailure(f"unknown entity id {e}")
        lo, hi = self._offsets[e], self._offsets[e + 1]
        block = self.triples[lo:hi, 1:]
        out = tuple((int(r), int(t)) for r, t in block)
        self._adj_cache[e] = out
        return out

    def out_degree(self, e: int) -> int:
        return int(self._offsets[e + 1] - self._offsets[e])

    def available_relations(self, p: "Path") -> frozenset[int]:
        return frozenset(r for r, _ in self.neighbors(p.terminal))

    def tails(self, e: int, r: int) -> list[int]:
        return [t for rr, t in self.neighbors(e) if rr == r]

    def entity_id(self, label: str) -> int:
        return self.entities.id(label)

    def relation_id(self, label: str) -> int:
        return self.relations.id(label)

    def to_tsv(self) -> str:
        """Serialize in canonical (sorted id) order."""
        ent, rel = self.entities.labels, self.relations.labels
        buf = io.StringIO()
        for h, r, t in self.triples:
            buf.write(f"{ent[h]}\t{rel[r]}\t{ent[t]}\n")
        return buf.getvalue()

    def save_tsv(self, path) -> None:
        FsPath(path).write_text(self.to_tsv(), encoding="utf-8")


def load_graph(records) -> KnowledgeGraph:
    """Build a graph from an iterable of TSV lines or ``(h, r, t)`` tuples.

    Ids are assigned in sorted label order, so the result does not depend on
    line order and ``load_graph(g.to_tsv())`` reproduces ``g``. Blank lines
    are skipped. A record with other than three non-empty fields raises
    :class:`GraphLoadError` carrying the 1-based line number.
    """
    rows = []
    for lineno, rec in enumerate(records, start=1):
        if isinstance(rec, str):
            line = rec.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split("\t")
        else:
            fields = list(rec)
        if len(fields) != 3 or any(not str(f).strip() for f in fields):
            raise GraphLoadError(f"expected 3 non-empty tab-separated fields, got {fields!r}", lineno)
        rows.append(tuple(str(f).strip() for f in fields))
    if not rows:
        raise EmptyGraphError("graph input contains no triples")
    entities = Vocabulary(sorted({h for h, _, _ in rows} | {t for _, _, t in rows}))
    relations = Vocabulary(sorted({r for _, r, _ in rows}))
    ids = [(entities.id(h), relations.id(r), entities.id(t)) for h, r, t in rows]
    return KnowledgeGraph(entities, relations, ids)


def read_graph(path) -> KnowledgeGraph:
    with open(path, encoding="utf-8") as fh:
        return load_graph(fh)


# -- paths -----------------------------------------------------------------


@dataclass(frozen=True, order=False)
class Path:
    """A topic entity followed by ``(relation, entity)`` steps."""

    origin: int
    steps: tuple[tuple[int, int], ...] = ()

    @property
    def hops(self) -> int:
        return len(self.steps)

    @property
    def terminal(self) -> int:
        return self.steps[-1][1] if self.steps else self.origin

    @property
    def relations(self) -> tuple[int, ...]:
        return tuple(r for r, _ in self.steps)

    @property
    def last_relation(self) -> int:
        if not self.steps:
            raise PathError("zero-step path has no relation")
        return self.steps[-1][0]

    def prefix(self, hops: int) -> "Path":
        return Path(self.origin, self.steps[:hops])

    def sort_key(self) -> tuple:
        flat = tuple(x for step in self.steps for x in step)
        return (len(self.steps), self.origin, flat)

    def to_labels(self, g: KnowledgeGraph) -> list[str]:
        out = [g.entities.label(self.origin)]
        for r, e in self.steps:
            out += [g.relations.label(r), g.entities.label(e)]
        return out

    @classmethod
    def from_labels(cls, g: KnowledgeGraph, labels: Sequence[str]) -> "Path":
        if len(labels) % 2 != 1:
            raise PathError(f"path label list must have odd length, got {len(labels)}")
        origin = g.entity_id(labels[0])
        steps = tuple(
            (g.relation_id(labels[i]), g.entity_id(labels[i + 1])) for i in range(1, len(labels), 2)
        )
        p = cls(origin, steps)
        validate_path(g, p)
        return p


def terminal(p: Path) -> int:
    return p.terminal


def validate_path(g: KnowledgeGraph, p: Path, max_hop: int | None = None) -> None:
    if max_hop is not None and p.hops > max_hop:
        raise HopBudgetError(f"path has {p.hops} hops, budget is {max_hop}")
    prev = p.origin
    for r, e in p.steps:
        if not g.has_edge(prev, r, e):
            raise PathError(f"({prev}, {r}, {e}) is not an edge of the graph")
        prev = e


def extend(g: KnowledgeGraph, p: Path, r: int, e: int, max_hop: int | None = None) -> Path:
    if max_hop is not None and p.hops >= max_hop:
        raise HopBudgetError(f"cannot extend a {p.hops}-hop path past max_hop={max_hop}")
    if not g.has_edge(p.terminal, r, e):
        raise PathError(f"({p.terminal}, {r}, {e}) is not an edge of the graph")
    return Path(p.origin, p.steps + ((r, e),))


def neighbors(g: KnowledgeGraph, e: int):
    return g.neighbors(e)


def available_relations(g: KnowledgeGraph, p: Path) -> frozenset[int]:
    return g.available_relations(p)


# -- queries ---------------------------------------------------------------


@dataclass(frozen=True)
class Query:
    id: str
    question: str
    topic_entities: tuple[int, ...]
    answers: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        if not self.topic_entities:
            raise GraphError(f"query {self.id!r} has no topic entity")


def query_from_record(g: KnowledgeGraph, rec: dict, require_answers=True) -> Query:
    try:
        topics = tuple(sorted({g.entity_id(lbl) for lbl in rec["topic_entities"]}))
        answers = frozenset(g.entity_id(lbl) for lbl in rec.get("answers", ()))
        q = Query(str(rec["id"]), str(rec["question"]), topics, answers)
    except KeyError as exc:
        if isinstance(exc, LookupFailure):
            raise
        raise GraphLoadError(f"query record missing field {exc}") from None
    if require_answers and not q.answers:
        raise GraphError(f"query {q.id!r} has no answers")
    return q


def query_to_record(g: KnowledgeGraph, q: Query) -> dict:
    return {
        "id": q.id,
        "question": q.question,
        "topic_entities": [g.entities.label(e) for e in q.topic_entities],
        "answers": sorted(g.entities.label(e) for e in q.answers),
    }


def load_queries(g: KnowledgeGraph, lines: Iterable[str], require_answers=True) -> list[Query]:
    out = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise GraphLoadError(f"invalid JSON: {exc.msg}", lineno) from None
        out.append(query_from_record(g, rec, require_answers))
    return out


def read_queries(g: KnowledgeGraph, path, require_answers=True) -> list[Query]:
    with open(path, encoding="utf-8") as fh:
        return load_queries(g, fh, require_answers)


def write_queries(g: KnowledgeGraph, queries: Iterable[Query], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q in queries:
            fh.write(json.dumps(query_to_record(g, q), ensure_ascii=False) + "\n")


# -- ground truth ------------------------------------------------------------


def ground_truth_paths(g: KnowledgeGraph, q: Query, max_hop: int, cap: int) -> list[Path]:
    """Breadth-first enumeration of 1..max_hop hop paths ending in an answer.

    Paths are walks (entities may repeat). Output order is hop count, then
    origin, then the flattened ``(relation, entity)`` ids; at most ``cap``
    paths are returned.
    """
    if max_hop < 1 or cap < 1:
        raise ConfigError("max_hop and cap must be >= 1")
    found: list[Path] = []
    frontier = [Path(e) for e in sorted(set(q.topic_entities))]
    for _ in range(max_hop):
        nxt = []
        for p in frontier:
            for r, e in g.neighbors(p.terminal):
                child = Path(p.origin, p.steps + ((r, e),))
                if e in q.answers:
                    found.append(child)
                    if len(found) >= cap:
                        return found
                nxt.append(child)
        frontier = nxt
        if not frontier:
            break
    return found


def shortest_answer_depth(g: KnowledgeGraph, q: Query, max_hop: int) -> int | None:
    """Hop count of the closest answer within ``max_hop``, via entity BFS."""
    seen = set(q.topic_entities)
    layer = set(q.topic_entities)
    for depth in range(1, max_hop + 1):
        nxt = set()
        for e in layer:
            for _, t in g.neighbors(e):
                if t in q.answers:
                    return depth
                if t not in seen:
                    seen.add(t)
                    nxt.add(t)
        layer = nxt
        if not layer:
            return None
    return None


# -- splits ----------------------------------------------------------------


@dataclass
class DatasetSplit:
    train: list[Query]
    calibration: list[Query]
    test: list[Query] = field(default_factory=list)

    def __post_init__(self):
        ids = [set(q.id for q in part) for part in (self.train, self.calibration, self.test)]
        if ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2]:
            raise GraphError("dataset split parts overlap")


def split_dataset(queries: Sequence[Query], cal_fraction=None, seed=0, *, cal_count=None, test=()) -> DatasetSplit:
    """Hold out a seeded uniform sample of ``queries`` for calibration.

    Exactly one of ``cal_fraction`` (rounded half-to-even) or ``cal_count``
    must be given. Both parts keep the input order.
    """
    n = len(queries)
    if n < 2:
        raise ConfigError("need at least two queries to split")
    if (cal_fraction is None) == (cal_count is None):
        raise ConfigError("give exactly one of cal_fraction or cal_count")
    if cal_count is None:
        if not 0.0 < cal_fraction < 1.0:
            raise ConfigError(f"cal_fraction must lie in (0, 1), got {cal_fraction}")
        cal_count = int(round(cal_fraction * n))
    if not 1 <= cal_count < n:
        raise ConfigError(f"calibration count {cal_count} invalid for {n} queries")
    rng = np.random.default_rng(seed)
    chosen = set(rng.choice(n, size=cal_count, replace=False).tolist())
    cal = [q for i, q in enumerate(queries) if i in chosen]
    train = [q for i, q in enumerate(queries) if i not in chosen]
    return DatasetSplit(train, cal, list(test))


def reachability(g: KnowledgeGraph, queries: Sequence[Query], max_hop: int) -> float:
    if not queries:
        return math.nan
    hit = sum(shortest_answer_depth(g, q, max_hop) is not None for q in queries)
    return hit / len(queries)
