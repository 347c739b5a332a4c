"""Seeded synthetic KGQA benchmarks with known gold paths.

Relation labels are ``domain.type.prop`` triples of pseudo-words grouped in
families that share ``domain.type``. Half of every family are decoys that
never lie on a gold chain. Each query lays a fresh gold chain from a new
topic entity; every chain node also gets distractor edges into a shared
background graph. A distractor is *confusable* (a decoy from the family of
the gold relation it competes with) with probability ``confusability``,
otherwise it comes from an unrelated family. The question text names the
family tokens of every gold relation and, with probability ``mention_rate``,
its own final token, so similarity features carry signal but cannot always
tell a gold relation from a decoy of its family.

Queries are generated independently from one template distribution over a
fixed background graph, so any permutation of the query list is an equally
likely draw.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .embed import tokenize
from .kg import (
    ConfigError,
    KnowledgeGraph,
    Path,
    Query,
    Vocabulary,
    ground_truth_paths,
    load_graph,
    query_from_record,
    query_to_record,
    shortest_answer_depth,
)

_CONSONANTS = "bcdfghjklmnprstvz"
_VOWELS = "aeiou"


@dataclass
class SynthConfig:
    n_entities: int = 1000
    n_relations: int = 48
    n_queries: int = 200
    max_hop: int = 2
    min_hop: int = 1
    branching: float = 4.0
    answer_multiplicity: int = 1
    confusability: float = 0.3
    seed: int = 0
    background_degree: float = 2.0
    shared_intermediates: bool = False
    family_size: int = 4
    mention_rate: float = 0.5

    def validate(self):
        if min(self.n_entities, self.n_relations, self.n_queries, self.max_hop, self.min_hop) < 1:
            raise ConfigError("entity, relation, query and hop counts must be positive")
        if self.min_hop > self.max_hop:
            raise ConfigError("min_hop must not exceed max_hop")
        if self.branching < 1:
            raise ConfigError(f"branching must be >= 1, got {self.branching}")
        if self.answer_multiplicity < 1:
            raise ConfigError("answer_multiplicity must be >= 1")
        if not 0.0 <= self.confusability <= 1.0:
            raise ConfigError("confusability must lie in [0, 1]")
        if self.family_size < 2 or self.n_relations < 2 * self.family_size:
            raise ConfigError("need family_size >= 2 and at least two relation families")
        if not 0.0 <= self.mention_rate <= 1.0:
            raise ConfigError("mention_rate must lie in [0, 1]")
        if self.background_degree < 0:
            raise ConfigError("background_degree must be >= 0")
        return self


@dataclass
class SynthDataset:
    graph: KnowledgeGraph
    queries: list[Query]
    gold_paths: dict[str, list[Path]]
    manifest: dict = field(default_factory=dict)


def _words(rng, n):
    seen, out = set(), []
    while len(out) < n:
        k = int(rng.integers(2, 4))
        w = "".join(_CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
                    for _ in range(k))
        if w not in seen:
            seen.add(w)
            out.append(w)
    return out


@dataclass
class RelationVocab:
    labels: list[str]
    family: list[int]
    decoy: list[bool]

    def gold_eligible(self):
        return [i for i, d in enumerate(self.decoy) if not d]

    def decoys_of(self, fam):
        return [i for i, (f, d) in enumerate(zip(self.family, self.decoy)) if f == fam and d]


def relation_vocab(cfg: SynthConfig, rng) -> RelationVocab:
    n_fam = cfg.n_relations // cfg.family_size
    n = n_fam * cfg.family_size
    words = _words(rng, 2 * n_fam + n)
    labels, family, decoy = [], [], []
    for f in range(n_fam):
        dom, typ = words[2 * f], words[2 * f + 1]
        for j in range(cfg.family_size):
            labels.append(f"{dom}.{typ}.{words[2 * n_fam + f * cfg.family_size + j]}")
            family.append(f)
            decoy.append(j % 2 == 1)
    return RelationVocab(labels, family, decoy)


def question_for(topic_label: str, gold_labels, mention=None) -> str:
    """Question naming each gold relation's family, and its own token where
    ``mention`` says so (always by default)."""
    parts = []
    for i, lbl in enumerate(reversed(gold_labels)):
        toks = tokenize(lbl)
        if mention is not None and not mention[len(gold_labels) - 1 - i]:
            toks = toks[:-1]
        parts.append(" ".join(toks))
    return "what is the " + " of the ".join(parts) + f" of {topic_label}"


def generate(cfg: SynthConfig) -> SynthDataset:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    vocab = relation_vocab(cfg, rng)
    relations = Vocabulary(vocab.labels)
    entities = Vocabulary()
    triples: list[tuple[int, int, int]] = []
    background = [entities.intern(f"bg{i:05d}") for i in range(cfg.n_entities)]
    n_rel = len(vocab.labels)
    for h in background:
        for _ in range(int(rng.poisson(cfg.background_degree))):
            triples.append((h, int(rng.integers(n_rel)), background[int(rng.integers(len(background)))]))

    eligible = vocab.gold_eligible()
    n_fam = max(vocab.family) + 1
    shared_pool = [entities.intern(f"hub{i:04d}") for i in range(max(4, cfg.n_entities // 20))] \
        if cfg.shared_intermediates else []
    queries, gold = [], {}
    width = len(str(cfg.n_queries))
    for qi in range(cfg.n_queries):
        qid = f"q{qi:0{width}d}"
        depth = int(rng.integers(cfg.min_hop, cfg.max_hop + 1))
        chain = [eligible[int(rng.integers(len(eligible)))] for _ in range(depth)]
        topic = entities.intern(f"topic{qi:0{width}d}")
        nodes = [topic]
        for h in range(1, depth):
            if shared_pool:
                nodes.append(shared_pool[int(rng.integers(len(shared_pool)))])
            else:
                nodes.append(entities.intern(f"mid{qi:0{width}d}x{h}"))
        answers = [entities.intern(f"ans{qi:0{width}d}x{j}") for j in range(cfg.answer_multiplicity)]
        for h in range(depth - 1):
            triples.append((nodes[h], chain[h], nodes[h + 1]))
        for a in answers:
            triples.append((nodes[-1], chain[-1], a))
        chain_fams = {vocab.family[r] for r in chain}
        other_fams = [f for f in range(n_fam) if f not in chain_fams] or list(range(n_fam))
        for h, node in enumerate(nodes):
            n_dis = 1 + int(rng.poisson(cfg.branching - 1))
            for _ in range(n_dis):
                decoys = vocab.decoys_of(vocab.family[chain[h]])
                if rng.random() < cfg.confusability and decoys:
                    r = decoys[int(rng.integers(len(decoys)))]
                else:
                    f = other_fams[int(rng.integers(len(other_fams)))]
                    members = [i for i, ff in enumerate(vocab.family) if ff == f]
                    r = members[int(rng.integers(len(members)))]
                triples.append((node, r, background[int(rng.integers(len(background)))]))
        topic_label = entities.label(topic)
        mention = [bool(rng.random() < cfg.mention_rate) for _ in chain]
        question = question_for(topic_label, [vocab.labels[r] for r in chain], mention)
        q = Query(qid, question, (topic,), frozenset(answers))
        queries.append(q)
        steps = [(chain[h], nodes[h + 1]) for h in range(depth - 1)]
        gold[qid] = [Path(topic, tuple(steps + [(chain[-1], a)])) for a in answers]
    g = KnowledgeGraph(entities, relations, triples)
    # reload through the TSV form so ids match a graph read back from disk
    canon = load_graph(g.to_tsv().splitlines())
    queries = [query_from_record(canon, query_to_record(g, q)) for q in queries]
    gold = {qid: [Path.from_labels(canon, p.to_labels(g)) for p in ps] for qid, ps in gold.items()}
    g = canon
    manifest = {
        "generator": "cpr.synth",
        "config": asdict(cfg),
        "seed": cfg.seed,
        "n_entities": g.n_entities,
        "n_relations": g.n_relations,
        "n_triples": len(g),
        "n_queries": len(queries),
        "decoy_relations": [vocab.labels[i] for i, d in enumerate(vocab.decoy) if d],
    }
    return SynthDataset(g, queries, gold, manifest)


@dataclass
class VerifyReport:
    reachability: float
    depth_histogram: dict[int, int]
    mean_out_degree: float
    confusability: float
    passed: bool

    def to_dict(self):
        return asdict(self)


def verify(ds: SynthDataset, max_hop: int | None = None) -> VerifyReport:
    g = ds.graph
    max_hop = max_hop or ds.manifest.get("config", {}).get("max_hop", 4)
    hist: Counter = Counter()
    reached = 0
    shared = total = 0
    for q in ds.queries:
        depth = shortest_answer_depth(g, q, max_hop)
        if depth is not None and ground_truth_paths(g, q, max_hop, 1):
            reached += 1
            hist[depth] += 1
        else:
            hist[0] += 1
        for gp in ds.gold_paths.get(q.id, []):
            prev = gp.origin
            for r, e in gp.steps:
                gold_tok = set(tokenize(g.relations.label(r)))
                for rr, t in g.neighbors(prev):
                    if (rr, t) == (r, e) or rr == r:
                        continue
                    total += 1
                    shared += bool(gold_tok & set(tokenize(g.relations.label(rr))))
                prev = e
            break
    n = len(ds.queries)
    heads = len({int(h) for h in g.triples[:, 0]}) if len(g) else 0
    reach = reached / n if n else math.nan
    return VerifyReport(
        reachability=reach,
        depth_histogram=dict(sorted(hist.items())),
        mean_out_degree=len(g) / heads if heads else 0.0,
        confusability=shared / total if total else 0.0,
        passed=reach == 1.0,
    )


def write_dataset(ds: SynthDataset, out_dir) -> None:
    from pathlib import Path as FsPath

    from .kg import write_queries

    out = FsPath(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds.graph.save_tsv(out / "graph.tsv")
    write_queries(ds.graph, ds.queries, out / "queries.jsonl")
    (out / "manifest.json").write_text(json.dumps(ds.manifest, indent=2, sort_keys=True) + "\n")
