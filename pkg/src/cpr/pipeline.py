"""Train, calibrate and predict in one call.

Phase 1 explores the training queries and fits the value network, phase 2
scores the calibration queries, phase 3 retrieves pools for the test
queries and evaluates every risk level.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace

from .conformal import NonconformityScore, nonconformity
from .embed import HashEmbedder
from .evaluation import DEFAULT_ALPHAS, GridResult, run_alpha_grid
from .hints import LexicalHints, NullHints, generate_hints
from .kg import DatasetSplit, KnowledgeGraph, split_dataset
from .puct import BetaPrior, CollectionResult, PairCaps, RolloutConfig, run_collection
from .rcvnet import PathScorer, RcvnetParams, TrainConfig, TrainLogRow, train_from_pairs
from .treeg import TreeGConfig, retrieve_all

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    treeg: TreeGConfig = field(default_factory=TreeGConfig)
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    caps: PairCaps = field(default_factory=PairCaps)
    embed_dim: int = 64
    embed_seed: int = 0
    width: int = 256
    alphas: tuple[float, ...] = DEFAULT_ALPHAS
    hints: str = "lexical"
    seed: int = 0
    use_rcvnet: bool = True

    def to_dict(self):
        return asdict(self)


@dataclass
class PipelineResult:
    prior: BetaPrior
    params: RcvnetParams | None
    train_log: list[TrainLogRow]
    cal_pools: dict
    test_pools: dict
    cal_scores: list[NonconformityScore]
    grid: GridResult
    collection: CollectionResult | None = None
    timings: dict = field(default_factory=dict)


def make_hint_provider(kind: str, g: KnowledgeGraph):
    if kind == "none":
        return NullHints()
    if kind == "lexical":
        return LexicalHints(g.relations.labels)
    if kind == "http":
        from .hints import HttpHints
        return HttpHints()
    raise ValueError(f"unknown hint provider {kind!r}")


def fit(g, split: DatasetSplit, cfg: PipelineConfig, provider=None, workers=1):
    """Phase 1. Returns ``(prior, params or None, train log, collection)``."""
    provider = provider or HashEmbedder(cfg.embed_dim, cfg.embed_seed)
    if not cfg.use_rcvnet:
        return BetaPrior(), None, [], None
    coll = run_collection(g, split.train, provider, cfg.rollout, cfg.seed, cfg.caps, workers)
    tcfg = TrainConfig(cfg.train.learning_rate, cfg.train.batch_size, cfg.train.epochs, cfg.seed)
    params, tlog = train_from_pairs(g, split.train, coll.pair_sets, provider, coll.prior, tcfg, cfg.width)
    return coll.prior, params, tlog, coll


def run_pipeline(g: KnowledgeGraph, split: DatasetSplit, cfg: PipelineConfig | None = None,
                 workers: int = 1, fitted=None) -> PipelineResult:
    """All three phases. Pass ``fitted`` (the tuple from :func:`fit`) to skip phase 1."""
    cfg = cfg or PipelineConfig()
    provider = HashEmbedder(cfg.embed_dim, cfg.embed_seed)
    t0 = time.perf_counter()
    prior, params, tlog, coll = fitted or fit(g, split, cfg, provider, workers)
    t1 = time.perf_counter()
    scorer = PathScorer(g, provider, prior, params)
    hp = make_hint_provider(cfg.hints, g)
    hint_cache = {}

    def hints_for(q):
        if q.id not in hint_cache:
            hint_cache[q.id] = generate_hints(hp, q.question, cfg.treeg.max_hop)
        return hint_cache[q.id]

    cal_pools = retrieve_all(g, split.calibration, scorer, hints_for, cfg.treeg, workers)
    answers = {q.id: q.answers for q in split.calibration}
    cal_scores = [nonconformity(cal_pools[qid], answers[qid], qid) for qid in sorted(cal_pools)]
    t2 = time.perf_counter()
    test_pools = retrieve_all(g, split.test, scorer, hints_for, cfg.treeg, workers)
    test_answers = {q.id: q.answers for q in split.test}
    grid = run_alpha_grid(cal_scores, test_pools, test_answers, cfg.alphas)
    t3 = time.perf_counter()
    return PipelineResult(prior, params, tlog, cal_pools, test_pools, cal_scores, grid, coll,
                          {"fit": t1 - t0, "calibrate": t2 - t1, "predict": t3 - t2})


def three_way_split(queries, n_cal: int, n_test: int, seed=0) -> DatasetSplit:
    """Seeded test hold-out, then a fixed-count calibration draw from the rest."""
    holdout = split_dataset(queries, seed=seed, cal_count=n_test)
    rest = split_dataset(holdout.train, seed=seed + 1, cal_count=n_cal)
    return DatasetSplit(rest.train, rest.calibration, holdout.calibration)


def budget_sweep(g: KnowledgeGraph, split: DatasetSplit, cfg: PipelineConfig, budgets, workers: int = 1):
    """Calibrate and evaluate once per ``(branch_out, active_set)`` pair.

    The model is fitted once and shared. Returns ``{(B, A): GridResult}``.
    """
    provider = HashEmbedder(cfg.embed_dim, cfg.embed_seed)
    fitted = fit(g, split, cfg, provider, workers)
    out = {}
    for b, a in budgets:
        sub = replace(cfg, treeg=replace(cfg.treeg, branch_out=b, active_set=a))
        out[(b, a)] = run_pipeline(g, split, sub, workers, fitted).grid
    return out
