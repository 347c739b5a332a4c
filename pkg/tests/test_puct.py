import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cpr.embed import HashEmbedder
from cpr.kg import Path
from cpr.puct import (
    BetaPrior,
    ContractError,
    NodeStats,
    PairCaps,
    RolloutConfig,
    backup,
    collect_pairs,
    explore_query,
    load_pair_sets,
    puct_score,
    puct_select,
    rollout,
    run_collection,
    save_pair_sets,
    semantic_prior,
    softmax,
)
from conftest import query, toy


def test_softmax_values():
    assert softmax([3.2]).tolist() == [1.0]
    assert softmax([0.4, 0.4]).tolist() == [0.5, 0.5]
    p = softmax([1.0, 0.0])
    assert p[0] == pytest.approx(0.7311, abs=1e-4)
    assert p[1] == pytest.approx(0.2689, abs=1e-4)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=10))
def test_softmax_is_distribution(xs):
    p = softmax(xs)
    assert abs(p.sum() - 1) < 1e-12 and (p >= 0).all()


def test_semantic_prior_needs_candidates(chain, provider):
    with pytest.raises(ContractError):
        semantic_prior(provider, "q", chain, Path(0), [])


def test_puct_first_move_follows_prior():
    assert puct_select(NodeStats(), (), [0.7, 0.3], [4, 2], 2.0) == 4
    assert puct_select(NodeStats(), (), [0.3, 0.7], [4, 2], 2.0) == 2


def test_puct_equal_priors_lower_id():
    assert puct_select(NodeStats(), (), [0.5, 0.5], [5, 3], 2.0) == 3


def test_puct_arithmetic_examples():
    s = NodeStats()
    s.visit((), 1, 0)
    s.visit((), 1, 0)
    assert puct_score(0, 0.5, 2, 2, 2) == pytest.approx(0.4714, abs=1e-4)
    assert puct_score(0, 0.5, 2, 0, 2) == pytest.approx(1.4142, abs=1e-4)
    assert puct_select(s, (), [0.5, 0.5], [1, 2], 2.0) == 2

    s = NodeStats()
    for _ in range(5):
        s.visit((), 1, 1)
    assert s.q((), 1) == 1.0
    assert puct_score(1, 0.5, 5, 5, 2) == pytest.approx(1.3727, abs=1e-4)
    assert puct_score(0, 0.5, 5, 0, 2) == pytest.approx(2.2361, abs=1e-4)
    assert puct_select(s, (), [0.5, 0.5], [1, 2], 2.0) == 2


def test_backup_rules():
    g = toy("a r1 b", "b r2 c")
    p = Path.from_labels(g, ["a", "r1", "b", "r2", "c"])
    s = NodeStats()
    backup(s, p, 0)
    assert s.cells() == {((), 0): (1, 0.0), ((0,), 1): (1, 0.0)}
    backup(s, p, 1)
    assert s.cells() == {((), 0): (2, 1.0), ((0,), 1): (2, 1.0)}


@given(st.lists(st.integers(0, 1), min_size=1, max_size=50))
def test_q_is_running_mean(rewards):
    g = toy("a r1 b")
    p = Path.from_labels(g, ["a", "r1", "b"])
    s = NodeStats()
    for r in rewards:
        backup(s, p, r)
    assert s.q((), 0) == pytest.approx(np.mean(rewards), abs=1e-12)


def test_beta_rules():
    b = BetaPrior()
    assert b.rho(3) == 0.5
    b.record(0, True)
    assert b.get(0) == (2.0, 1.0)
    for ok in (True, True, True, False):
        b.record(1, ok)
    assert b.get(1) == (4.0, 2.0)
    assert b.rho(1) == pytest.approx(0.6667, abs=1e-4)
    for _ in range(100):
        b.record(2, False)
    assert b.rho(2) == pytest.approx(0.0098, abs=1e-4)


def test_beta_counts_replay_event_log(provider):
    g = toy("t r1 m", "t r2 x", "m r1 y", "m r3 ans", "x r3 ans", "x r2 t")
    q = query(g, ["t"], ["ans"], "r3 of r1")
    delta, _, log = explore_query(g, q, provider, RolloutConfig(rollouts_per_query=1000), seed=4)
    replay = BetaPrior()
    for path, reward in log:
        for r in set(path.relations):
            replay.record(r, bool(reward))
    assert replay == delta
    assert delta.total_increments() == sum(len(set(p.relations)) for p, _ in log)


def test_forced_move_always_rewarded(provider):
    g = toy("a only b")
    q = query(g, ["a"], ["b"])
    cfg = RolloutConfig(max_hop=2)
    rng = np.random.default_rng(0)
    s = NodeStats()
    for _ in range(10):
        p, r = rollout(g, q, s, provider, cfg, rng)
        assert r == 1 and p.hops == 1


def test_dead_end_topic(provider):
    g = toy("a r b")
    q = query(g, ["b"], ["a"])
    p, r = rollout(g, q, NodeStats(), provider, RolloutConfig(), np.random.default_rng(0))
    assert r == 0 and p.hops == 0


def test_fork_visits_gold_more():
    g = toy("a gold y", "a other z", "z other w")
    q = query(g, ["a"], ["y"], "the other one")
    _, stats, _ = explore_query(g, q, HashEmbedder(16), RolloutConfig(rollouts_per_query=32), seed=0)
    gold, other = g.relation_id("gold"), g.relation_id("other")
    assert stats.n((), gold) > stats.n((), other)


def test_pairs_toy():
    g = toy("a r1 b", "b r2 c", "b r3 d")
    ps = collect_pairs(g, query(g, ["a"], ["c"]), 2)
    assert [p.to_labels(g) for p in ps.positives] == [["a", "r1", "b", "r2", "c"]]
    assert [p.to_labels(g) for p in ps.negatives] == [["a", "r1", "b", "r3", "d"]]
    assert ps.pairs == [(0, 0)] and not ps.skipped


def test_pairs_skip_without_deviation():
    g = toy("a r1 b", "b r2 c")
    ps = collect_pairs(g, query(g, ["a"], ["c"]), 2)
    assert ps.negatives == [] and ps.skipped


def test_pairs_two_answers():
    g = toy("a r1 c1", "a r1 c2", "a r2 z")
    ps = collect_pairs(g, query(g, ["a"], ["c1", "c2"]), 1)
    assert {p.terminal for p in ps.positives} == {g.entity_id("c1"), g.entity_id("c2")}
    assert all(g.entities.label(n.terminal) == "z" for n in ps.negatives)


def test_negatives_capped():
    g = toy("a r1 b", *[f"a r2 n{i}" for i in range(30)])
    ps = collect_pairs(g, query(g, ["a"], ["b"]), 1, PairCaps(8, 5))
    assert len(ps.negatives) == 5


def test_collection_edge_cases(tmp_path, provider):
    res = run_collection(toy("a r b"), [], provider)
    assert res.prior.relations() == [] and res.pair_sets == []
    g = toy("a gold b", "c gold b")
    res = run_collection(g, [query(g, ["a"], ["b"])], provider)
    assert res.prior.rho(g.relation_id("gold")) > 0.5


def test_collection_deterministic_and_worker_invariant(tmp_path, provider):
    from cpr.synth import SynthConfig, generate

    ds = generate(SynthConfig(n_entities=80, n_relations=16, n_queries=30, seed=2))
    cfg = RolloutConfig(rollouts_per_query=8)
    a = run_collection(ds.graph, ds.queries, provider, cfg, seed=5)
    b = run_collection(ds.graph, ds.queries, HashEmbedder(16), cfg, seed=5, workers=4)
    assert a.prior == b.prior
    assert a.prior.to_tsv(ds.graph) == b.prior.to_tsv(ds.graph)
    fa, fb = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    save_pair_sets(fa, ds.graph, a.pair_sets)
    save_pair_sets(fb, ds.graph, b.pair_sets)
    assert fa.read_bytes() == fb.read_bytes()
    back = load_pair_sets(fa, ds.graph)
    assert sum(len(p.pairs) for p in back) == sum(len(p.pairs) for p in a.pair_sets)


def test_prior_file_round_trip(tmp_path):
    g = toy("a r1 b", "a r2 b")
    b = BetaPrior()
    b.record(1, True)
    b.record(0, False)
    b.save(tmp_path / "p.tsv", g)
    assert BetaPrior.load(tmp_path / "p.tsv", g) == b


def puct_oracle(stats, sig, prior, cands, c):
    n_parent = sum(stats.n(sig, r) for r in cands)
    rows = []
    for r, p in zip(cands, prior):
        n = stats.n(sig, r)
        q = stats.w(sig, r) / n if n else 0.0
        rows.append((q + c * p * math.sqrt(n_parent) / (1 + n), p, -r))
    best = max(rows)
    return -best[2]


@given(st.integers(0, 2**32 - 1))
def test_puct_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 6))
    cands = sorted(rng.choice(20, size=k, replace=False).tolist())
    prior = softmax(rng.integers(-2, 3, size=k).astype(float))
    s = NodeStats()
    for r in cands:
        for _ in range(int(rng.integers(0, 4))):
            s.visit((), r, int(rng.integers(0, 2)))
    c = float(rng.choice([0.0, 1.0, 2.0, rng.uniform(0, 5)]))
    assert puct_select(s, (), prior, cands, c) == puct_oracle(s, (), prior, cands, c)
