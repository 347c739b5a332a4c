import numpy as np
import pytest

from cpr.embed import HashEmbedder
from cpr.kg import Query, load_graph


def toy(*lines):
    return load_graph([ln.replace(" ", "\t") for ln in lines])


def query(g, topics, answers, question="q", qid="q0"):
    return Query(qid, question, tuple(g.entity_id(t) for t in topics),
                 frozenset(g.entity_id(a) for a in answers))


def random_graph(rng, n_ent=8, n_rel=3, n_tri=20):
    lines = {f"e{rng.integers(n_ent)}\tr{rng.integers(n_rel)}\te{rng.integers(n_ent)}" for _ in range(n_tri)}
    return load_graph(sorted(lines))


@pytest.fixture
def chain():
    return toy("a r1 b", "b r2 c")


@pytest.fixture
def provider():
    return HashEmbedder(16, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
