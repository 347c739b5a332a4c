import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from cpr.embed import (
    FileEmbedder,
    HashEmbedder,
    hash_embed,
    path_text,
    similarity,
    tokenize,
    write_embedding_file,
)
from cpr.kg import Path
from conftest import toy


def test_tokenize_splits_dots_and_underscores():
    assert tokenize("people.person.place_of_birth") == ["people", "person", "place", "of", "birth"]


def test_empty_text_is_zero():
    assert not hash_embed("", 32).any()
    assert not HashEmbedder(32).embed_text("...").any()


def test_deterministic_across_instances():
    a = HashEmbedder(32, 7).embed_text("film.actor.film")
    b = HashEmbedder(32, 7).embed_text("film.actor.film")
    assert np.array_equal(a, b)
    assert np.allclose(a, hash_embed("film.actor.film", 32, 7))
    assert not np.allclose(a, HashEmbedder(32, 8).embed_text("film.actor.film"))


@given(st.text(min_size=1, max_size=40))
def test_unit_norm_or_zero(text):
    v = hash_embed(text, 16)
    n = np.linalg.norm(v)
    assert n == 0 or abs(n - 1) < 1e-12


def test_shared_tokens_are_more_similar():
    rng = np.random.default_rng(0)
    vocab = [f"w{i}" for i in range(200)]
    shared, disjoint = [], []
    for trial in range(100):
        toks = rng.choice(vocab, size=9, replace=False)
        base = " ".join(toks[:3])
        overlap = " ".join(np.concatenate([toks[:1], toks[3:5]]))
        other = " ".join(toks[5:8])
        e = HashEmbedder(64, trial)
        shared.append(similarity(e.embed_text(base), e.embed_text(overlap)))
        disjoint.append(similarity(e.embed_text(base), e.embed_text(other)))
    assert np.mean(shared) > np.mean(disjoint)


def test_similarity_cases():
    v = np.zeros(8)
    v[0] = 1
    u = np.zeros(8)
    u[1] = 1
    assert similarity(v, v) == 1.0
    assert similarity(v, u) == 0.0
    assert similarity(v, np.zeros(8)) == 0.0


@given(st.integers(0, 10_000))
def test_similarity_matches_dot(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, 12))
    a /= np.linalg.norm(a)
    b /= np.linalg.norm(b)
    assert abs(similarity(a, b) - sum(x * y for x, y in zip(a, b))) < 1e-12


def test_path_text():
    g = toy("a people.person.place_of_birth b", "b location.location.contains c")
    p1 = Path.from_labels(g, ["a", "people.person.place_of_birth", "b"])
    p2 = Path.from_labels(g, ["a", "people.person.place_of_birth", "b", "location.location.contains", "c"])
    assert path_text(p1, g) == "people.person.place_of_birth"
    assert path_text(p2, g) == "people.person.place_of_birth / location.location.contains"


def test_path_text_injective_on_relation_sequences():
    labels = [f"d{i}.t{j}.p{k}" for i in range(3) for j in range(2) for k in range(3)]
    lines = [f"n{i}\t{r}\tn{i + 1}" for i, r in enumerate(labels)]
    g = toy(*[ln.replace("\t", " ") for ln in lines])
    seen = {}
    rels = range(g.n_relations)
    for r1 in rels:
        for r2 in [None, *rels]:
            seq = (r1,) if r2 is None else (r1, r2)
            text = " / ".join(g.relations.label(r) for r in seq)
            assert seen.setdefault(text, seq) == seq


def test_file_embedder(tmp_path):
    base = HashEmbedder(16)
    f = tmp_path / "emb.jsonl"
    write_embedding_file(f, base, ["alpha beta", "gamma"])
    fe = FileEmbedder(f)
    assert np.allclose(fe.embed_text("gamma"), base.embed_text("gamma"))
    assert not fe.embed_text("unknown").any()
    assert np.array_equal(FileEmbedder(f, base).embed_text("delta"), base.embed_text("delta"))
