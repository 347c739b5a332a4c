"""Deterministic text embeddings and cosine similarity.

The hashing embedder maps every token to a seeded pseudo-random unit
direction and sums them, so texts that share tokens point in similar
directions. It is a stand-in for a sentence encoder; a file-backed provider
lets precomputed encoder outputs be injected instead.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
from typing import Protocol

import numpy as np

from .kg import KnowledgeGraph, Path, Query

_TOKEN = re.compile(r"[0-9A-Za-z]+")
PATH_SEPARATOR = " / "


def tokenize(text: str) -> list[str]:
    """Lower-cased alphanumeric runs; dots, underscores and spaces split."""
    return [t.lower() for t in _TOKEN.findall(text)]


class EmbeddingProvider(Protocol):
    dim: int

    def embed_text(self, text: str) -> np.ndarray: ...


def _token_direction(token: str, d: int, seed: int) -> np.ndarray:
    digest = hashlib.blake2b(f"{seed}\x00{token}".encode(), digest_size=16).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def hash_embed(text: str, d: int = 64, seed: int = 0) -> np.ndarray:
    if d < 8:
        raise ValueError(f"embedding dimension must be >= 8, got {d}")
    toks = tokenize(text)
    if not toks:
        return np.zeros(d)
    v = np.zeros(d)
    for tok in toks:
        v += _token_direction(tok, d, seed)
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


class HashEmbedder:
    """Memoizing :func:`hash_embed` provider.

    The cache is guarded by a lock; concurrent inserts of the same key store
    identical vectors, so the last write wins harmlessly.
    """

    def __init__(self, dim: int = 64, seed: int = 0):
        if dim < 8:
            raise ValueError(f"embedding dimension must be >= 8, got {dim}")
        self.dim = dim
        self.seed = seed
        self._cache: dict[str, np.ndarray] = {}
        self._tok_cache: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def _token(self, tok):
        v = self._tok_cache.get(tok)
        if v is None:
            v = _token_direction(tok, self.dim, self.seed)
            with self._lock:
                self._tok_cache[tok] = v
        return v

    def embed_text(self, text: str) -> np.ndarray:
        v = self._cache.get(text)
        if v is not None:
            return v
        toks = tokenize(text)
        v = np.zeros(self.dim)
        for tok in toks:
            v = v + self._token(tok)
        n = np.linalg.norm(v)
        if n > 0:
            v = v / n
        v.setflags(write=False)
        with self._lock:
            self._cache[text] = v
        return v

    def embed_many(self, texts) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim))
        return np.stack([self.embed_text(t) for t in texts])


class FileEmbedder:
    """Provider backed by a JSON Lines table of precomputed vectors.

    The first line is a header ``{"dim": d}``; every other line holds
    ``{"text": ..., "vector": [...]}``. Vectors are L2-normalized on load.
    Unknown texts fall back to ``fallback`` (zero vector when None).
    """

    def __init__(self, path, fallback: EmbeddingProvider | None = None):
        with open(path, encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            self.dim = int(header["dim"])
            self._table = {}
            for lineno, line in enumerate(fh, start=2):
                if not line.strip():
                    continue
                rec = json.loads(line)
                v = np.asarray(rec["vector"], dtype=np.float64)
                if v.shape != (self.dim,):
                    raise ValueError(f"line {lineno}: vector has shape {v.shape}, header says {self.dim}")
                n = np.linalg.norm(v)
                self._table[rec["text"]] = v / n if n > 0 else v
        if fallback is not None and fallback.dim != self.dim:
            raise ValueError("fallback provider dimension mismatch")
        self.fallback = fallback

    def embed_text(self, text: str) -> np.ndarray:
        v = self._table.get(text)
        if v is not None:
            return v
        if self.fallback is not None:
            return self.fallback.embed_text(text)
        return np.zeros(self.dim)


def write_embedding_file(path, provider: EmbeddingProvider, texts) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"dim": provider.dim}) + "\n")
        for t in texts:
            fh.write(json.dumps({"text": t, "vector": provider.embed_text(t).tolist()}) + "\n")


def similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity; 0 when either vector is zero."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def relation_text(g: KnowledgeGraph, relations) -> str:
    return PATH_SEPARATOR.join(g.relations.label(r) for r in relations)


def path_text(p: Path, g: KnowledgeGraph) -> str:
    return relation_text(g, p.relations)


def query_text(q: Query) -> str:
    return q.question
