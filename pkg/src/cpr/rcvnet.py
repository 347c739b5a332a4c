"""Residual conformal value network.

A path cost is the semantic baseline ``-(s_local + s_path) / 2`` plus a
learned residual. The residual is a 3-layer ReLU MLP over three scalar
features whose pre-activations are FiLM-modulated, ``z * (1 + gamma) + beta``,
by a 2-layer conditioner over the concatenated query, relation and path
embeddings. The linear head and the conditioner's output layer start at
zero, so an untrained network returns the baseline exactly.

All arithmetic is float64 and gradients are written out by hand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .embed import EmbeddingProvider, relation_text
from .kg import ConfigError, KnowledgeGraph, Path
from .puct import BetaPrior, ContractError, PathPairSet

FORMAT_VERSION = 1
LAYER_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3", "Wo", "bo", "C1", "cb1", "C2", "cb2")


class ParamFileError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ScalarFeatures:
    s_local: float
    s_path: float
    rho_last: float

    def as_array(self):
        return np.array([self.s_local, self.s_path, self.rho_last])


@dataclass
class TrainConfig:
    learning_rate: float = 5e-3
    batch_size: int = 256
    epochs: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("learning_rate, batch_size and epochs must be positive")


@dataclass
class RcvnetParams:
    d: int
    width: int
    tensors: dict[str, np.ndarray]

    def shapes(self):
        return param_shapes(self.d, self.width)

    def copy(self) -> "RcvnetParams":
        return RcvnetParams(self.d, self.width, {k: v.copy() for k, v in self.tensors.items()})

    def __getitem__(self, name):
        return self.tensors[name]


def param_shapes(d: int, width: int) -> dict[str, tuple[int, ...]]:
    w = width
    return {
        "W1": (3, w), "b1": (w,),
        "W2": (w, w), "b2": (w,),
        "W3": (w, w), "b3": (w,),
        "Wo": (w,), "bo": (1,),
        "C1": (3 * d, w), "cb1": (w,),
        "C2": (w, 6 * w), "cb2": (6 * w,),
    }


def init_params(d: int, width: int = 256, seed=0) -> RcvnetParams:
    """He-initialized hidden layers; head and conditioner output at zero."""
    rng = np.random.default_rng(seed)
    shapes = param_shapes(d, width)
    t = {}
    for name in LAYER_NAMES:
        shape = shapes[name]
        if name in ("W1", "W2", "W3", "C1"):
            t[name] = rng.standard_normal(shape) * math.sqrt(2.0 / shape[0])
        else:
            t[name] = np.zeros(shape)
    return RcvnetParams(d, width, t)


def v_sem(x) -> float:
    """Semantic baseline cost; lower means better aligned with the query."""
    if isinstance(x, ScalarFeatures):
        return -(x.s_local + x.s_path) / 2
    x = np.asarray(x, dtype=np.float64)
    return -(x[..., 0] + x[..., 1]) / 2


def film_modulate(h, gamma, beta):
    h, gamma, beta = np.asarray(h), np.asarray(gamma), np.asarray(beta)
    if h.shape != gamma.shape or h.shape != beta.shape:
        raise ValueError(f"FiLM shape mismatch: h{h.shape} gamma{gamma.shape} beta{beta.shape}")
    return h * (1 + gamma) + beta


def _relu(z):
    return np.maximum(z, 0.0)


def _check_inputs(params, X, C):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    C = np.atleast_2d(np.asarray(C, dtype=np.float64))
    if X.shape[1] != 3:
        raise ValueError(f"scalar features must have 3 columns, got {X.shape[1]}")
    if C.shape[1] != 3 * params.d:
        raise ValueError(f"context has {C.shape[1]} columns, params expect 3*d = {3 * params.d}")
    if X.shape[0] != C.shape[0]:
        raise ValueError("feature and context batch sizes differ")
    return X, C


def forward_batch(params: RcvnetParams, X, C, return_cache=False):
    """Path costs for a batch: ``v_sem(X) + residual(X, C)``."""
    X, C = _check_inputs(params, X, C)
    t = params.tensors
    w = params.width
    u = C @ t["C1"] + t["cb1"]
    hc = _relu(u)
    film = hc @ t["C2"] + t["cb2"]
    h = X
    layers = []
    for i, (W, b) in enumerate((("W1", "b1"), ("W2", "b2"), ("W3", "b3"))):
        gamma = film[:, 2 * i * w:(2 * i + 1) * w]
        beta = film[:, (2 * i + 1) * w:(2 * i + 2) * w]
        z = h @ t[W] + t[b]
        m = z * (1 + gamma) + beta
        layers.append((h, z, m, gamma))
        h = _relu(m)
    delta = h @ t["Wo"] + t["bo"][0]
    v = v_sem(X) + delta
    if return_cache:
        return v, (X, C, u, hc, layers, h)
    return v


def forward(params: RcvnetParams, x, c) -> float:
    x = x.as_array() if isinstance(x, ScalarFeatures) else x
    return float(forward_batch(params, np.asarray(x)[None, :], np.asarray(c)[None, :])[0])


def _backward_from_cache(params, cache, dv):
    X, C, u, hc, layers, h3 = cache
    t = params.tensors
    g = {}
    g["Wo"] = h3.T @ dv
    g["bo"] = np.array([dv.sum()])
    dh = np.outer(dv, t["Wo"])
    dfilm = []
    for i in (2, 1, 0):
        h_in, z, m, gamma = layers[i]
        dm = dh * (m > 0)
        dz = dm * (1 + gamma)
        W, b = f"W{i + 1}", f"b{i + 1}"
        g[W] = h_in.T @ dz
        g[b] = dz.sum(axis=0)
        dfilm.append((i, dm * z, dm))
        if i > 0:
            dh = dz @ t[W].T
    dfilm.sort(key=lambda item: item[0])
    dF = np.concatenate([blk for _, dg, db in dfilm for blk in (dg, db)], axis=1)
    g["C2"] = hc.T @ dF
    g["cb2"] = dF.sum(axis=0)
    du = (dF @ t["C2"].T) * (u > 0)
    g["C1"] = C.T @ du
    g["cb1"] = du.sum(axis=0)
    return g


def softplus(m):
    return np.logaddexp(0.0, m)


def _sigmoid(m):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(m, dtype=np.float64)))


def pair_loss(v_pos, v_neg):
    """Softplus ranking loss; small when the positive path costs less."""
    out = softplus(np.asarray(v_pos, dtype=np.float64) - np.asarray(v_neg, dtype=np.float64))
    return float(out) if np.ndim(out) == 0 else out


def loss_and_grads(params, Xp, Cp, Xn, Cn):
    """Mean pair loss over a batch and its gradient for every tensor."""
    n = len(Xp)
    if n == 0:
        raise ContractError("empty batch")
    v, cache = forward_batch(params, np.vstack([Xp, Xn]), np.vstack([Cp, Cn]), return_cache=True)
    margin = v[:n] - v[n:]
    loss = float(softplus(margin).mean())
    s = _sigmoid(margin) / n
    dv = np.concatenate([s, -s])
    return loss, _backward_from_cache(params, cache, dv)


def backward(params, batch):
    """Gradients of the mean pair loss; ``batch`` is ``(Xp, Cp, Xn, Cn)``."""
    return loss_and_grads(params, *batch)[1]


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: RcvnetParams) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in params.tensors.items()},
                   {k: np.zeros_like(a) for k, a in params.tensors.items()})


def adam_step(params: RcvnetParams, grads, state: AdamState, lr: float) -> RcvnetParams:
    """One in-place bias-corrected Adam update."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for k, grad in grads.items():
        if grad.shape != params.tensors[k].shape:
            raise ValueError(f"gradient shape {grad.shape} does not match {k}{params.tensors[k].shape}")
        m = state.m[k] = b1 * state.m[k] + (1 - b1) * grad
        v = state.v[k] = b2 * state.v[k] + (1 - b2) * grad * grad
        params.tensors[k] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# -- features ------------------------------------------------------------------


class PathScorer:
    """Featurizes relation sequences for one graph and scores them.

    ``params=None`` scores with the semantic baseline alone.
    """

    def __init__(self, g: KnowledgeGraph, provider: EmbeddingProvider, beta: BetaPrior | None = None,
                 params: RcvnetParams | None = None):
        if params is not None and params.d != provider.dim:
            raise ParamFileError(f"parameter file has d={params.d}, embedding provider has d={provider.dim}")
        self.g = g
        self.provider = provider
        self.beta = beta or BetaPrior()
        self.params = params
        self._rel_emb = np.stack([provider.embed_text(lbl) for lbl in g.relations.labels]) \
            if g.n_relations else np.zeros((0, provider.dim))

    def featurize(self, question: str, rel_seqs) -> tuple[np.ndarray, np.ndarray]:
        d = self.provider.dim
        n = len(rel_seqs)
        q = self.provider.embed_text(question)
        X = np.empty((n, 3))
        C = np.empty((n, 3 * d))
        C[:, :d] = q
        for i, rels in enumerate(rel_seqs):
            if not rels:
                raise ContractError("features need a path with at least one hop")
            r = rels[-1]
            r_emb = self._rel_emb[r]
            p_emb = self.provider.embed_text(relation_text(self.g, rels)) if len(rels) > 1 else r_emb
            C[i, d:2 * d] = r_emb
            C[i, 2 * d:] = p_emb
            X[i, 2] = self.beta.rho(r)
        X[:, 0] = np.clip(C[:, d:2 * d] @ q, -1.0, 1.0)
        X[:, 1] = np.clip(C[:, 2 * d:] @ q, -1.0, 1.0)
        return X, C

    def features(self, question: str, p: Path) -> ScalarFeatures:
        X, _ = self.featurize(question, [p.relations])
        return ScalarFeatures(*map(float, X[0]))

    def score(self, question: str, rel_seqs) -> np.ndarray:
        if not rel_seqs:
            return np.zeros(0)
        X, C = self.featurize(question, rel_seqs)
        if self.params is None:
            return v_sem(X)
        return forward_batch(self.params, X, C)


def features(g, question, p: Path, beta: BetaPrior, provider: EmbeddingProvider) -> ScalarFeatures:
    return PathScorer(g, provider, beta).features(question, p)


# -- training --------------------------------------------------------------------


@dataclass
class PairData:
    X: np.ndarray
    C: np.ndarray
    pos: np.ndarray
    neg: np.ndarray


def build_pair_data(scorer: PathScorer, questions: dict[str, str], pair_sets) -> PairData:
    """Featurize every distinct path once and index pairs into the table."""
    Xs, Cs, pos, neg = [], [], [], []
    offset = 0
    for ps in pair_sets:
        if ps.skipped or not ps.pairs:
            continue
        paths = list(ps.positives) + list(ps.negatives)
        X, C = scorer.featurize(questions[ps.query_id], [p.relations for p in paths])
        Xs.append(X)
        Cs.append(C)
        npos = len(ps.positives)
        for i, j in ps.pairs:
            pos.append(offset + i)
            neg.append(offset + npos + j)
        offset += len(paths)
    if not pos:
        raise TrainingError("no training pairs")
    return PairData(np.vstack(Xs), np.vstack(Cs), np.array(pos), np.array(neg))


@dataclass
class TrainLogRow:
    epoch: int
    mean_loss: float
    pairwise_accuracy: float


def pairwise_accuracy(params, data: PairData) -> float:
    v = forward_batch(params, data.X, data.C) if params is not None else v_sem(data.X)
    return float(np.mean(v[data.pos] < v[data.neg]))


def train(data: PairData, d: int, width: int = 256, cfg: TrainConfig | None = None,
          params: RcvnetParams | None = None):
    """Adam on the mean pair loss with a seeded shuffle per epoch.

    Returns ``(params, log)`` where ``log`` holds one row per epoch.
    """
    cfg = cfg or TrainConfig()
    if len(data.pos) == 0:
        raise TrainingError("no training pairs")
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = init_params(d, width, rng.integers(2**63))
    state = AdamState.zeros_like(params)
    n = len(data.pos)
    log = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            pi, ni = data.pos[idx], data.neg[idx]
            loss, grads = loss_and_grads(params, data.X[pi], data.C[pi], data.X[ni], data.C[ni])
            adam_step(params, grads, state, cfg.learning_rate)
            total += loss * len(idx)
        log.append(TrainLogRow(epoch, total / n, pairwise_accuracy(params, data)))
    return params, log


def train_from_pairs(g, queries, pair_sets: list[PathPairSet], provider, beta, cfg=None, width=256):
    scorer = PathScorer(g, provider, beta)
    questions = {q.id: q.question for q in queries}
    data = build_pair_data(scorer, questions, pair_sets)
    return train(data, provider.dim, width, cfg)


def write_train_log(path, log) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,mean_loss,pairwise_accuracy\n")
        for row in log:
            fh.write(f"{row.epoch},{row.mean_loss!r},{row.pairwise_accuracy!r}\n")


# -- persistence -----------------------------------------------------------------


def save_params(params: RcvnetParams, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# rcvnet parameters\n")
        fh.write(f"version {FORMAT_VERSION}\n")
        fh.write(f"d {params.d}\nwidth {params.width}\n")
        for name in LAYER_NAMES:
            arr = params.tensors[name]
            fh.write(f"tensor {name} {' '.join(map(str, arr.shape))}\n")
            rows = arr.reshape(arr.shape[0], -1) if arr.ndim > 1 else arr.reshape(1, -1)
            for row in rows:
                fh.write(" ".join(repr(float(x)) for x in row) + "\n")
        fh.write("end\n")


def load_params(path, expect_d: int | None = None, expect_width: int | None = None) -> RcvnetParams:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    it = iter(line for line in lines if line and not line.startswith("#"))

    def header(key):
        try:
            k, val = next(it).split()
        except (StopIteration, ValueError):
            raise ParamFileError(f"truncated or malformed header, expected {key!r}") from None
        if k != key:
            raise ParamFileError(f"expected header {key!r}, found {k!r}")
        return int(val)

    version = header("version")
    if version != FORMAT_VERSION:
        raise ParamFileError(f"unsupported parameter format version {version} (expected {FORMAT_VERSION})")
    d, width = header("d"), header("width")
    if expect_d is not None and d != expect_d:
        raise ParamFileError(f"parameter file has d={d} but runtime embedding dimension is d={expect_d}")
    if expect_width is not None and width != expect_width:
        raise ParamFileError(f"parameter file has width={width} but runtime expects width={expect_width}")
    shapes = param_shapes(d, width)
    tensors = {}
    try:
        for name in LAYER_NAMES:
            tag = next(it).split()
            shape = tuple(int(s) for s in tag[2:])
            if tag[:2] != ["tensor", name] or shape != shapes[name]:
                raise ParamFileError(f"expected tensor {name}{shapes[name]}, found {' '.join(tag)}")
            nrows = shape[0] if len(shape) > 1 else 1
            rows = [np.array(next(it).split(), dtype=np.float64) for _ in range(nrows)]
            tensors[name] = np.concatenate(rows).reshape(shape)
        if next(it) != "end":
            raise ParamFileError("missing end marker")
    except StopIteration:
        raise ParamFileError("parameter file is truncated") from None
    except ValueError as exc:
        if isinstance(exc, ParamFileError):
            raise
        raise ParamFileError(f"malformed parameter values: {exc}") from None
    return RcvnetParams(d, width, tensors)
