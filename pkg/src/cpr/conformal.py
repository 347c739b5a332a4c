"""Query-level split conformal calibration over retrieved path pools.

A query's nonconformity score is the lowest hinted cost among its retrieved
paths that end in a gold answer, or ``+inf`` when none does. The threshold
is the ``k = ceil((n + 1)(1 - alpha))``-th smallest calibration score, or
``+inf`` when ``k > n``.
"""

from __future__ import annotations

import csv
import json
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .treeg import ScoredPath

INF = math.inf


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class NonconformityScore:
    query_id: str
    value: float

    @property
    def finite(self) -> bool:
        return math.isfinite(self.value)


@dataclass(frozen=True)
class Threshold:
    tau: float
    alpha: float
    n_cal: int
    k: int

    def to_dict(self):
        return {"alpha": self.alpha, "k": self.k, "n_cal": self.n_cal,
                "tau": self.tau if math.isfinite(self.tau) else "inf"}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["tau"]), float(d["alpha"]), int(d["n_cal"]), int(d["k"]))


@dataclass
class PredictionResult:
    query_id: str
    paths: list[ScoredPath]
    answers: tuple[int, ...]
    covered: bool | None = None

    @property
    def size(self) -> int:
        return len(self.answers)


def conformal_rank(n: int, alpha: float) -> int:
    """``ceil((n + 1)(1 - alpha))`` with alpha read as a decimal literal.

    Reading ``0.3`` as exactly 3/10 avoids ``ceil(10 * 0.7) == 8`` from
    binary rounding.
    """
    if not 0.0 < alpha < 1.0:
        raise CalibrationError(f"alpha must lie in (0, 1), got {alpha}")
    a = Fraction(repr(float(alpha)))
    return math.ceil((n + 1) * (1 - a))


def nonconformity(pool: Sequence[ScoredPath], answers, query_id: str = "") -> NonconformityScore:
    vals = [sp.v_prime for sp in pool if sp.path.hops > 0 and sp.path.terminal in answers]
    return NonconformityScore(query_id, min(vals) if vals else INF)


def calibrate(scores: Sequence[NonconformityScore | float], alpha: float) -> Threshold:
    if len(scores) == 0:
        raise CalibrationError("calibration set is empty")
    n = len(scores)
    k = conformal_rank(n, alpha)
    if k > n:
        return Threshold(INF, alpha, n, k)
    if isinstance(scores[0], NonconformityScore):
        ordered = sorted(scores, key=lambda s: (s.value, s.query_id))
        tau = ordered[k - 1].value
    else:
        tau = float(np.sort(np.asarray(scores, dtype=np.float64))[k - 1])
    return Threshold(float(tau), alpha, n, k)


def predict(pool: Sequence[ScoredPath], tau: float, answers=None, query_id: str = "") -> PredictionResult:
    """Keep every path with ``v' <= tau``; ``tau = +inf`` keeps the whole pool."""
    kept = [sp for sp in pool if sp.v_prime <= tau]
    terms = tuple(sorted({sp.path.terminal for sp in kept}))
    covered = None if answers is None else bool(set(terms) & set(answers))
    return PredictionResult(query_id, kept, terms, covered)


# -- hop-level contrast ------------------------------------------------------


@dataclass
class HopLevelResult:
    thresholds: list[float]
    predictions: list[PredictionResult]
    cal_sizes: list[int] = field(default_factory=list)


def _hop_candidates(pool, hop, survivors):
    if hop == 1:
        return [sp for sp in pool if sp.path.hops == 1]
    return [sp for sp in pool if sp.path.hops == hop and sp.path.prefix(hop - 1) in survivors]


def _correct_prefixes(pool, answers, depth):
    """Prefixes of the depth-``depth`` pool paths that end in an answer."""
    out = set()
    for sp in pool:
        if sp.path.hops == depth and sp.path.terminal in answers:
            for h in range(1, depth + 1):
                out.add(sp.path.prefix(h))
    return out


def hop_level_calibrate_baseline(cal, test, alphas: Sequence[float]) -> HopLevelResult:
    """Per-hop thresholds with pruning between hops.

    ``cal`` and ``test`` are lists of ``(query_id, pool, answers)`` where each
    pool holds scored paths of every length up to ``len(alphas)``. At hop k a
    query's score is the lowest ``v'`` among hop-k candidates (extensions of
    hop-(k-1) survivors) lying on a route to an answer at the final hop.
    Hop 1 calibrates on every calibration query; later hops calibrate only
    on queries whose route survived the earlier thresholds, which is where
    the dependence on all other calibration queries enters. This is a
    contrast condition and carries no coverage guarantee.
    """
    depth = len(alphas)
    if depth < 1:
        raise CalibrationError("need at least one hop")
    cal_state = [dict(pool=pool, answers=set(ans), survivors=None, correct=_correct_prefixes(pool, set(ans), depth))
                 for _, pool, ans in cal]
    test_state = [dict(qid=qid, pool=pool, answers=set(ans), survivors=None) for qid, pool, ans in test]
    taus, sizes = [], []
    for hop, alpha in enumerate(alphas, start=1):
        scores = []
        for st in cal_state:
            cands = _hop_candidates(st["pool"], hop, st["survivors"])
            vals = [sp.v_prime for sp in cands if sp.path in st["correct"]]
            s = min(vals) if vals else INF
            if hop == 1 or math.isfinite(s):
                scores.append(s)
            st["cands"] = cands
        if scores:
            tau = calibrate(scores, alpha).tau
        else:
            tau = INF
        taus.append(tau)
        sizes.append(len(scores))
        for st in cal_state:
            st["survivors"] = {sp.path for sp in st["cands"] if sp.v_prime <= tau}
        for st in test_state:
            cands = _hop_candidates(st["pool"], hop, st["survivors"])
            st["kept"] = [sp for sp in cands if sp.v_prime <= tau]
            st["survivors"] = {sp.path for sp in st["kept"]}
    preds = []
    for st in test_state:
        terms = tuple(sorted({sp.path.terminal for sp in st["kept"]}))
        preds.append(PredictionResult(st["qid"], st["kept"], terms, bool(set(terms) & st["answers"])))
    return HopLevelResult(taus, preds, sizes)


# -- Monte Carlo check of the coverage bound ------------------------------------


def kth_thresholds(scores: np.ndarray, alpha: float) -> np.ndarray:
    """Row-wise conformal threshold for a ``(trials, n)`` score matrix."""
    n = scores.shape[1]
    k = conformal_rank(n, alpha)
    if k > n:
        return np.full(scores.shape[0], INF)
    return np.partition(scores, k - 1, axis=1)[:, k - 1]


def coverage_trial(score_sampler: Callable, n_cal: int, alpha: float, trials: int = 10_000,
                   seed=0, chunk: int = 2_000) -> float:
    """Fraction of trials where a fresh score falls at or below the threshold.

    ``score_sampler(rng, shape)`` returns i.i.d. scores. Trials run in chunks,
    each with its own seed stream spawned from ``seed``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    n_chunks = -(-trials // chunk)
    streams = np.random.SeedSequence(seed).spawn(n_chunks)
    hits = 0
    done = 0
    for ss in streams:
        m = min(chunk, trials - done)
        rng = np.random.default_rng(ss)
        S = np.asarray(score_sampler(rng, (m, n_cal + 1)), dtype=np.float64)
        tau = kth_thresholds(S[:, :n_cal], alpha)
        hits += int(np.count_nonzero(S[:, n_cal] <= tau))
        done += m
    return hits / trials


# -- files -------------------------------------------------------------------


def save_calibration_table(path, scores: Sequence[NonconformityScore]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["query_id", "score", "finite"])
        for s in scores:
            w.writerow([s.query_id, repr(s.value) if s.finite else "inf", int(s.finite)])


def load_calibration_table(path) -> list[NonconformityScore]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [NonconformityScore(r["query_id"], float(r["score"])) for r in rows]


def save_thresholds(path, thresholds: Sequence[Threshold]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([t.to_dict() for t in thresholds], fh, indent=2)
        fh.write("\n")


def load_thresholds(path) -> list[Threshold]:
    with open(path, encoding="utf-8") as fh:
        return [Threshold.from_dict(d) for d in json.load(fh)]
