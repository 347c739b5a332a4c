"""Coverage and set-size metrics over a grid of risk levels, plus reports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path as FsPath

from .conformal import NonconformityScore, PredictionResult, Threshold, calibrate, predict

DEFAULT_ALPHAS = (0.3, 0.4, 0.5, 0.6, 0.7, 0.8)
CSV_FIELDS = ("alpha", "ecr", "apss", "coverage_efficiency", "valid", "n_test", "reachability")


class MetricError(ValueError):
    pass


class NestednessError(AssertionError):
    pass


@dataclass
class MetricsRow:
    alpha: float
    ecr: float
    apss: float
    coverage_efficiency: float | None
    valid: bool
    n_test: int
    reachability: float
    tau: float = math.inf
    k: int = 0


def ecr(results: Sequence[PredictionResult]) -> float:
    """Fraction of queries whose answer set meets the gold answers."""
    if not results:
        raise MetricError("no prediction results")
    if any(r.covered is None for r in results):
        raise MetricError("ECR needs gold answers for every query")
    return sum(bool(r.covered) for r in results) / len(results)


def apss(results: Sequence[PredictionResult]) -> float:
    if not results:
        raise MetricError("no prediction results")
    return sum(r.size for r in results) / len(results)


def coverage_efficiency(ecr_value: float, apss_value: float) -> float | None:
    """ECR / APSS as a fraction, or None when the sets are all empty."""
    if apss_value <= 0:
        return None
    return ecr_value / apss_value


def pool_reachability(test_pools: dict, test_answers: dict) -> float:
    """Fraction of test queries with a retrieved path ending in an answer."""
    if not test_pools:
        return math.nan
    hit = 0
    for qid, pool in test_pools.items():
        ans = test_answers[qid]
        hit += any(sp.path.hops > 0 and sp.path.terminal in ans for sp in pool)
    return hit / len(test_pools)


def check_nested(predictions: dict[float, list[PredictionResult]]) -> None:
    """Raise unless answer sets shrink as alpha grows, query by query."""
    alphas = sorted(predictions)
    for a1, a2 in zip(alphas, alphas[1:]):
        for r1, r2 in zip(predictions[a1], predictions[a2]):
            if r1.query_id != r2.query_id:
                raise NestednessError("prediction lists are not aligned by query")
            if not set(r2.answers) <= set(r1.answers):
                raise NestednessError(f"query {r1.query_id}: set at alpha={a2} not inside set at alpha={a1}")
        if apss(predictions[a2]) > apss(predictions[a1]):
            raise NestednessError(f"APSS increases from alpha={a1} to alpha={a2}")


@dataclass
class GridResult:
    rows: list[MetricsRow]
    thresholds: list[Threshold]
    predictions: dict[float, list[PredictionResult]] = field(default_factory=dict)


def run_alpha_grid(cal_scores: Sequence[NonconformityScore], test_pools: dict, test_answers: dict,
                   alphas=DEFAULT_ALPHAS) -> GridResult:
    """Calibrate once per alpha on the same scores and predict every test query."""
    qids = sorted(test_pools)
    reach = pool_reachability(test_pools, test_answers)
    rows, thresholds, preds = [], [], {}
    for alpha in alphas:
        th = calibrate(list(cal_scores), alpha)
        res = [predict(test_pools[q], th.tau, test_answers[q], q) for q in qids]
        e, s = ecr(res), apss(res)
        rows.append(MetricsRow(alpha, e, s, coverage_efficiency(e, s), e >= 1 - alpha, len(res), reach,
                               th.tau, th.k))
        thresholds.append(th)
        preds[alpha] = res
    check_nested(preds)
    return GridResult(rows, thresholds, preds)


# -- reports ------------------------------------------------------------------


def _num(x):
    if x is None:
        return ""
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float) and math.isinf(x):
        return "inf"
    return repr(x)


def rows_to_csv(rows: Sequence[MetricsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in rows:
        w.writerow([_num(getattr(r, f)) for f in CSV_FIELDS])
    return buf.getvalue()


def rows_from_csv(text: str) -> list[MetricsRow]:
    out = []
    for rec in csv.DictReader(io.StringIO(text)):
        ce = rec["coverage_efficiency"]
        out.append(MetricsRow(
            alpha=float(rec["alpha"]), ecr=float(rec["ecr"]), apss=float(rec["apss"]),
            coverage_efficiency=float(ce) if ce else None, valid=rec["valid"] == "true",
            n_test=int(rec["n_test"]), reachability=float(rec["reachability"]),
        ))
    return out


def rows_to_table(rows: Sequence[MetricsRow]) -> str:
    """Human-readable table; invalid rows show ``--`` like a failed method."""
    lines = [f"{'alpha':>6} {'ECR(%)':>8} {'APSS':>8} {'CE(%)':>8} {'reach':>6} {'n':>6}"]
    for r in rows:
        if r.valid:
            ce = "n/a" if r.coverage_efficiency is None else f"{100 * r.coverage_efficiency:.2f}"
            cells = (f"{100 * r.ecr:.1f}", f"{r.apss:.2f}", ce)
        else:
            cells = ("--", "--", "--")
        lines.append(f"{r.alpha:>6.2f} {cells[0]:>8} {cells[1]:>8} {cells[2]:>8} "
                     f"{r.reachability:>6.3f} {r.n_test:>6d}")
    return "\n".join(lines) + "\n"


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def emit_report(rows: Sequence[MetricsRow], out_dir, manifest: dict | None = None, stem="report"):
    """Write ``<stem>.csv``, ``<stem>.json`` and ``<stem>.txt``; returns the paths."""
    if not rows:
        raise MetricError("no rows to report")
    out = FsPath(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = dict(manifest or {})
    manifest.setdefault("reachability", rows[0].reachability)
    doc = {
        "manifest": manifest,
        "rows": [{k: (v if not (isinstance(v, float) and math.isinf(v)) else "inf")
                  for k, v in asdict(r).items()} for r in rows],
    }
    paths = (out / f"{stem}.csv", out / f"{stem}.json", out / f"{stem}.txt")
    paths[0].write_text(rows_to_csv(rows), encoding="utf-8")
    paths[1].write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    paths[2].write_text(rows_to_table(rows), encoding="utf-8")
    return paths
