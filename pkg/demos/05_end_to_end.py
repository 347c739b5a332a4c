# %% [markdown]
# Generate a benchmark, fit on the training split, calibrate, and compare
# with hop-by-hop calibration. Takes around ten seconds.

# %%
from cpr.conformal import hop_level_calibrate_baseline
from cpr.evaluation import ecr, rows_to_table
from cpr.pipeline import PipelineConfig, run_pipeline, three_way_split
from cpr.synth import SynthConfig, generate, verify

ds = generate(SynthConfig(n_queries=1000, min_hop=2, max_hop=2, seed=7))
print(verify(ds))
split = three_way_split(ds.queries, n_cal=250, n_test=250, seed=7)
res = run_pipeline(ds.graph, split, PipelineConfig(seed=7))
print(rows_to_table(res.grid.rows))
print({k: round(v, 1) for k, v in res.timings.items()})

# %%
# per-hop thresholds prune at hop 1 and again at hop 2; coverage compounds
answers = {q.id: q.answers for q in split.calibration + split.test}
cal = [(qid, res.cal_pools[qid], answers[qid]) for qid in sorted(res.cal_pools)]
test = [(qid, res.test_pools[qid], answers[qid]) for qid in sorted(res.test_pools)]
for alpha in (0.3, 0.5, 0.7):
    hop = ecr(hop_level_calibrate_baseline(cal, test, (alpha, alpha)).predictions)
    path = next(r.ecr for r in res.grid.rows if r.alpha == alpha)
    print(f"alpha={alpha}  target {1 - alpha:.2f}  path-level {path:.3f}  hop-level {hop:.3f}")
