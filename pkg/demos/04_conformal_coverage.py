# %% [markdown]
# Split conformal thresholds on synthetic scores: coverage lands between
# 1 - alpha and 1 - alpha + 1/(n + 1).

# %%
from cpr.conformal import calibrate, coverage_trial

print(calibrate(list(range(1, 10)), 0.5))
print(calibrate([1.0, 2.0, 3.0, 4.0], 0.1))

# %%
n_cal = 100
for alpha in (0.1, 0.3, 0.5, 0.8):
    rate = coverage_trial(lambda rng, shape: rng.exponential(size=shape), n_cal, alpha, 10_000, seed=1)
    print(f"alpha={alpha:.1f}  coverage={rate:.4f}  band=[{1 - alpha:.3f}, {1 - alpha + 1 / (n_cal + 1):.3f}]")
