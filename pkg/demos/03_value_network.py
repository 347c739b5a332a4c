# %% [markdown]
# The value network starts out equal to the semantic baseline and learns a
# residual from ranking pairs.

# %%
import numpy as np

from cpr.rcvnet import PairData, TrainConfig, forward_batch, init_params, pair_loss, train, v_sem

rng = np.random.default_rng(0)
d = 8
params = init_params(d, width=32, seed=0)
X = rng.uniform(-1, 1, (5, 3))
C = rng.standard_normal((5, 3 * d))
print("zero-init equals baseline:", np.array_equal(forward_batch(params, X, C), v_sem(X)))
print("loss at margins -2, 0, 2:", [round(pair_loss(m, 0.0), 6) for m in (-2, 0, 2)])

# %%
# positives look semantically worse but carry a high relation prior
n = 300
X = rng.uniform(-1, 1, (2 * n, 3))
X[:n, 2], X[n:, 2] = rng.uniform(0.7, 1, n), rng.uniform(0, 0.3, n)
X[:n, :2], X[n:, :2] = rng.uniform(-0.5, 0, (n, 2)), rng.uniform(0, 0.5, (n, 2))
data = PairData(X, rng.standard_normal((2 * n, 3 * d)), np.arange(n), np.arange(n, 2 * n))
print("baseline pair accuracy:", np.mean(v_sem(X[:n]) < v_sem(X[n:])))
params, log = train(data, d, 32, TrainConfig(epochs=6, seed=0))
for row in log:
    print(f"epoch {row.epoch}  loss {row.mean_loss:.4f}  accuracy {row.pairwise_accuracy:.3f}")
