# %% [markdown]
# Tree search over relations. Rollouts pick relations by PUCT, rewards flow
# back into visit statistics and a per-relation Beta prior.

# %%
import numpy as np

from cpr.embed import HashEmbedder
from cpr.kg import Query, load_graph
from cpr.puct import RolloutConfig, collect_pairs, explore_query, puct_score

print("unvisited arm, c=2, prior 0.5, parent visits 2:", round(puct_score(0, 0.5, 2, 0, 2.0), 4))
print("twice-visited zero-value arm:               ", round(puct_score(0, 0.5, 2, 2, 2.0), 4))

# %%
g = load_graph([
    "t\tfilm.film.director\td",
    "t\tfilm.film.language\tlang",
    "d\tpeople.person.place_of_birth\tcity",
    "d\tpeople.person.gender\tmale",
    "lang\tlanguage.human_language.region\tregion",
])
q = Query("q", "where was the director of t born", (g.entity_id("t"),), frozenset({g.entity_id("city")}))
delta, stats, log = explore_query(g, q, HashEmbedder(64), RolloutConfig(rollouts_per_query=32), seed=0)
print(f"success rate {np.mean([r for _, r in log]):.2f}")
for r in delta.relations():
    print(f"{g.relations.label(r):34s} Beta{delta.get(r)}  rho={delta.rho(r):.3f}")

# %%
pairs = collect_pairs(g, q, max_hop=2)
for i, j in pairs.pairs:
    print("prefer", pairs.positives[i].to_labels(g), "over", pairs.negatives[j].to_labels(g))
