# %% [markdown]
# Graphs, paths and ground truth on a toy example.

# %%
from cpr.kg import Path, Query, extend, ground_truth_paths, load_graph

g = load_graph([
    "alice\tpeople.person.place_of_birth\tparis",
    "paris\tlocation.location.containedby\tfrance",
    "alice\tpeople.person.nationality\tfrance",
    "paris\tlocation.location.contains\teiffel_tower",
])
print(g.to_tsv())

# %%
# neighbors come back sorted by (relation id, tail id)
a = g.entity_id("alice")
for r, t in g.neighbors(a):
    print(g.relations.label(r), "->", g.entities.label(t))

# %%
p = Path(a)
p = extend(g, p, g.relation_id("people.person.place_of_birth"), g.entity_id("paris"), max_hop=2)
p = extend(g, p, g.relation_id("location.location.containedby"), g.entity_id("france"), max_hop=2)
print(" -> ".join(p.to_labels(g)), "| terminal:", g.entities.label(p.terminal))

# %%
# every walk of at most two hops that ends in an answer
q = Query("demo", "what country is alice from", (a,), frozenset({g.entity_id("france")}))
for gp in ground_truth_paths(g, q, max_hop=2, cap=10):
    print(gp.hops, " -> ".join(gp.to_labels(g)))
