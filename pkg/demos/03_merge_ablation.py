"""How merging changes the shape of the memory.

Runs the same queries over a synthetic corpus with and without merging and
compares the average number of entities per live memory point (Avg-N_v).
Without merges every point keeps the two or three entities it was inserted
with; merges fold related points into wider hyperedges.
"""

import numpy as np

from hypermem import GraphIndex, HashingEmbedder, HeuristicLLM, SessionConfig, run_session
from hypermem.graph import extract_graph
from hypermem.synthetic import chunk_corpus, random_corpus

rows = []
for seed in range(3):
    docs = random_corpus(4, 40, seed=seed)
    g, _ = extract_graph(chunk_corpus(docs), HeuristicLLM(seed=seed), HashingEmbedder(64))
    names = sorted(n.name for n in g.nodes.values())
    query = f"What links {names[0]} and {names[-1]}?"
    for merge in (True, False):
        gg = g.copy()
        _, trace = run_session(query, gg, SessionConfig(enable_merge=merge), HeuristicLLM(seed=seed), GraphIndex(gg, HashingEmbedder(64)))
        s = trace.summary()
        rows.append((seed, merge, s["live_points"], s["avg_entities_per_point"]))

print(f"{'corpus':>6} {'merge':>6} {'points':>7} {'Avg-N_v':>8}")
for seed, merge, points, nv in rows:
    print(f"{seed:>6} {str(merge):>6} {points:>7} {nv:>8.2f}")

on = np.mean([r[3] for r in rows if r[1]])
off = np.mean([r[3] for r in rows if not r[1]])
print(f"\nmean Avg-N_v: {on:.2f} with merging, {off:.2f} without")
