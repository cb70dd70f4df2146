"""Follow one retrieval session step by step.

Each step prints the subqueries, which mode served them, and how the memory
changed. The final memory is rendered the way the answer prompt sees it,
then the trace is replayed from its deltas alone.
"""

import tempfile
from pathlib import Path

from hypermem import GraphIndex, HashingEmbedder, HeuristicLLM, SessionConfig, replay_trace, run_session
from hypermem.indexing import build_index, open_index
from hypermem.memory import lineage_chain, render_memory
from hypermem.traces import save_trace

CORPUS = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "golden" / "corpus"
QUERY = "Why did the Guild of Tides fall out with Mara Quell?"

work = Path(tempfile.mkdtemp())
build_index(CORPUS, work / "index", HeuristicLLM(), HashingEmbedder(256))
g, _ = open_index(work / "index")
pristine = g.copy()

answer, trace = run_session(QUERY, g, SessionConfig(max_steps=4), HeuristicLLM(seed=3), GraphIndex(g, HashingEmbedder(256)))

for s in trace.steps:
    ops = {op: sum(1 for r in s.report if r["op"] == op and r["status"] == "applied") for op in ("update", "insert", "merge")}
    print(f"step {s.step}  sufficient={s.sufficient}  " + "  ".join(f"{k}={v}" for k, v in ops.items()))
    for r in s.retrieval:
        sq = r["subquery"]
        label = "seed" if sq.get("seed") else r["route"]
        print(f"    [{label:>7}] {sq['text'][:60]!r} -> {len(r['entities'])} entities")

m = trace.final_memory()
print(f"\nterminated by {trace.termination}; {len(m.points)} live points, {len(m.retired)} retired")
print(render_memory(m)[:800])
for pid in sorted(m.points):
    chain = lineage_chain(m, pid)
    if chain:
        print(f"\nlineage of {pid}:")
        print("\n".join("  " + line for line in chain))

print(f"\nanswer: {answer[:300]}")

path = save_trace(trace, work / "trace")
print(f"\ntrace written to {path}: {sorted(p.name for p in path.iterdir())}")
print("replay reproduces the final memory:", replay_trace(trace, pristine) == m)
