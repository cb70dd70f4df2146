"""Acceptance checks, one test per criterion.

Each check returns a one-line summary; the verdicts are printed at the end of
a pytest run (see ``conftest.pytest_terminal_summary``) or directly when the
module is run as a script::

    python tests/test_acceptance.py
"""

import json
import math
import random
import shutil
import sys
import tempfile
from pathlib import Path

import mpmath
import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import (  # noqa: E402
    ACCEPTANCE,
    FIXTURES,
    evidence_oracle,
    full_sort,
    mp_cosine,
    neighborhood_oracle,
    random_memory,
    read_jsonl,
    scripted_graph,
    union_oracle,
)
from hypermem.assets import score_levels  # noqa: E402
from hypermem.cli import main as cli  # noqa: E402
from hypermem.embedding import HashingEmbedder, VectorIndex, cosine_similarity, top_k  # noqa: E402
from hypermem.eval import read_manifest, run_eval  # noqa: E402
from hypermem.graph import extract_graph  # noqa: E402
from hypermem.indexing import build_index, open_index  # noqa: E402
from hypermem.memory import MemoryDelta, MemoryHypergraph, apply_delta, invariant_violations  # noqa: E402
from hypermem.orchestrator import SessionConfig, replay_trace, run_session, run_stepwise  # noqa: E402
from hypermem.providers import ScriptedLLM  # noqa: E402
from hypermem.retrieval import (  # noqa: E402
    LOCAL,
    GraphIndex,
    Subquery,
    gather_evidence,
    global_exploration,
    local_investigation,
    local_neighborhood,
    retrieve_entities,
)
from hypermem.synthetic import HeuristicLLM, chunk_corpus, random_corpus, random_graph  # noqa: E402
from hypermem.traces import load_trace  # noqa: E402

GOLDEN = FIXTURES / "golden"
XODAR = FIXTURES / "xodar"
GOLDEN_QUERIES = read_jsonl(GOLDEN / "queries.jsonl")


def quiet(*argv):
    """Run the CLI with stdout/stderr swallowed; return its exit code."""
    import contextlib
    import io

    with contextlib.redirect_stdout(io.StringIO()), contextlib.redirect_stderr(io.StringIO()):
        return cli([str(a) for a in argv])


def session_graphs(g0, trace):
    """Yield (step record, memory before the step, graph before the step, memory after, graph after)."""
    g = g0.copy()
    m = MemoryHypergraph(keep_merge_parents=trace.config.get("keep_merge_parents", False))
    for rec in trace.steps:
        before_m, before_g = m.copy(), g.copy()
        apply_delta(m, g, MemoryDelta.from_record(rec.delta), rec.step)
        yield rec, before_m, before_g, m, g


# -- 1 ------------------------------------------------------------------------


def check_retrieval_oracles(workdir):
    counts = dict.fromkeys(("retrieve", "local", "global", "evidence"), 0)
    for i in range(200):
        rng = random.Random(i)
        n = rng.randint(3, 50)
        g, emb, queries = scripted_graph(
            1000 + i, n, rng.randint(n, 3 * n), rng.randint(2, 30), dim=rng.choice([3, 8, 16]), dup_rate=0.25
        )
        index = GraphIndex(g, emb)
        m = random_memory(g, i, n_points=rng.randint(1, 5))
        n_v = rng.randint(1, 6)

        qs = rng.sample(queries, rng.randint(1, 3))
        cands = set(rng.sample(sorted(g.nodes), rng.randint(0, n)))
        assert retrieve_entities(qs, cands, n_v, index) == union_oracle(index, qs, cands, n_v), f"instance {i}"
        counts["retrieve"] += 1

        anchor = rng.choice(sorted(m.points))
        q = rng.choice(queries)
        got = local_investigation(Subquery(q, LOCAL, anchor), m, g, n_v, index)
        assert got == union_oracle(index, [q], neighborhood_oracle(m, g, anchor), n_v), f"instance {i}"
        counts["local"] += 1

        got = global_exploration(Subquery(q), m, g, n_v, index)
        assert got == union_oracle(index, [q], set(g.nodes) - set(m.vertices), n_v), f"instance {i}"
        counts["global"] += 1

        ents = set(rng.sample(sorted(g.nodes), rng.randint(1, min(n, 8))))
        n_e, n_d = rng.randint(0, 12), rng.randint(0, 6)
        ev = gather_evidence(ents, g, q, n_e, n_d, index)
        rel, chk = evidence_oracle(index, ents, q, n_e, n_d)
        assert [r.id for r in ev.relations] == rel and [c.id for c in ev.chunks] == chk, f"instance {i}"
        counts["evidence"] += 1
    return "200 instances, exact match: " + ", ".join(f"{k} {v}" for k, v in counts.items())


# -- 2 and 3 ------------------------------------------------------------------

_SESSIONS = []


def random_sessions():
    """100 heuristic sessions over random graphs with varied strategies and flags (cached)."""
    if not _SESSIONS:
        for i in range(100):
            rng = random.Random(5000 + i)
            n = rng.randint(12, 45)
            g = random_graph(n, rng.randint(n, 3 * n), rng.randint(3, 15), seed=5000 + i)
            g0 = g.copy()
            cfg = SessionConfig(
                max_steps=rng.randint(2, 6),
                strategy=rng.choice(["adaptive", "adaptive", "global-only", "local-only"]),
                n_v=rng.randint(2, 6),
                enable_merge=rng.random() < 0.8,
                enable_update=rng.random() < 0.8,
                keep_merge_parents=rng.random() < 0.1,
            )
            llm = HeuristicLLM(seed=i, local_rate=rng.random(), update_rate=rng.random())
            q = f"How do {g.nodes[sorted(g.nodes)[0]].name} and {g.nodes[sorted(g.nodes)[-1]].name} relate?"
            _, trace = run_session(q, g, cfg, llm, GraphIndex(g, HashingEmbedder(32)))
            _SESSIONS.append((g0, trace))
    return _SESSIONS


def check_mode_invariants(workdir):
    local = global_ = 0
    bad = []
    for k, (g0, trace) in enumerate(random_sessions()):
        for rec, m, g, _, _ in session_graphs(g0, trace):
            for r in rec.retrieval:
                ents = set(r["entities"])
                if r["route"] == LOCAL:
                    anchor = r.get("remapped_anchor") or r["subquery"]["anchor_point"]
                    if not ents <= local_neighborhood(m, g, anchor):
                        bad.append((k, rec.step, "local"))
                    local += 1
                else:
                    if ents & set(m.vertices):
                        bad.append((k, rec.step, "global"))
                    global_ += 1
    assert not bad, f"violations: {bad[:5]}"
    assert local and global_
    return f"100 sessions, {global_} global and {local} local retrievals, 0 violations"


def xodar_session(workdir):
    expected = json.loads((XODAR / "expected.json").read_text())
    llm = ScriptedLLM.from_file(XODAR / "llm.jsonl")
    build_index(XODAR / "corpus", workdir / "xodar-index", llm, HashingEmbedder(256))
    g, _ = open_index(workdir / "xodar-index")
    g0 = g.copy()
    answer, trace = run_session(expected["query"], g, SessionConfig(), llm, GraphIndex(g, HashingEmbedder(256)))
    return expected, g0, answer, trace


def check_hypergraph_invariants(workdir):
    sessions = list(random_sessions())
    _, g0, _, trace = xodar_session(workdir)
    sessions.append((g0, trace))
    steps = merges = 0
    bad = []
    for k, (g0, trace) in enumerate(sessions):
        for rec, _, _, m, g in session_graphs(g0, trace):
            snapshot = MemoryHypergraph.from_records(rec.memory)
            problems = invariant_violations(snapshot, g)
            if snapshot != m:
                problems.append("snapshot differs from replay")
            bad += [(k, rec.step, p) for p in problems]
            steps += 1
            merges += rec.count("merge")
    assert not bad, f"violations: {bad[:5]}"
    return f"{len(sessions)} sessions, {steps} steps, {merges} merges checked, 0 violations"


# -- 4 ------------------------------------------------------------------------


def golden_index(workdir):
    idx = workdir / "golden-index"
    if not (idx / "index.json").exists():
        assert quiet("index", "--corpus", GOLDEN / "corpus", "--out", idx) == 0
    return idx


def trace_steps(trace_dir):
    return [json.loads(line) for line in (trace_dir / "steps.jsonl").read_text().splitlines()]


def check_ablation_grid(workdir):
    idx = golden_index(workdir)
    grid = {
        "no-merge": ["--no-merge"],
        "no-update": ["--no-update"],
        "global-only": ["--strategy", "global-only"],
        "local-only": ["--strategy", "local-only"],
    }
    bad = []
    seeds_seen = 0
    for name, flags in grid.items():
        for k, q in enumerate(GOLDEN_QUERIES):
            out = workdir / "ablation" / f"{name}-{k}"
            assert quiet("query", q["query"], "--index", idx, "--trace-dir", out, "--provider", f"heuristic:{k}", *flags) == 0
            steps = trace_steps(out)
            for s in steps:
                applied = {op: sum(1 for i in s["report"] if i["op"] == op and i["status"] == "applied") for op in ("update", "merge")}
                if name == "no-merge" and (s["delta"]["merges"] or applied["merge"]):
                    bad.append((name, k, s["step"], "merge"))
                if name == "no-update" and (s["delta"]["updates"] or applied["update"]):
                    bad.append((name, k, s["step"], "update"))
                for r in s["retrieval"]:
                    sq = r["subquery"]
                    if sq.get("seed"):
                        seeds_seen += 1
                        if sq["mode"] != "global":
                            bad.append((name, k, s["step"], "seed not global"))
                        continue
                    if s["step"] == 0:
                        bad.append((name, k, 0, "unlabelled step-0 subquery"))
                    if name == "global-only" and (sq["mode"], r["route"]) != ("global", "global"):
                        bad.append((name, k, s["step"], sq["mode"]))
                    if name == "local-only" and (sq["mode"], r["route"]) != ("local", "local"):
                        bad.append((name, k, s["step"], sq["mode"]))
            if name == "no-merge":
                for snap in sorted((out / "memory").glob("step_*.jsonl")):
                    for line in snap.read_text().splitlines():
                        rec = json.loads(line)
                        if rec["kind"] == "point" and (rec["lineage"] or rec["status"] == "retired"):
                            bad.append((name, k, snap.name, "lineage"))
    assert not bad, f"violations: {bad[:5]}"
    return f"{len(grid)} ablations x {len(GOLDEN_QUERIES)} queries, {seeds_seen} labelled seed subqueries, 0 violations"


# -- 5 ------------------------------------------------------------------------


def check_avg_nv_direction(workdir):
    means = {}
    for merge in (True, False):
        values = []
        for seed in range(4):
            docs = random_corpus(4, 40, seed=seed)
            g, _ = extract_graph(chunk_corpus(docs), HeuristicLLM(seed=seed), HashingEmbedder(64))
            index = GraphIndex(g, HashingEmbedder(64))
            names = sorted(n.name for n in g.nodes.values())
            for k in range(3):
                q = f"What links {names[k]} and {names[-1 - k]}?"
                _, trace = run_session(q, g, SessionConfig(enable_merge=merge), HeuristicLLM(seed=seed * 10 + k), index)
                values.append(trace.summary()["avg_entities_per_point"])
        means[merge] = sum(values) / len(values)
    gap = means[True] - means[False]
    detail = f"mean Avg-N_v {means[True]:.2f} with merging vs {means[False]:.2f} without (gap {gap:.2f}, need >= 1.0)"
    assert gap >= 1.0, detail
    return detail


# -- 6 ------------------------------------------------------------------------


def golden_suite(root):
    """Index, five sessions and an eval under ``root``, all through the CLI."""
    assert quiet("index", "--corpus", GOLDEN / "corpus", "--out", root / "index") == 0
    manifest = []
    for k, q in enumerate(GOLDEN_QUERIES):
        trace = root / "traces" / q["id"]
        assert quiet("query", q["query"], "--index", root / "index", "--trace-dir", trace, "--provider", f"heuristic:{k}") == 0
        manifest.append({**q, "trace": f"traces/{q['id']}", "source": (GOLDEN / "corpus" / "harbour.txt").read_text()})
    (root / "results.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in manifest))
    assert quiet("eval", root / "results.jsonl", "--report", root / "report.json") == 0


def check_determinism_and_replay(workdir):
    work = workdir / "golden-run"
    golden_suite(work)
    shutil.move(str(work), str(workdir / "golden-first"))
    golden_suite(work)
    first = workdir / "golden-first"
    files = sorted(p.relative_to(work) for p in work.rglob("*") if p.is_file() and p.name != "timing.jsonl")
    other = sorted(p.relative_to(first) for p in first.rglob("*") if p.is_file() and p.name != "timing.jsonl")
    assert files == other, "different file sets"
    differing = [str(f) for f in files if (work / f).read_bytes() != (first / f).read_bytes()]
    assert not differing, f"files differ: {differing[:5]}"
    g, _ = open_index(work / "index")
    for q in GOLDEN_QUERIES:
        trace = load_trace(work / "traces" / q["id"])
        assert replay_trace(trace, g) == trace.final_memory(), q["id"]
    return f"{len(files)} files byte-identical across two runs; {len(GOLDEN_QUERIES)} final memories replayed exactly"


# -- 7 ------------------------------------------------------------------------


def check_step_protocol(workdir):
    g, _ = open_index(golden_index(workdir))
    for k, q in enumerate(GOLDEN_QUERIES):
        cfg = SessionConfig(max_steps=6)
        gs, gp = g.copy(), g.copy()
        answers, stepwise = run_stepwise(q["query"], gs, cfg, HeuristicLLM(seed=k), GraphIndex(gs, HashingEmbedder(256)))
        _, plain = run_session(q["query"], gp, cfg, HeuristicLLM(seed=k), GraphIndex(gp, HashingEmbedder(256)))
        assert len(answers) == 6, f"{q['id']}: {len(answers)} answers"
        assert [s.memory for s in stepwise.steps] == [s.memory for s in plain.steps], q["id"]
        # an early "sufficient" verdict must not cut the stepwise protocol short
        ge = g.copy()
        early, _ = run_stepwise(q["query"], ge, cfg, HeuristicLLM(seed=k, sufficient_at=1), GraphIndex(ge, HashingEmbedder(256)))
        assert len(early) == 6
    return f"{len(GOLDEN_QUERIES)} queries: 6 answers each, per-step snapshots equal to the plain loop"


# -- 8 ------------------------------------------------------------------------


def check_case_study(workdir):
    expected, _, answer, trace = xodar_session(workdir)
    m = trace.final_memory()
    merged = m.points[expected["merged_point"]]
    parents = {pid: set(v) for pid, v in expected["parents"].items()}
    union = set().union(*parents.values())
    assert trace.termination == "sufficient"
    assert set(merged.lineage) == set(parents)
    assert set(merged.vertex_ids) == union, sorted(merged.vertex_ids)
    for pid, verts in parents.items():
        assert set(m.retired[pid].vertex_ids) == verts
    assert merged.description == expected["merged_description"]
    assert answer == expected["answer"]
    return f"merged point {merged.id} = union {sorted(union)}; answer matches the fixture exactly"


# -- 9 ------------------------------------------------------------------------


def check_numerics(workdir):
    rng = np.random.default_rng(9)
    worst = 0.0
    for k in range(10_000):
        dim = int(rng.integers(1, 65))
        a = rng.standard_normal(dim) * 10.0 ** rng.uniform(-3, 3)
        if k % 4 == 0:
            b = a * rng.uniform(0.1, 10) + rng.standard_normal(dim) * 1e-7 * np.abs(a).max()
        else:
            b = rng.standard_normal(dim) * 10.0 ** rng.uniform(-3, 3)
        if not a.any() or not b.any():
            continue
        err = abs(cosine_similarity(a, b) - float(mp_cosine(a, b)))
        worst = max(worst, err)
    assert worst <= 1e-9, f"worst error {worst:.3e}"

    ranked = 0
    for seed in range(60):
        r = np.random.default_rng(seed)
        n, dim = int(r.integers(5, 60)), int(r.integers(2, 12))
        vecs = {}
        for i in range(n):
            if vecs and r.random() < 0.3:
                vecs[f"x{i:02d}"] = vecs[f"x{int(r.integers(i)):02d}"].copy()
            else:
                vecs[f"x{i:02d}"] = r.standard_normal(dim).astype(np.float32)
        index = VectorIndex.from_items(vecs.items(), dim)
        q = vecs["x00"] if seed % 3 == 0 else r.standard_normal(dim)
        want = full_sort(q, vecs)
        for k in (1, 2, 5, n):
            assert top_k(q, list(vecs), index, k) == want[:k], f"seed {seed} k {k}"
            ranked += 1
    return f"10,000 cosine pairs, worst error {worst:.1e} (<= 1e-9); {ranked} top-k rankings equal full sort incl. ties"


# -- 10 -----------------------------------------------------------------------


def check_eval_protocol(workdir):
    fx = FIXTURES / "eval"
    expected = json.loads((fx / "expected.json").read_text())
    report = run_eval(read_manifest(fx / "manifest.jsonl"), ScriptedLLM(read_jsonl(fx / "judge.jsonl")))
    o = report["overall"]
    assert o["accuracy"] == expected["accuracy_true"] / expected["records"]
    for dim in ("comprehensiveness", "diversity"):
        assert o[f"mean_{dim}"] == expected[dim]["sum"] / expected[dim]["n"], dim
        assert report["exclusions"][dim] == expected[dim]["unscored"], dim
    levels = score_levels()
    for r in report["records"]:
        for dim, s in r["scores"].items():
            assert s is None or (0 <= s <= 100 and any(lv["low"] <= s <= lv["high"] for lv in levels[dim]["levels"]))
    return (
        f"accuracy {o['accuracy']:.2f} ({expected['accuracy_true']}/20), comprehensiveness {o['mean_comprehensiveness']:.2f}, "
        f"diversity {o['mean_diversity']:.4f} ({report['exclusions']['diversity']} unscored)"
    )


CHECKS = {
    1: check_retrieval_oracles,
    2: check_mode_invariants,
    3: check_hypergraph_invariants,
    4: check_ablation_grid,
    5: check_avg_nv_direction,
    6: check_determinism_and_replay,
    7: check_step_protocol,
    8: check_case_study,
    9: check_numerics,
    10: check_eval_protocol,
}


def run_check(n, workdir):
    try:
        detail = CHECKS[n](Path(workdir))
    except Exception as exc:
        ACCEPTANCE[n] = (False, f"{type(exc).__name__}: {exc}"[:300])
        raise
    ACCEPTANCE[n] = (True, detail)
    return detail


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.mark.parametrize("n", sorted(CHECKS))
def test_criterion(n, workdir):
    run_check(n, workdir)


if __name__ == "__main__":
    failed = 0
    with tempfile.TemporaryDirectory() as tmp:
        for n in sorted(CHECKS):
            try:
                run_check(n, tmp)
            except Exception:
                failed += 1
            ok, detail = ACCEPTANCE[n]
            print(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}", flush=True)
    sys.exit(1 if failed else 0)
