import json
import random
from pathlib import Path

import mpmath
import numpy as np
import pytest

from hypermem.embedding import HashingEmbedder, ScriptedEmbedder
from hypermem.memory import MemoryHypergraph, apply_insert
from hypermem.retrieval import GraphIndex
from hypermem.synthetic import random_graph

FIXTURES = Path(__file__).parent / "fixtures"

mpmath.mp.dps = 40


def mp_cosine(a, b):
    a = [mpmath.mpf(float(x)) for x in a]
    b = [mpmath.mpf(float(x)) for x in b]
    dot = mpmath.fsum(x * y for x, y in zip(a, b))
    return dot / (mpmath.sqrt(mpmath.fsum(x * x for x in a)) * mpmath.sqrt(mpmath.fsum(y * y for y in b)))


def full_sort(query, items):
    """Brute-force ranking: exact scores of the stored float32 vectors, then id."""
    keyed = [(-mp_cosine(query, vec), item_id) for item_id, vec in items.items()]
    return [item_id for _, item_id in sorted(keyed)]


def union_oracle(index, queries, candidates, n_v):
    vecs = {v: index.graph.nodes[v].embedding for v in candidates}
    out = set()
    for q in queries:
        out |= set(full_sort(index.query_vector(q), vecs)[:n_v])
    return out


def neighborhood_oracle(m, g, anchor):
    verts = m.points[anchor].vertex_ids
    out = set()
    for v in verts:
        for p in m.points.values():
            if v in p.vertex_ids:
                out |= p.vertex_ids
        for e in g.edges.values():
            if e.source == v:
                out.add(e.target)
            if e.target == v:
                out.add(e.source)
    return out - verts


def evidence_oracle(index, entity_ids, q, n_e, n_d):
    g = index.graph
    edges = {e.id: e.embedding for e in g.edges.values() if e.source in entity_ids or e.target in entity_ids}
    chunks = {c: g.chunks[c].embedding for v in entity_ids for c in g.nodes[v].chunk_ids}
    qv = index.query_vector(q)
    return full_sort(qv, edges)[:n_e], full_sort(qv, chunks)[:n_d]


def read_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def scripted_graph(seed, n_entities=30, n_edges=60, n_chunks=10, dim=8, dup_rate=0.2):
    """Random graph whose items carry random vectors, some duplicated to force score ties."""
    rng = np.random.default_rng(seed)
    g = random_graph(n_entities, n_edges, n_chunks, seed=seed)
    pool = []
    for table in (g.nodes, g.edges, g.chunks):
        for i in sorted(table):
            if pool and rng.random() < dup_rate:
                vec = pool[int(rng.integers(len(pool)))].copy()
            else:
                vec = rng.standard_normal(dim).astype(np.float32)
                pool.append(vec)
            table[i].embedding = vec
    queries = {f"query {k}": rng.standard_normal(dim).tolist() for k in range(5)}
    # a query equal to an item vector makes its best match a tie among duplicates
    queries["query dup"] = pool[0].tolist()
    return g, ScriptedEmbedder(queries), sorted(queries)


def random_memory(g, seed, n_points=4):
    rng = random.Random(seed)
    m = MemoryHypergraph()
    ids = sorted(g.nodes)
    for _ in range(n_points):
        members = rng.sample(ids, rng.randint(2, min(4, len(ids))))
        apply_insert(m, g, f"point over {', '.join(members)}", [g.nodes[v].name for v in members])
    return m


@pytest.fixture
def small_graph():
    g, emb, queries = scripted_graph(7, n_entities=12, n_edges=20, n_chunks=6)
    return g, GraphIndex(g, emb), queries


@pytest.fixture
def hashing_index():
    g = random_graph(25, 50, 10, seed=3)
    return g, GraphIndex(g, HashingEmbedder(64))


# criterion number -> (passed, detail); filled by test_acceptance, printed at the end of the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
