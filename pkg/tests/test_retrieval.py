import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import evidence_oracle, neighborhood_oracle, random_memory, scripted_graph, union_oracle
from hypermem.embedding import HashingEmbedder
from hypermem.graph import KnowledgeGraph, RelationEdge, edge_id
from hypermem.memory import MemoryHypergraph, apply_insert, apply_merge
from hypermem.retrieval import (
    GLOBAL,
    LOCAL,
    GraphIndex,
    StaleAnchorError,
    Subquery,
    exploration_scope,
    gather_evidence,
    global_exploration,
    local_investigation,
    local_neighborhood,
    retrieve_entities,
)


def path_graph():
    g = KnowledgeGraph()
    for n in ("A", "B", "C", "Lone"):
        g.ensure_node(n)
    g.add_edge(RelationEdge(edge_id("a", "b", "ab"), "a", "b", "ab"))
    g.add_edge(RelationEdge(edge_id("b", "c", "bc"), "b", "c", "bc"))
    return g


def test_subquery_validation():
    with pytest.raises(ValueError):
        Subquery("x", LOCAL)
    with pytest.raises(ValueError):
        Subquery("x", GLOBAL, "P0001")
    with pytest.raises(ValueError):
        Subquery("x", "sideways")
    q = Subquery("x", LOCAL, "P0002", origin_step=3)
    assert Subquery.from_record(q.to_record()) == q


def test_retrieve_entities_examples(small_graph):
    g, index, queries = small_graph
    assert retrieve_entities([], set(g.nodes), 5, index) == set()
    assert retrieve_entities(queries[:1], set(), 5, index) == set()
    some = sorted(g.nodes)[0]
    assert retrieve_entities(queries[:1], {some}, 3, index) == {some}


@pytest.mark.parametrize("seed", range(8))
def test_retrieve_entities_matches_union_oracle(seed):
    g, emb, queries = scripted_graph(seed, n_entities=40, n_edges=50)
    index = GraphIndex(g, emb)
    chosen = random.Random(seed).sample(queries, 3)
    got = retrieve_entities(chosen, set(g.nodes), 5, index)
    assert got == union_oracle(index, chosen, set(g.nodes), 5)
    assert len(got) <= 15


def test_local_examples():
    g = path_graph()
    index = GraphIndex(g, HashingEmbedder(16))
    m = MemoryHypergraph()
    pid = apply_insert(m, g, "lone and a", ["Lone", "A"])
    assert local_neighborhood(m, g, pid) == {"b"}
    assert local_investigation(Subquery("who", LOCAL, pid), m, g, 5, index) == {"b"}

    iso = KnowledgeGraph()
    iso.ensure_node("X"), iso.ensure_node("Y")
    m2 = MemoryHypergraph()
    p2 = apply_insert(m2, iso, "xy", ["X", "Y"])
    assert local_neighborhood(m2, iso, p2) == set()
    assert local_investigation(Subquery("q", LOCAL, p2), m2, iso, 5, GraphIndex(iso, HashingEmbedder(8))) == set()


def test_local_rejects_wrong_mode_and_stale_anchor():
    g = path_graph()
    index = GraphIndex(g, HashingEmbedder(16))
    m = MemoryHypergraph()
    a = apply_insert(m, g, "ab", ["A", "B"])
    b = apply_insert(m, g, "bc", ["B", "C"])
    apply_merge(m, a, b, "abc")
    with pytest.raises(StaleAnchorError) as err:
        local_investigation(Subquery("q", LOCAL, a), m, g, 5, index)
    assert err.value.point_id == a
    with pytest.raises(ValueError):
        local_investigation(Subquery("q"), m, g, 5, index)
    with pytest.raises(ValueError):
        global_exploration(Subquery("q", LOCAL, b), m, g, 5, index)


@pytest.mark.parametrize("seed", range(6))
def test_local_neighborhood_matches_double_union(seed):
    g, emb, queries = scripted_graph(seed, n_entities=25, n_edges=35)
    index = GraphIndex(g, emb)
    m = random_memory(g, seed, n_points=6)
    for pid in m.points:
        cands = neighborhood_oracle(m, g, pid)
        assert local_neighborhood(m, g, pid) == cands
        got = local_investigation(Subquery(queries[0], LOCAL, pid), m, g, 5, index)
        assert got == union_oracle(index, queries[:1], cands, 5)


def test_global_examples():
    g = path_graph()
    index = GraphIndex(g, HashingEmbedder(16))
    m = MemoryHypergraph()
    assert exploration_scope(m, g) == set(g.nodes)
    apply_insert(m, g, "a and lone", ["A", "Lone"])
    assert exploration_scope(m, g) == {"b", "c"}
    apply_insert(m, g, "b and c", ["B", "C"])
    assert global_exploration(Subquery("q"), m, g, 5, index) == set()


@pytest.mark.parametrize("seed", range(6))
def test_global_matches_difference_oracle(seed):
    g, emb, queries = scripted_graph(seed + 50, n_entities=30)
    index = GraphIndex(g, emb)
    m = random_memory(g, seed, n_points=5)
    got = global_exploration(Subquery(queries[-1]), m, g, 5, index)
    assert got == union_oracle(index, queries[-1:], set(g.nodes) - set(m.vertices), 5)
    assert not got & set(m.vertices)


def test_gather_evidence_examples():
    g = KnowledgeGraph()
    g.ensure_node("Hermit")
    index = GraphIndex(g, HashingEmbedder(8))
    ev = gather_evidence({"hermit"}, g, "q", 10, 5, index)
    assert [e.id for e in ev.entities] == ["hermit"] and ev.relations == [] and ev.chunks == []


@pytest.mark.parametrize("seed", range(6))
def test_gather_evidence_matches_sort_and_truncate(seed):
    g, emb, queries = scripted_graph(seed, n_entities=20, n_edges=60, n_chunks=60)
    index = GraphIndex(g, emb)
    ents = set(random.Random(seed).sample(sorted(g.nodes), 6))
    for n_e, n_d in ((10, 5), (1000, 1000), (0, 0)):
        ev = gather_evidence(ents, g, queries[1], n_e, n_d, index)
        rel, chk = evidence_oracle(index, ents, queries[1], n_e, n_d)
        assert [r.id for r in ev.relations] == rel
        assert [c.id for c in ev.chunks] == chk
        for r in ev.relations:
            assert r.source in ents or r.target in ents
        for c in ev.chunks:
            assert any(c.id in g.nodes[v].chunk_ids for v in ents)


def test_sync_picks_up_new_nodes():
    g = path_graph()
    index = GraphIndex(g, HashingEmbedder(16))
    g.ensure_node("Newcomer")
    assert "newcomer" not in index.entities
    index.sync()
    assert "newcomer" in index.entities
    assert g.nodes["newcomer"].embedding is not None


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.data())
def test_union_is_monotone_in_queries(seed, n_v, data):
    g, emb, queries = scripted_graph(seed % 97, n_entities=15, n_edges=20, n_chunks=4)
    index = GraphIndex(g, emb)
    q1 = data.draw(st.lists(st.sampled_from(queries), min_size=1, max_size=3))
    q2 = data.draw(st.lists(st.sampled_from(queries), max_size=3))
    cands = set(data.draw(st.lists(st.sampled_from(sorted(g.nodes)), max_size=15)))
    small = retrieve_entities(q1, cands, n_v, index)
    assert small <= retrieve_entities(q1 + q2, cands, n_v, index)
    assert small <= cands and len(small) <= len(q1) * n_v
