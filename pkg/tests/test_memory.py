import json
import random
from functools import reduce

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_memory
from hypermem.graph import KnowledgeGraph, normalize_name
from hypermem.memory import (
    EMPTY_MEMORY_TEXT,
    DegenerateHyperedgeError,
    Insertion,
    MemoryDelta,
    MemoryHypergraph,
    MemoryOpError,
    UnknownPointError,
    apply_delta,
    apply_insert,
    apply_merge,
    apply_update,
    avg_entities_per_hyperedge,
    describe_memory,
    invariant_violations,
    lineage_chain,
    live_descendant,
    memory_neighbors,
    render_memory,
)
from hypermem.synthetic import random_graph


def graph_of(*names):
    g = KnowledgeGraph()
    for n in names:
        g.ensure_node(n)
    return g


def incidence_oracle(m):
    out = {v: set() for v in m.vertices}
    for p in m.points.values():
        for v in p.vertex_ids:
            out[v].add(p.id)
    return out


def neighbors_oracle(m, v):
    return {u for p in m.points.values() if v in p.vertex_ids for u in p.vertex_ids} - {v}


def test_insert_smallest_hyperedge():
    g = graph_of("A", "B")
    m = MemoryHypergraph()
    pid = apply_insert(m, g, "A works with B", ["A", "B"])
    assert pid == "P0001"
    assert set(m.vertices) == {"a", "b"} and len(m.points) == 1
    assert m.incidence == {"a": {"P0001"}, "b": {"P0001"}}


def test_insert_forces_missing_entity_into_graph():
    g = graph_of("A")
    m = MemoryHypergraph()
    apply_insert(m, g, "A met Zed", ["A", "Zed"], {"Zed": ["c9"]})
    assert "zed" in g.nodes and g.nodes["zed"].chunk_ids == {"c9"}
    assert g.neighbors("zed") == {"a"}
    assert m.vertices["zed"].chunk_ids == {"c9"}
    assert invariant_violations(m, g) == []


@pytest.mark.parametrize("names", [["A"], ["A", "a ", " A"], ["A", "", "  "]])
def test_insert_rejects_degenerate(names):
    m = MemoryHypergraph()
    with pytest.raises(DegenerateHyperedgeError):
        apply_insert(m, graph_of("A"), "lonely", names)
    assert not m.points and not m.vertices


def test_insert_rejects_empty_description():
    with pytest.raises(MemoryOpError):
        apply_insert(MemoryHypergraph(), graph_of("A", "B"), "  ", ["A", "B"])


def test_random_inserts_keep_incidence_sound():
    g = random_graph(20, 30, 5, seed=2)
    m = random_memory(g, seed=5, n_points=15)
    assert {v: s for v, s in m.incidence.items()} == incidence_oracle(m)
    assert invariant_violations(m, g) == []


def test_update_keeps_vertices():
    g = graph_of("A", "B")
    m = MemoryHypergraph()
    pid = apply_insert(m, g, "first", ["A", "B"], step=0)
    apply_update(m, pid, "first", step=3)
    assert m.points[pid].description == "first" and m.points[pid].updated_step == 3
    apply_update(m, pid, "second", step=4)
    assert m.points[pid].vertex_ids == {"a", "b"}
    with pytest.raises(UnknownPointError):
        apply_update(m, "P0099", "x")
    with pytest.raises(MemoryOpError):
        apply_update(m, pid, "")


def test_random_updates_match_replay():
    g = random_graph(10, 10, 2, seed=0)
    m = random_memory(g, seed=1, n_points=5)
    rng = random.Random(3)
    ops = [(rng.choice(sorted(m.points)), f"text {k}") for k in range(20)]
    for pid, desc in ops:
        apply_update(m, pid, desc)
    expected = {}
    for pid, desc in ops:
        expected[pid] = desc
    for pid, desc in expected.items():
        assert m.points[pid].description == desc


def test_merge_examples():
    g = graph_of("A", "B", "C", "D")
    m = MemoryHypergraph()
    ab = apply_insert(m, g, "ab", ["A", "B"])
    bc = apply_insert(m, g, "bc", ["B", "C"])
    cd = apply_insert(m, g, "cd", ["C", "D"])
    abc = apply_merge(m, ab, bc, "abc", step=1)
    assert m.points[abc].vertex_ids == {"a", "b", "c"}
    assert m.points[abc].lineage == (ab, bc)
    assert set(m.retired) == {ab, bc} and m.retired[ab].merged_into == abc
    assert m.incidence["b"] == {abc}

    with pytest.raises(MemoryOpError):
        apply_merge(m, cd, cd, "self")
    with pytest.raises(UnknownPointError, match="retired"):
        apply_merge(m, ab, cd, "stale")

    m2 = MemoryHypergraph()
    x = apply_insert(m2, g, "ab", ["A", "B"])
    y = apply_insert(m2, g, "cd", ["C", "D"])
    assert len(m2.points[apply_merge(m2, x, y, "all")].vertex_ids) == 4


def test_merge_chain_matches_fold():
    g = random_graph(15, 20, 3, seed=4)
    m = random_memory(g, seed=9, n_points=6)
    start = {pid: p.vertex_ids for pid, p in m.points.items()}
    order = sorted(start)
    acc = order[0]
    for pid in order[1:]:
        acc = apply_merge(m, acc, pid, f"fold {pid}")
    assert list(m.points) == [acc]
    assert m.points[acc].vertex_ids == reduce(frozenset.union, start.values())
    assert len(lineage_chain(m, acc)) == 2 * 5
    assert all(live_descendant(m, pid) == acc for pid in order)
    assert invariant_violations(m, g) == []


def test_keep_merge_parents():
    g = graph_of("A", "B", "C")
    m = MemoryHypergraph(keep_merge_parents=True)
    a = apply_insert(m, g, "ab", ["A", "B"])
    b = apply_insert(m, g, "bc", ["B", "C"])
    c = apply_merge(m, a, b, "abc")
    assert set(m.points) == {a, b, c} and not m.retired
    assert invariant_violations(m, g) == []


def test_delta_empty_and_ordering():
    g = graph_of("A", "B", "C")
    m = MemoryHypergraph()
    before = m.to_records()
    report = apply_delta(m, g, MemoryDelta())
    assert m.to_records() == before and report.items == []

    delta = MemoryDelta(
        updates=[("P0001", "too early")],
        insertions=[Insertion("ab", ["A", "B"]), Insertion("bc", ["B", "C"])],
        merges=[("P0001", "P0002", "abc")],
    )
    report = apply_delta(m, g, delta, step=1)
    assert report.count("update", "rejected") == 1
    assert report.count("insert") == 2 and report.count("merge") == 1
    assert list(m.points) == ["P0003"]


def test_delta_rejections_do_not_abort():
    g = graph_of("A", "B")
    m = MemoryHypergraph()
    delta = MemoryDelta(
        insertions=[Insertion("solo", ["A"]), Insertion("ok", ["A", "New One"], {"New One": ["c1"]})],
        merges=[("P0001", "P0001", "x"), ("P0001", "P0404", "y")],
    )
    report = apply_delta(m, g, delta)
    statuses = [(i["op"], i["status"]) for i in report.items]
    assert statuses == [("insert", "rejected"), ("insert", "applied"), ("merge", "rejected"), ("merge", "rejected")]
    assert report.forced_entities == ["new one"]
    assert "P0404" in report.items[-1]["reason"]


def test_delta_equals_decomposed_application():
    g = random_graph(20, 30, 4, seed=6)
    base = random_memory(g, seed=6, n_points=10)
    rng = random.Random(6)
    live = sorted(base.points)
    names = [g.nodes[v].name for v in sorted(g.nodes)]
    delta = MemoryDelta(
        updates=[(pid, f"new {pid}") for pid in rng.sample(live, 4)],
        insertions=[Insertion(f"ins {k}", rng.sample(names, 3)) for k in range(3)],
        merges=[(live[0], live[1], "m1"), ("P0011", live[2], "m2")],
    )
    whole = base.copy()
    apply_delta(whole, g.overlay(), delta, step=2)

    parts = base.copy()
    g2 = g.overlay()
    for pid, d in delta.updates:
        apply_update(parts, pid, d, 2)
    for ins in delta.insertions:
        apply_insert(parts, g2, ins.description, ins.vertex_names, ins.provenance, 2)
    for a, b, d in delta.merges:
        apply_merge(parts, a, b, d, 2)
    assert whole == parts


def test_delta_record_roundtrip():
    delta = MemoryDelta([("P0001", "u")], [Insertion("i", ["A", "B"], {"A": ["c2", "c1"]})], [("P0001", "P0002", "m")])
    back = MemoryDelta.from_record(json.loads(json.dumps(delta.to_record())))
    assert back.to_record() == delta.to_record()
    assert not MemoryDelta() and delta


def test_avg_entities():
    g = graph_of(*"ABCDEFGHIJ")
    m = MemoryHypergraph()
    assert avg_entities_per_hyperedge(m) == 0
    apply_insert(m, g, "three", list("ABC"))
    apply_insert(m, g, "seven", list("DEFGHIJ"))
    assert avg_entities_per_hyperedge(m) == 5.0


def test_memory_neighbors():
    g = graph_of("V", "W", "X")
    m = MemoryHypergraph()
    apply_insert(m, g, "vw", ["V", "W"])
    assert memory_neighbors(m, "v") == {"w"}
    with pytest.raises(MemoryOpError):
        memory_neighbors(m, "x")

    g = random_graph(20, 20, 3, seed=8)
    m = random_memory(g, seed=8, n_points=8)
    for v in m.vertices:
        assert memory_neighbors(m, v) == neighbors_oracle(m, v)


def test_render_memory():
    m = MemoryHypergraph()
    assert render_memory(m) == EMPTY_MEMORY_TEXT
    g = graph_of("A", "B")
    apply_insert(m, g, "A and B", ["A", "B"])
    text = render_memory(m)
    assert text.count("[Memory point") == 1
    assert text == render_memory(m.copy())
    assert "P0001" in describe_memory(m)


def test_snapshot_roundtrip():
    g = random_graph(12, 12, 2, seed=1)
    m = random_memory(g, seed=2, n_points=6)
    apply_merge(m, "P0001", "P0002", "merged")
    back = MemoryHypergraph.from_records(json.loads(json.dumps(m.to_records())))
    assert back == m
    assert back.new_point_id() == m.new_point_id() == "P0008"
    with pytest.raises(MemoryOpError):
        MemoryHypergraph.from_records([{"kind": "meta", "schema_version": 7}])


NAMES = ["Ann", "Bo", "Cy", "Dee", "Eve", "Flo", "Gus"]

ops = st.lists(
    st.one_of(
        st.tuples(st.just("insert"), st.lists(st.sampled_from(NAMES + ["ann", "Hal"]), min_size=1, max_size=4)),
        st.tuples(st.just("update"), st.integers(0, 30)),
        st.tuples(st.just("merge"), st.tuples(st.integers(0, 30), st.integers(0, 30))),
    ),
    max_size=25,
)


@settings(max_examples=150, deadline=None)
@given(ops)
def test_random_operation_sequences_keep_invariants(seq):
    g = graph_of(*NAMES)
    m = MemoryHypergraph()
    sizes = [0]
    for step, (op, arg) in enumerate(seq):
        pids = sorted(m.points)
        try:
            if op == "insert":
                apply_insert(m, g, f"step {step}", arg, step=step)
            elif op == "update" and pids:
                apply_update(m, pids[arg % len(pids)], f"update {step}", step)
            elif op == "merge" and pids:
                a, b = pids[arg[0] % len(pids)], pids[arg[1] % len(pids)]
                parents = m.points[a].vertex_ids, m.points[b].vertex_ids
                child = apply_merge(m, a, b, f"merge {step}", step)
                assert m.points[child].vertex_ids == parents[0] | parents[1]
                assert len(m.points[child].vertex_ids) >= max(map(len, parents))
        except MemoryOpError:
            pass
        assert invariant_violations(m, g) == []
        assert set(m.vertices) <= set(g.nodes)
        assert m.incidence == incidence_oracle(m)
        assert len(m.vertices) >= sizes[-1]
        sizes.append(len(m.vertices))
        for pid in m.points:
            roots = [line for line in lineage_chain(m, pid)]
            assert all(m.find(line.split(" <- ")[1]) is not None for line in roots)
    assert normalize_name("Hal") not in m.vertices or "hal" in g.nodes
