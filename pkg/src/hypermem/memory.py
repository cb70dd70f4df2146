"""Hypergraph working memory.

Vertices mirror entities of the knowledge graph; hyperedges are *memory
points* that tie two or more vertices to a description. Memory evolves
through three operations: update (rewrite a description), insertion (new
point) and merging (two points become one higher-order point over the union
of their vertices).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

from .embedding import Embedder
from .graph import KnowledgeGraph, fragments, normalize_name, upsert_node

EMPTY_MEMORY_TEXT = "(the working memory is empty)"
SNAPSHOT_VERSION = 1


class MemoryOpError(ValueError):
    pass


class UnknownPointError(MemoryOpError, KeyError):
    def __str__(self):
        return str(self.args[0])


class DegenerateHyperedgeError(MemoryOpError):
    pass


@dataclass
class MemoryVertex:
    entity_id: str
    name: str
    description: str
    chunk_ids: set[str] = field(default_factory=set)

    def to_record(self) -> dict:
        return {
            "kind": "vertex",
            "entity_id": self.entity_id,
            "name": self.name,
            "description": self.description,
            "chunk_ids": sorted(self.chunk_ids),
        }


@dataclass
class MemoryPoint:
    id: str
    description: str
    vertex_ids: frozenset[str]
    lineage: tuple[str, str] | None = None
    created_step: int = 0
    updated_step: int = 0
    merged_into: str | None = None

    def to_record(self, status: str) -> dict:
        return {
            "kind": "point",
            "status": status,
            "id": self.id,
            "description": self.description,
            "vertex_ids": sorted(self.vertex_ids),
            "lineage": list(self.lineage) if self.lineage else None,
            "created_step": self.created_step,
            "updated_step": self.updated_step,
            "merged_into": self.merged_into,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "MemoryPoint":
        return cls(
            rec["id"],
            rec["description"],
            frozenset(rec["vertex_ids"]),
            tuple(rec["lineage"]) if rec.get("lineage") else None,
            int(rec["created_step"]),
            int(rec["updated_step"]),
            rec.get("merged_into"),
        )


class MemoryHypergraph:
    def __init__(self, keep_merge_parents: bool = False):
        self.vertices: dict[str, MemoryVertex] = {}
        self.points: dict[str, MemoryPoint] = {}
        self.retired: dict[str, MemoryPoint] = {}
        self.incidence: dict[str, set[str]] = {}
        self.keep_merge_parents = keep_merge_parents
        self._next = 1

    def __repr__(self):
        return f"MemoryHypergraph(vertices={len(self.vertices)}, points={len(self.points)}, retired={len(self.retired)})"

    def __eq__(self, other):
        return isinstance(other, MemoryHypergraph) and self.to_records() == other.to_records()

    def new_point_id(self) -> str:
        pid = f"P{self._next:04d}"
        self._next += 1
        return pid

    def live(self, point_id: str) -> MemoryPoint:
        try:
            return self.points[point_id]
        except KeyError:
            state = "retired" if point_id in self.retired else "unknown"
            raise UnknownPointError(f"{state} memory point {point_id!r}") from None

    def find(self, point_id: str) -> MemoryPoint | None:
        return self.points.get(point_id) or self.retired.get(point_id)

    def ordered_points(self) -> list[MemoryPoint]:
        return sorted(self.points.values(), key=lambda p: (p.created_step, p.id))

    def copy(self) -> "MemoryHypergraph":
        return MemoryHypergraph.from_records(self.to_records())

    def _link(self, p: MemoryPoint) -> None:
        for v in p.vertex_ids:
            self.incidence.setdefault(v, set()).add(p.id)

    def _unlink(self, p: MemoryPoint) -> None:
        for v in p.vertex_ids:
            self.incidence[v].discard(p.id)

    def to_records(self) -> list[dict]:
        recs = [
            {
                "kind": "meta",
                "schema_version": SNAPSHOT_VERSION,
                "next_id": self._next,
                "keep_merge_parents": self.keep_merge_parents,
            }
        ]
        recs += [self.vertices[v].to_record() for v in sorted(self.vertices)]
        recs += [self.points[p].to_record("live") for p in sorted(self.points)]
        recs += [self.retired[p].to_record("retired") for p in sorted(self.retired)]
        return recs

    @classmethod
    def from_records(cls, records: Iterable[dict]) -> "MemoryHypergraph":
        m = cls()
        for rec in records:
            kind = rec["kind"]
            if kind == "meta":
                if rec.get("schema_version") != SNAPSHOT_VERSION:
                    raise MemoryOpError(f"unsupported memory snapshot version {rec.get('schema_version')}")
                m._next = int(rec["next_id"])
                m.keep_merge_parents = bool(rec["keep_merge_parents"])
            elif kind == "vertex":
                m.vertices[rec["entity_id"]] = MemoryVertex(
                    rec["entity_id"], rec["name"], rec["description"], set(rec["chunk_ids"])
                )
                m.incidence.setdefault(rec["entity_id"], set())
            elif kind == "point":
                p = MemoryPoint.from_record(rec)
                if rec["status"] == "live":
                    m.points[p.id] = p
                    m._link(p)
                else:
                    m.retired[p.id] = p
            else:
                raise MemoryOpError(f"unknown snapshot record kind {kind!r}")
        return m


@dataclass
class Insertion:
    description: str
    vertex_names: list[str]
    provenance: dict[str, list[str]] = field(default_factory=dict)

    def to_record(self) -> dict:
        return {
            "description": self.description,
            "vertex_names": list(self.vertex_names),
            "provenance": {k: sorted(v) for k, v in sorted(self.provenance.items())},
        }


@dataclass
class MemoryDelta:
    updates: list[tuple[str, str]] = field(default_factory=list)
    insertions: list[Insertion] = field(default_factory=list)
    merges: list[tuple[str, str, str]] = field(default_factory=list)

    def __bool__(self):
        return bool(self.updates or self.insertions or self.merges)

    def to_record(self) -> dict:
        return {
            "updates": [{"point_id": p, "description": d} for p, d in self.updates],
            "insertions": [i.to_record() for i in self.insertions],
            "merges": [{"first": a, "second": b, "description": d} for a, b, d in self.merges],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "MemoryDelta":
        return cls(
            [(u["point_id"], u["description"]) for u in rec.get("updates", [])],
            [Insertion(i["description"], list(i["vertex_names"]), dict(i.get("provenance", {}))) for i in rec.get("insertions", [])],
            [(mg["first"], mg["second"], mg["description"]) for mg in rec.get("merges", [])],
        )


@dataclass
class DeltaReport:
    items: list[dict] = field(default_factory=list)

    def add(self, op: str, index: int, ok: bool, reason: str = "", **extra) -> None:
        item = {"op": op, "index": index, "status": "applied" if ok else "rejected"}
        if reason:
            item["reason"] = reason
        item.update(extra)
        self.items.append(item)

    def count(self, op: str, status: str = "applied") -> int:
        return sum(1 for i in self.items if i["op"] == op and i["status"] == status)

    @property
    def forced_entities(self) -> list[str]:
        return [e for i in self.items for e in i.get("forced_entities", [])]

    def to_record(self) -> list[dict]:
        return list(self.items)


def apply_update(m: MemoryHypergraph, point_id: str, new_description: str, step: int = 0) -> None:
    p = m.live(point_id)
    if not new_description.strip():
        raise MemoryOpError("description must be non-empty")
    p.description = new_description
    p.updated_step = step


def apply_insert(
    m: MemoryHypergraph,
    g: KnowledgeGraph,
    description: str,
    vertex_names: Iterable[str],
    provenance: dict[str, Iterable[str]] | None = None,
    step: int = 0,
    embedder: Embedder | None = None,
) -> str:
    """Add a memory point over ``vertex_names`` and return its id.

    Entities missing from the graph are first upserted into it, linked to the
    other members of the point, so every memory vertex stays a graph node.
    """
    provenance = provenance or {}
    names: dict[str, str] = {}
    for name in vertex_names:
        if name and name.strip():
            names.setdefault(normalize_name(name), name)
    if len(names) < 2:
        raise DegenerateHyperedgeError(f"a memory point needs at least 2 distinct entities, got {sorted(names)}")
    if not description.strip():
        raise MemoryOpError("description must be non-empty")
    prov = {normalize_name(k): set(v) for k, v in provenance.items()}
    for nid, name in names.items():
        if nid not in g.nodes:
            upsert_node(
                g,
                name,
                "",
                prov.get(nid, ()),
                [
                    {"target": other, "description": description, "chunk_ids": sorted(prov.get(nid, ()))}
                    for oid, other in names.items()
                    if oid != nid
                ],
                embedder,
            )
    for nid in names:
        vertex = m.vertices.get(nid)
        if vertex is None:
            node = g.nodes[nid]
            vertex = MemoryVertex(nid, node.name, node.description, set(node.chunk_ids))
            m.vertices[nid] = vertex
            m.incidence.setdefault(nid, set())
        vertex.chunk_ids |= prov.get(nid, set())
    p = MemoryPoint(m.new_point_id(), description, frozenset(names), None, step, step)
    m.points[p.id] = p
    m._link(p)
    return p.id


def apply_merge(m: MemoryHypergraph, point_i: str, point_j: str, merged_description: str, step: int = 0) -> str:
    if point_i == point_j:
        raise MemoryOpError(f"cannot merge point {point_i!r} with itself")
    a, b = m.live(point_i), m.live(point_j)
    if not merged_description.strip():
        raise MemoryOpError("merged description must be non-empty")
    child = MemoryPoint(m.new_point_id(), merged_description, a.vertex_ids | b.vertex_ids, (a.id, b.id), step, step)
    if not m.keep_merge_parents:
        for parent in (a, b):
            m._unlink(parent)
            del m.points[parent.id]
            parent.merged_into = child.id
            m.retired[parent.id] = parent
    m.points[child.id] = child
    m._link(child)
    return child.id


def apply_delta(
    m: MemoryHypergraph,
    g: KnowledgeGraph,
    delta: MemoryDelta,
    step: int = 0,
    embedder: Embedder | None = None,
) -> DeltaReport:
    """Apply updates, then insertions, then merges. Bad items are reported, not raised."""
    report = DeltaReport()
    for k, (pid, desc) in enumerate(delta.updates):
        try:
            apply_update(m, pid, desc, step)
            report.add("update", k, True, point_id=pid)
        except MemoryOpError as exc:
            report.add("update", k, False, str(exc), point_id=pid)
    for k, ins in enumerate(delta.insertions):
        missing = sorted({normalize_name(n) for n in ins.vertex_names if n.strip()} - set(g.nodes))
        try:
            pid = apply_insert(m, g, ins.description, ins.vertex_names, ins.provenance, step, embedder)
            report.add("insert", k, True, point_id=pid, forced_entities=missing)
        except MemoryOpError as exc:
            report.add("insert", k, False, str(exc))
    for k, (a, b, desc) in enumerate(delta.merges):
        try:
            pid = apply_merge(m, a, b, desc, step)
            report.add("merge", k, True, point_id=pid, parents=[a, b])
        except MemoryOpError as exc:
            report.add("merge", k, False, str(exc), parents=[a, b])
    return report


def avg_entities_per_hyperedge(m: MemoryHypergraph) -> float:
    if not m.points:
        return 0.0
    return sum(len(p.vertex_ids) for p in m.points.values()) / len(m.points)


def memory_neighbors(m: MemoryHypergraph, v: str) -> set[str]:
    if v not in m.vertices:
        raise MemoryOpError(f"entity {v!r} is not a memory vertex")
    out: set[str] = set()
    for pid in m.incidence.get(v, ()):
        out |= m.points[pid].vertex_ids
    out.discard(v)
    return out


def live_descendant(m: MemoryHypergraph, point_id: str) -> str | None:
    """Follow ``merged_into`` links from a retired point to the live point that absorbed it."""
    seen = set()
    pid = point_id
    while pid not in m.points:
        p = m.retired.get(pid)
        if p is None or p.merged_into is None or pid in seen:
            return None
        seen.add(pid)
        pid = p.merged_into
    return pid


def _entity_line(v: MemoryVertex) -> str:
    desc = "; ".join(fragments(v.description))
    return f"- {v.name}: {desc}" if desc else f"- {v.name}"


def render_memory(m: MemoryHypergraph) -> str:
    """Deterministic text form of the memory, as fed to prompts."""
    if not m.points and not m.vertices:
        return EMPTY_MEMORY_TEXT
    blocks = []
    for p in m.ordered_points():
        members = ", ".join(sorted(m.vertices[v].name for v in p.vertex_ids))
        blocks.append(f"[Memory point {p.id}]\nEntities: {members}\nDescription: {p.description}")
    if not blocks:
        blocks.append("(no memory points)")
    entities = "\n".join(_entity_line(m.vertices[v]) for v in sorted(m.vertices))
    return "\n\n".join(blocks) + "\n\n[Entities]\n" + entities


def describe_memory(m: MemoryHypergraph) -> str:
    """Human-readable listing with lineage, for inspection tools."""
    lines = [f"{len(m.points)} live points, {len(m.retired)} retired, {len(m.vertices)} vertices, "
             f"avg entities/point {avg_entities_per_hyperedge(m):.2f}"]
    for p in m.ordered_points():
        lines.append("")
        lines.append(f"{p.id}  (created step {p.created_step}, updated step {p.updated_step})")
        lines.append(f"  members: {', '.join(sorted(m.vertices[v].name for v in p.vertex_ids))}")
        lines.append(f"  description: {p.description}")
        chain = lineage_chain(m, p.id)
        if chain:
            lines.append("  lineage:")
            lines.extend(f"    {c}" for c in chain)
    if m.vertices:
        lines.append("")
        lines.append("vertices:")
        for v in sorted(m.vertices):
            vert = m.vertices[v]
            lines.append(f"  {vert.name}  [{len(vert.chunk_ids)} chunks]")
    return "\n".join(lines)


def lineage_chain(m: MemoryHypergraph, point_id: str) -> list[str]:
    out = []

    def walk(pid: str, depth: int):
        p = m.find(pid)
        if p is None or p.lineage is None:
            return
        for parent in p.lineage:
            out.append(f"{'  ' * depth}{pid} <- {parent}")
            walk(parent, depth + 1)

    walk(point_id, 0)
    return out


def invariant_violations(m: MemoryHypergraph, g: KnowledgeGraph | None = None) -> list[str]:
    """Every broken structural invariant, as readable strings (empty when sound)."""
    bad = []
    if g is not None:
        for v in m.vertices:
            if v not in g.nodes:
                bad.append(f"vertex {v!r} is not a graph node")
    for p in m.points.values():
        if len(p.vertex_ids) < 2:
            bad.append(f"point {p.id} has {len(p.vertex_ids)} vertices")
        if not p.description.strip():
            bad.append(f"point {p.id} has an empty description")
        for v in p.vertex_ids:
            if v not in m.vertices:
                bad.append(f"point {p.id} references unknown vertex {v!r}")
    expected: dict[str, set[str]] = {v: set() for v in m.vertices}
    for p in m.points.values():
        for v in p.vertex_ids:
            expected.setdefault(v, set()).add(p.id)
    actual = {v: set(s) for v, s in m.incidence.items()}
    for v in set(expected) | set(actual):
        if expected.get(v, set()) != actual.get(v, set()):
            bad.append(f"incidence of {v!r} is {sorted(actual.get(v, ()))}, expected {sorted(expected.get(v, ()))}")
    every = {**m.retired, **m.points}
    for p in every.values():
        if p.lineage is None:
            continue
        for parent in p.lineage:
            q = every.get(parent)
            if q is None:
                bad.append(f"point {p.id} has unknown parent {parent}")
                continue
            if not m.keep_merge_parents and parent in m.points:
                bad.append(f"parent {parent} of {p.id} is still live")
        parents = [every[x] for x in p.lineage if x in every]
        if len(parents) == 2 and p.vertex_ids != parents[0].vertex_ids | parents[1].vertex_ids:
            bad.append(f"merged point {p.id} is not the union of its parents")
    # lineage must be a DAG whose roots are insertions
    state: dict[str, int] = {}

    def visit(pid: str) -> bool:
        if state.get(pid) == 1:
            return False
        if state.get(pid) == 2:
            return True
        state[pid] = 1
        p = every.get(pid)
        ok = True
        if p is not None and p.lineage:
            ok = all(visit(x) for x in p.lineage)
        state[pid] = 2
        return ok

    for pid in sorted(every):
        if not visit(pid):
            bad.append(f"lineage cycle through {pid}")
            break
    return bad
