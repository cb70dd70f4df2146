"""Memory-guided evidence retrieval over the knowledge graph.

Two retrieval modes per subquery:

* local investigation: search the one-hop neighbourhood (in memory and in
  the graph) of the vertices of one anchor memory point;
* global exploration: search every graph entity not yet in memory.

Both reduce to the same primitive, :func:`retrieve_entities`, which takes the
union of per-query top-``n_v`` cosine matches within a candidate set.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .corpus import Chunk
from .embedding import Embedder, VectorIndex, embed, rank, top_k
from .graph import EntityNode, KnowledgeGraph, RelationEdge
from .memory import MemoryHypergraph, UnknownPointError, memory_neighbors

log = logging.getLogger(__name__)

LOCAL = "local"
GLOBAL = "global"


class StaleAnchorError(LookupError):
    def __init__(self, point_id: str):
        super().__init__(f"anchor point {point_id!r} is no longer live")
        self.point_id = point_id


@dataclass
class Subquery:
    text: str
    mode: str = GLOBAL
    anchor_point: str | None = None
    origin_step: int = 0
    seed: bool = False

    def __post_init__(self):
        if self.mode not in (LOCAL, GLOBAL):
            raise ValueError(f"mode must be local or global, got {self.mode!r}")
        if (self.mode == LOCAL) != (self.anchor_point is not None):
            raise ValueError("a subquery has an anchor point exactly when it is local")

    def to_record(self) -> dict:
        rec = {"text": self.text, "mode": self.mode, "anchor_point": self.anchor_point, "origin_step": self.origin_step}
        if self.seed:
            rec["seed"] = True
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "Subquery":
        return cls(rec["text"], rec["mode"], rec.get("anchor_point"), int(rec.get("origin_step", 0)), bool(rec.get("seed", False)))


@dataclass
class Evidence:
    subquery: Subquery
    entities: list[EntityNode] = field(default_factory=list)
    relations: list[RelationEdge] = field(default_factory=list)
    chunks: list[Chunk] = field(default_factory=list)

    def ids(self) -> dict:
        return {
            "entities": [e.id for e in self.entities],
            "relations": [r.id for r in self.relations],
            "chunks": [c.id for c in self.chunks],
        }

    def __bool__(self):
        return bool(self.entities or self.relations or self.chunks)


def _embed_text(item) -> str:
    return item.text if isinstance(item, Chunk) else item.text()


class GraphIndex:
    """Vector indexes over a graph's entities, relations and chunks, plus the query embedder."""

    def __init__(self, g: KnowledgeGraph, embedder: Embedder):
        self.graph = g
        self.embedder = embedder
        dim = embedder.dim
        self.entities = VectorIndex(dim)
        self.relations = VectorIndex(dim)
        self.chunks = VectorIndex(dim)
        self._query_cache: dict[str, np.ndarray] = {}
        self.sync()

    def sync(self) -> None:
        """Pick up graph items added (or re-embedded) since the last sync."""
        for table, index in ((self.graph.nodes, self.entities), (self.graph.edges, self.relations), (self.graph.chunks, self.chunks)):
            missing = sorted(i for i, item in table.items() if item.embedding is None)
            if missing:
                texts = [_embed_text(table[i]) for i in missing]
                for i, v in zip(missing, embed(texts, self.embedder)):
                    table[i].embedding = v
            for i in sorted(table):
                vec = table[i].embedding
                if i not in index or not np.array_equal(index.get(i), vec):
                    index.upsert(i, vec)

    def query_vector(self, text: str) -> np.ndarray:
        vec = self._query_cache.get(text)
        if vec is None:
            vec = embed([text], self.embedder)[0]
            self._query_cache[text] = vec
        return vec


def retrieve_entities(queries: Sequence[str], candidates: Iterable[str], n_v: int, index: GraphIndex) -> set[str]:
    cands = set(candidates)
    out: set[str] = set()
    if not cands:
        return out
    for q in queries:
        out.update(top_k(index.query_vector(q), cands, index.entities, n_v))
    return out


def local_neighborhood(m: MemoryHypergraph, g: KnowledgeGraph, point_id: str) -> set[str]:
    """One-hop neighbours (memory and graph) of an anchor point's vertices, minus those vertices."""
    anchor = m.live(point_id)
    out: set[str] = set()
    for v in anchor.vertex_ids:
        out |= memory_neighbors(m, v)
        out |= g.neighbors(v)
    return out - anchor.vertex_ids


def local_investigation(q: Subquery, m: MemoryHypergraph, g: KnowledgeGraph, n_v: int, index: GraphIndex) -> set[str]:
    if q.mode != LOCAL:
        raise ValueError("local_investigation needs a local subquery")
    try:
        candidates = local_neighborhood(m, g, q.anchor_point)
    except UnknownPointError:
        raise StaleAnchorError(q.anchor_point) from None
    return retrieve_entities([q.text], candidates, n_v, index)


def exploration_scope(m: MemoryHypergraph, g: KnowledgeGraph) -> set[str]:
    return set(g.nodes) - set(m.vertices)


def global_exploration(q: Subquery, m: MemoryHypergraph, g: KnowledgeGraph, n_v: int, index: GraphIndex) -> set[str]:
    if q.mode != GLOBAL:
        raise ValueError("global_exploration needs a global subquery")
    return retrieve_entities([q.text], exploration_scope(m, g), n_v, index)


def gather_evidence(
    entity_ids: Iterable[str],
    g: KnowledgeGraph,
    q_text: str,
    n_e: int,
    n_d: int,
    index: GraphIndex,
    subquery: Subquery | None = None,
) -> Evidence:
    """Collect relations and chunks linked to the entities, keep the best ``n_e``/``n_d`` by similarity."""
    ents = sorted(set(entity_ids))
    edge_pool: set[str] = set()
    chunk_pool: set[str] = set()
    for v in ents:
        node = g.node(v)
        edge_pool |= g.incident_edges(v)
        chunk_pool |= {c for c in node.chunk_ids if c in g.chunks}
    qv = index.query_vector(q_text)
    rel_ids = [i for i, _ in rank(qv, edge_pool, index.relations)[:n_e]] if n_e > 0 else []
    chunk_ids = [i for i, _ in rank(qv, chunk_pool, index.chunks)[:n_d]] if n_d > 0 else []
    return Evidence(
        subquery or Subquery(q_text),
        [g.nodes[v] for v in ents],
        [g.edges[i] for i in rel_ids],
        [g.chunks[i] for i in chunk_ids],
    )
