"""The external knowledge graph: entities, binary relations and chunk provenance."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .assets import render_prompt
from .corpus import Chunk
from .embedding import Embedder, embed
from .providers import ChatProvider, ChatRequest, ExchangeLog, chat

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
FORMAT_NAME = "hypermem-graph"
FRAGMENT_SEP = "<SEP>"
COMPLETE_MARK = "<|COMPLETE|>"


class GraphError(ValueError):
    pass


class UnknownEntityError(GraphError, KeyError):
    def __str__(self):
        return f"unknown entity {self.args[0]!r}"


class GraphFormatError(GraphError):
    pass


def normalize_name(name: str) -> str:
    return " ".join(name.split()).casefold()


def edge_id(source: str, target: str, description: str) -> str:
    digest = hashlib.sha1(f"{source}\x1f{target}\x1f{description}".encode()).hexdigest()
    return f"rel-{digest[:16]}"


def fragments(description: str) -> list[str]:
    return [f for f in description.split(FRAGMENT_SEP) if f]


def join_fragments(parts: Iterable[str]) -> str:
    seen: list[str] = []
    for p in parts:
        p = p.strip()
        if p and p not in seen:
            seen.append(p)
    return FRAGMENT_SEP.join(seen)


@dataclass
class EntityNode:
    id: str
    name: str
    description: str = ""
    chunk_ids: set[str] = field(default_factory=set)
    entity_type: str = ""
    embedding: np.ndarray | None = field(default=None, repr=False, compare=False)

    def text(self) -> str:
        """The string that gets embedded for this node."""
        return f"{self.name}: {' '.join(fragments(self.description))}".strip()


@dataclass
class RelationEdge:
    id: str
    source: str
    target: str
    description: str = ""
    chunk_ids: set[str] = field(default_factory=set)
    keywords: str = ""
    embedding: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.source == self.target:
            raise GraphError(f"self-loop on {self.source!r}")

    def text(self) -> str:
        return f"{self.source} -- {self.target}: {self.description}"

    def other(self, v: str) -> str:
        return self.target if v == self.source else self.source


class KnowledgeGraph:
    def __init__(self):
        self.chunks: dict[str, Chunk] = {}
        self.nodes: dict[str, EntityNode] = {}
        self.edges: dict[str, RelationEdge] = {}
        self.adjacency: dict[str, set[str]] = {}

    def __repr__(self):
        return f"KnowledgeGraph(chunks={len(self.chunks)}, nodes={len(self.nodes)}, edges={len(self.edges)})"

    def overlay(self) -> "KnowledgeGraph":
        """A copy that can take new nodes and edges without touching this graph.

        Existing node, edge and chunk objects are shared, so only additions
        are isolated. Used to stage a memory delta before it is applied.
        """
        g = KnowledgeGraph()
        g.chunks = dict(self.chunks)
        g.nodes = dict(self.nodes)
        g.edges = dict(self.edges)
        g.adjacency = {v: set(s) for v, s in self.adjacency.items()}
        return g

    def copy(self) -> "KnowledgeGraph":
        return copy.deepcopy(self)

    def add_chunk(self, chunk: Chunk) -> None:
        self.chunks[chunk.id] = chunk

    def add_node(self, node: EntityNode) -> EntityNode:
        if node.id in self.nodes:
            raise GraphError(f"duplicate node {node.id!r}")
        self.nodes[node.id] = node
        self.adjacency.setdefault(node.id, set())
        return node

    def ensure_node(self, name: str) -> EntityNode:
        nid = normalize_name(name)
        node = self.nodes.get(nid)
        if node is None:
            node = self.add_node(EntityNode(nid, " ".join(name.split())))
        return node

    def add_edge(self, edge: RelationEdge) -> RelationEdge:
        for end in (edge.source, edge.target):
            if end not in self.nodes:
                raise UnknownEntityError(end)
        existing = self.edges.get(edge.id)
        if existing is not None:
            existing.chunk_ids |= edge.chunk_ids
            return existing
        self.edges[edge.id] = edge
        self.adjacency[edge.source].add(edge.id)
        self.adjacency[edge.target].add(edge.id)
        return edge

    def node(self, v: str) -> EntityNode:
        try:
            return self.nodes[v]
        except KeyError:
            raise UnknownEntityError(v) from None

    def incident_edges(self, v: str) -> set[str]:
        if v not in self.nodes:
            raise UnknownEntityError(v)
        return set(self.adjacency.get(v, ()))

    def neighbors(self, v: str) -> set[str]:
        return {self.edges[e].other(v) for e in self.incident_edges(v)}

    def integrity_problems(self) -> list[str]:
        problems = []
        for e in self.edges.values():
            for end in (e.source, e.target):
                if end not in self.nodes:
                    problems.append(f"edge {e.id} has dangling endpoint {end!r}")
            for c in e.chunk_ids:
                if c not in self.chunks:
                    problems.append(f"edge {e.id} cites unknown chunk {c}")
        for n in self.nodes.values():
            for c in n.chunk_ids:
                if c not in self.chunks:
                    problems.append(f"node {n.id!r} cites unknown chunk {c}")
        rebuilt: dict[str, set[str]] = {v: set() for v in self.nodes}
        for e in self.edges.values():
            rebuilt.setdefault(e.source, set()).add(e.id)
            rebuilt.setdefault(e.target, set()).add(e.id)
        if rebuilt != {v: set(s) for v, s in self.adjacency.items()}:
            problems.append("adjacency disagrees with edge set")
        return problems


def neighbors(g: KnowledgeGraph, v: str) -> set[str]:
    return g.neighbors(v)


def embed_graph(g: KnowledgeGraph, embedder: Embedder, only_missing: bool = False) -> None:
    """Embed nodes, edges and chunks (in id order, for reproducible batching)."""
    for table, text_of in (
        (g.nodes, EntityNode.text),
        (g.edges, RelationEdge.text),
        (g.chunks, lambda c: c.text),
    ):
        ids = sorted(i for i, item in table.items() if not only_missing or item.embedding is None)
        vecs = embed([text_of(table[i]) for i in ids], embedder)
        for i, v in zip(ids, vecs):
            table[i].embedding = v


def upsert_node(
    g: KnowledgeGraph,
    name: str,
    description: str = "",
    chunk_ids: Iterable[str] = (),
    relations: Sequence[dict] = (),
    embedder: Embedder | None = None,
) -> str:
    """Insert or refresh an entity, together with its relations.

    ``relations`` items are dicts with ``target`` (a name), ``description`` and
    optional ``chunk_ids``. Missing relation endpoints are created with empty
    provenance, so the graph never has dangling endpoints.
    """
    if not name.strip():
        raise GraphError("entity name must be non-empty")
    node = g.ensure_node(name)
    touched = {node.id}
    new_desc = join_fragments(fragments(node.description) + ([description] if description else []))
    if new_desc != node.description:
        node.description = new_desc
    node.chunk_ids |= set(chunk_ids)
    for rel in relations:
        other = g.ensure_node(rel["target"])
        if other.id == node.id:
            continue
        touched.add(other.id)
        desc = rel.get("description", "")
        g.add_edge(
            RelationEdge(
                edge_id(node.id, other.id, desc),
                node.id,
                other.id,
                desc,
                set(rel.get("chunk_ids", ())),
            )
        )
    if embedder is not None:
        ids = sorted(touched)
        for i, v in zip(ids, embed([g.nodes[i].text() for i in ids], embedder)):
            g.nodes[i].embedding = v
        embed_graph(g, embedder, only_missing=True)
    return node.id


_RECORD = re.compile(r"\(\s*\"?(entity|relationship)\"?\s*<\|>(.*?)\)\s*(?:##|$)", re.S | re.I)


def parse_extraction(text: str) -> tuple[list[dict], list[dict]] | None:
    """Parse an extraction reply; ``None`` if it is not a complete reply."""
    if COMPLETE_MARK not in text:
        return None
    entities, relations = [], []
    for kind, body in _RECORD.findall(text.split(COMPLETE_MARK)[0]):
        parts = [p.strip().strip('"').strip() for p in body.split("<|>")]
        if kind.lower() == "entity" and len(parts) >= 3 and parts[0]:
            entities.append({"name": parts[0], "type": parts[1], "description": parts[2] if len(parts) > 2 else ""})
        elif kind.lower() == "relationship" and len(parts) >= 3 and parts[0] and parts[1]:
            relations.append(
                {
                    "source": parts[0],
                    "target": parts[1],
                    "description": parts[2],
                    "keywords": parts[3] if len(parts) > 3 else "",
                }
            )
        else:
            log.debug("dropping malformed extraction record %r", body[:80])
    return entities, relations


@dataclass
class ExtractionParams:
    max_retries: int = 2
    description_cap: int = 8
    temperature: float = 0.0
    max_output_tokens: int = 2048


def extract_graph(
    chunks: Sequence[Chunk],
    llm: ChatProvider,
    embedder: Embedder | None = None,
    params: ExtractionParams | None = None,
    exchanges: ExchangeLog | None = None,
) -> tuple[KnowledgeGraph, list[str]]:
    """Build a graph from chunks. Returns the graph and the ids of skipped chunks.

    The LLM is called once per chunk (``tag="extract"``, ``step`` = chunk
    ordinal). A reply without the completion marker is retried; after
    ``max_retries`` failed retries the chunk is skipped with a warning.
    """
    params = params or ExtractionParams()
    g = KnowledgeGraph()
    skipped: list[str] = []
    node_frags: dict[str, list[str]] = {}
    for ordinal, chunk in enumerate(chunks):
        g.add_chunk(chunk)
        parsed = None
        for _ in range(params.max_retries + 1):
            req = ChatRequest(
                [("user", render_prompt("extract", text=chunk.text))],
                tag="extract",
                temperature=params.temperature,
                max_output_tokens=params.max_output_tokens,
                step=ordinal,
                context={"chunk": chunk},
            )
            parsed = parse_extraction(chat(req, llm, exchanges))
            if parsed is not None:
                break
        if parsed is None:
            log.warning("skipping chunk %s: extraction output unparseable", chunk.id)
            skipped.append(chunk.id)
            continue
        entities, relations = parsed
        for ent in entities:
            node = g.ensure_node(ent["name"])
            node.chunk_ids.add(chunk.id)
            if ent["type"] and not node.entity_type:
                node.entity_type = ent["type"]
            node_frags.setdefault(node.id, []).append(ent["description"])
        for rel in relations:
            src, tgt = g.ensure_node(rel["source"]), g.ensure_node(rel["target"])
            if src.id == tgt.id:
                continue
            src.chunk_ids.add(chunk.id)
            tgt.chunk_ids.add(chunk.id)
            g.add_edge(
                RelationEdge(
                    edge_id(src.id, tgt.id, rel["description"]),
                    src.id,
                    tgt.id,
                    rel["description"],
                    {chunk.id},
                    rel["keywords"],
                )
            )
    for seq, nid in enumerate(sorted(g.nodes)):
        desc = join_fragments(node_frags.get(nid, []))
        parts = fragments(desc)
        if len(parts) > params.description_cap:
            req = ChatRequest(
                [("user", render_prompt("summarize", name=g.nodes[nid].name, fragments="\n".join(f"- {p}" for p in parts)))],
                tag="summarize",
                temperature=params.temperature,
                step=0,
                context={"name": g.nodes[nid].name, "fragments": parts},
            )
            desc = chat(req, llm, exchanges).strip()
        g.nodes[nid].description = desc
    if embedder is not None:
        embed_graph(g, embedder)
    return g, skipped


# -- persistence -------------------------------------------------------------


def _dumps(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_graph(g: KnowledgeGraph, path: str | Path) -> None:
    """Write a canonical, byte-reproducible serialization of ``g`` to a directory.

    Layout: ``manifest.json``, ``chunks.jsonl``, ``nodes.jsonl``, ``edges.jsonl``
    and ``embeddings.f32`` (little-endian float32 rows; records hold a row index
    in ``emb``, or null when unembedded).
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    rows: list[np.ndarray] = []
    dims = set()

    def row_of(vec):
        if vec is None:
            return None
        dims.add(vec.size)
        rows.append(np.asarray(vec, dtype="<f4"))
        return len(rows) - 1

    chunk_lines = []
    for cid in sorted(g.chunks):
        c = g.chunks[cid]
        rec = c.to_record()
        rec["emb"] = row_of(c.embedding)
        chunk_lines.append(_dumps(rec))
    node_lines = []
    for nid in sorted(g.nodes):
        n = g.nodes[nid]
        rec = {
            "id": n.id,
            "name": n.name,
            "description": n.description,
            "type": n.entity_type,
            "chunk_ids": sorted(n.chunk_ids),
            "emb": row_of(n.embedding),
        }
        node_lines.append(_dumps(rec))
    edge_lines = []
    for eid in sorted(g.edges):
        e = g.edges[eid]
        rec = {
            "id": e.id,
            "source": e.source,
            "target": e.target,
            "description": e.description,
            "keywords": e.keywords,
            "chunk_ids": sorted(e.chunk_ids),
            "emb": row_of(e.embedding),
        }
        edge_lines.append(_dumps(rec))
    if len(dims) > 1:
        raise GraphError(f"mixed embedding dimensions {sorted(dims)}")
    dim = dims.pop() if dims else 0
    blob = np.vstack(rows).astype("<f4").tobytes() if rows else b""
    manifest = {
        "format": FORMAT_NAME,
        "schema_version": SCHEMA_VERSION,
        "dim": dim,
        "counts": {"chunks": len(chunk_lines), "nodes": len(node_lines), "edges": len(edge_lines), "rows": len(rows)},
    }
    for name, lines in (("chunks.jsonl", chunk_lines), ("nodes.jsonl", node_lines), ("edges.jsonl", edge_lines)):
        _atomic_write(path / name, "".join(line + "\n" for line in lines).encode("utf-8"))
    _atomic_write(path / "embeddings.f32", blob)
    _atomic_write(path / "manifest.json", (json.dumps(manifest, sort_keys=True, indent=2) + "\n").encode())


def load_graph(path: str | Path) -> KnowledgeGraph:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise GraphFormatError(f"{path} has no manifest.json") from None
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"corrupt manifest in {path}: {exc}") from None
    if manifest.get("format") != FORMAT_NAME:
        raise GraphFormatError(f"{path} is not a {FORMAT_NAME} directory")
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise GraphFormatError(
            f"schema version {manifest.get('schema_version')} in {path}; this build reads version {SCHEMA_VERSION}"
        )
    counts, dim = manifest["counts"], int(manifest["dim"])
    blob = (path / "embeddings.f32").read_bytes()
    if len(blob) != counts["rows"] * dim * 4:
        raise GraphFormatError(f"embeddings.f32 has {len(blob)} bytes, expected {counts['rows'] * dim * 4}")
    mat = np.frombuffer(blob, dtype="<f4").reshape(counts["rows"], dim) if dim else np.zeros((0, 0), "<f4")

    def records(name):
        out = []
        try:
            with open(path / name, encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, 1):
                    if line.strip():
                        out.append(json.loads(line))
        except (OSError, json.JSONDecodeError) as exc:
            raise GraphFormatError(f"corrupt {name}: {exc}") from None
        if len(out) != counts[name.split(".")[0]]:
            raise GraphFormatError(f"{name} has {len(out)} records, manifest says {counts[name.split('.')[0]]}")
        return out

    def vec(rec):
        r = rec.get("emb")
        if r is None:
            return None
        if not 0 <= r < counts["rows"]:
            raise GraphFormatError(f"embedding row {r} out of range")
        return mat[r].astype(np.float32)

    g = KnowledgeGraph()
    try:
        for rec in records("chunks.jsonl"):
            c = Chunk.from_record(rec)
            c.embedding = vec(rec)
            g.add_chunk(c)
        for rec in records("nodes.jsonl"):
            g.add_node(
                EntityNode(rec["id"], rec["name"], rec["description"], set(rec["chunk_ids"]), rec.get("type", ""), vec(rec))
            )
        for rec in records("edges.jsonl"):
            g.add_edge(
                RelationEdge(
                    rec["id"],
                    rec["source"],
                    rec["target"],
                    rec["description"],
                    set(rec["chunk_ids"]),
                    rec.get("keywords", ""),
                    vec(rec),
                )
            )
    except (KeyError, TypeError, GraphError) as exc:
        if isinstance(exc, GraphFormatError):
            raise
        raise GraphFormatError(f"corrupt graph record in {path}: {exc!r}") from None
    problems = g.integrity_problems()
    if problems:
        raise GraphFormatError(f"graph in {path} fails integrity checks: {problems[:3]}")
    return g
