"""Offline index build: corpus -> chunks -> graph -> embeddings, with a manifest."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

from .corpus import TokenizerSpec, chunk_document, read_corpus
from .embedding import Embedder
from .graph import ExtractionParams, KnowledgeGraph, extract_graph, load_graph, save_graph
from .providers import ChatProvider, ExchangeLog

log = logging.getLogger(__name__)

INDEX_MANIFEST = "index.json"


class IndexBuildError(RuntimeError):
    pass


class NoDocumentsError(IndexBuildError):
    pass


class ExtractionFailed(IndexBuildError):
    pass


class MissingIndexError(IndexBuildError):
    pass


@dataclass
class BuildResult:
    path: Path
    up_to_date: bool
    manifest: dict


def _describe(obj) -> dict:
    return obj.describe() if hasattr(obj, "describe") else {"kind": type(obj).__name__}


def inputs_hash(docs, chunk_size: int, overlap: int, tokenizer: TokenizerSpec, embedder: Embedder, llm_id: dict) -> str:
    h = hashlib.sha256()
    settings = {
        "chunk_size": chunk_size,
        "overlap": overlap,
        "tokenizer": tokenizer.to_dict(),
        "embedder": _describe(embedder),
        "llm": llm_id,
    }
    h.update(json.dumps(settings, sort_keys=True).encode())
    for doc_id, text in sorted(docs):
        h.update(doc_id.encode("utf-8") + b"\0" + hashlib.sha256(text.encode("utf-8")).digest())
    return h.hexdigest()


def build_index(
    corpus_path: str | Path,
    out: str | Path,
    llm: ChatProvider,
    embedder: Embedder,
    chunk_size: int = 200,
    overlap: int = 50,
    tokenizer: TokenizerSpec | None = None,
    params: ExtractionParams | None = None,
    llm_id: dict | None = None,
) -> BuildResult:
    """Build (or confirm up to date) the index at ``out``.

    ``llm_id`` identifies the extractor in the content hash; rebuilding with
    a different extractor, embedder or chunking invalidates the index.
    """
    out = Path(out)
    tokenizer = TokenizerSpec.coerce(tokenizer)
    docs = read_corpus(corpus_path)
    if not docs:
        raise NoDocumentsError(f"no documents in {corpus_path}")
    digest = inputs_hash(docs, chunk_size, overlap, tokenizer, embedder, llm_id or _describe(llm))
    manifest_path = out / INDEX_MANIFEST
    if manifest_path.exists():
        old = json.loads(manifest_path.read_text(encoding="utf-8"))
        if old.get("inputs_hash") == digest:
            return BuildResult(out, True, old)

    chunks = [c for doc_id, text in docs for c in chunk_document(doc_id, text, chunk_size, overlap, tokenizer)]
    exchanges = ExchangeLog()
    g, skipped = extract_graph(chunks, llm, embedder, params, exchanges)
    if len(skipped) == len(chunks):
        raise ExtractionFailed(f"extraction failed on all {len(chunks)} chunks")
    save_graph(g, out / "graph")
    manifest = {
        "inputs_hash": digest,
        "documents": len(docs),
        "chunks": len(chunks),
        "skipped_chunks": skipped,
        "nodes": len(g.nodes),
        "edges": len(g.edges),
        "tokenizer": tokenizer.to_dict(),
        "chunk_size": chunk_size,
        "overlap": overlap,
        "embedder": _describe(embedder),
        "tokens": {"prompt": sum(e.prompt_tokens for e in exchanges), "completion": sum(e.completion_tokens for e in exchanges)},
    }
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return BuildResult(out, False, manifest)


def open_index(path: str | Path) -> tuple[KnowledgeGraph, dict]:
    path = Path(path)
    manifest_path = path / INDEX_MANIFEST
    if not manifest_path.exists():
        raise MissingIndexError(f"no index at {path}; build one with `hypermem index` first")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    return load_graph(path / "graph"), manifest
