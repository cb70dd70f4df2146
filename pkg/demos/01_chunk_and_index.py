"""Chunk a small corpus and build a knowledge-graph index from it.

Runs offline: entity extraction uses the rule-based HeuristicLLM and vectors
come from the hashing embedder.

    python demos/01_chunk_and_index.py
"""

import tempfile
from pathlib import Path

from hypermem import HashingEmbedder, HeuristicLLM, chunk_document, read_corpus
from hypermem.indexing import build_index, open_index

CORPUS = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "golden" / "corpus"

docs = read_corpus(CORPUS)
print(f"{len(docs)} documents:", ", ".join(d for d, _ in docs))

# Small windows so the overlap is visible on a short document.
doc_id, text = docs[0]
chunks = chunk_document(doc_id, text, chunk_size=40, overlap=10)
for c in chunks[:3]:
    print(f"  {c.id}  tokens [{c.token_start:3d}, {c.token_end:3d})  {c.text[:60]!r}...")
print(f"  ... {len(chunks)} chunks of 40 tokens with stride 30")

out = Path(tempfile.mkdtemp()) / "index"
result = build_index(CORPUS, out, HeuristicLLM(), HashingEmbedder(256))
g, manifest = open_index(out)
print(f"\nindex at {out}")
print(f"  {len(g.nodes)} entities, {len(g.edges)} relations, {len(g.chunks)} chunks")
for node in sorted(g.nodes.values(), key=lambda n: -len(n.chunk_ids))[:5]:
    print(f"  {node.name:<16} seen in {len(node.chunk_ids)} chunk(s)")

# A second build with the same inputs is a no-op.
again = build_index(CORPUS, out, HeuristicLLM(), HashingEmbedder(256))
print(f"\nrebuild skipped: {again.up_to_date}")
