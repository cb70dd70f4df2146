"""Document ingestion and overlapping token-window chunking.

Chunks are the provenance unit for everything downstream: graph nodes,
graph edges and memory vertices all point back to chunk ids.
"""

from __future__ import annotations

import hashlib
import json
import re
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

DEFAULT_TOKENIZER = {"name": "wordpunct", "version": 1}

_PATTERNS = {
    # words (unicode letters/digits/underscore) or single non-space symbols
    "wordpunct": re.compile(r"\w+|[^\w\s]"),
    "whitespace": re.compile(r"\S+"),
}


class ChunkingError(ValueError):
    pass


@dataclass(frozen=True)
class TokenizerSpec:
    """Self-describing tokenizer choice, recorded in index manifests."""

    name: str = "wordpunct"
    version: int = 1

    def __post_init__(self):
        if self.name not in _PATTERNS:
            raise ValueError(f"unknown tokenizer {self.name!r}; known: {sorted(_PATTERNS)}")

    @classmethod
    def coerce(cls, spec: "TokenizerSpec | dict | str | None") -> "TokenizerSpec":
        if spec is None:
            return cls()
        if isinstance(spec, cls):
            return spec
        if isinstance(spec, str):
            return cls(name=spec)
        return cls(name=spec.get("name", "wordpunct"), version=int(spec.get("version", 1)))

    def to_dict(self) -> dict:
        return {"name": self.name, "version": self.version}


def normalize_text(text: str) -> str:
    return unicodedata.normalize("NFC", text)


def token_spans(text: str, tokenizer: TokenizerSpec | dict | str | None = None) -> list[tuple[int, int]]:
    """Character spans ``(start, end)`` of each token in ``text``."""
    spec = TokenizerSpec.coerce(tokenizer)
    return [m.span() for m in _PATTERNS[spec.name].finditer(text)]


def tokenize(text: str, tokenizer: TokenizerSpec | dict | str | None = None) -> list[str]:
    """Split NFC-normalized ``text`` into tokens (no whitespace tokens)."""
    spec = TokenizerSpec.coerce(tokenizer)
    return _PATTERNS[spec.name].findall(normalize_text(text))


def count_tokens(text: str, tokenizer: TokenizerSpec | dict | str | None = None) -> int:
    return len(tokenize(text, tokenizer))


def chunk_id(doc_id: str, token_start: int, token_end: int) -> str:
    digest = hashlib.sha1(f"{doc_id}\x1f{token_start}\x1f{token_end}".encode()).hexdigest()
    return f"chunk-{digest[:16]}"


@dataclass
class Chunk:
    id: str
    doc_id: str
    text: str
    token_start: int
    token_end: int
    embedding: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.token_end <= self.token_start:
            raise ChunkingError(f"empty chunk [{self.token_start}, {self.token_end})")

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "doc_id": self.doc_id,
            "token_start": self.token_start,
            "token_end": self.token_end,
            "text": self.text,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Chunk":
        return cls(
            id=rec["id"],
            doc_id=rec["doc_id"],
            text=rec["text"],
            token_start=int(rec["token_start"]),
            token_end=int(rec["token_end"]),
        )


def window_bounds(n_tokens: int, chunk_size: int, overlap: int) -> list[tuple[int, int]]:
    """Token ranges of each window; the last one is clamped to ``n_tokens``."""
    if chunk_size <= 0:
        raise ChunkingError("chunk_size must be positive")
    if not 0 <= overlap < chunk_size:
        raise ChunkingError(f"overlap must satisfy 0 <= overlap < chunk_size (got {overlap}, {chunk_size})")
    stride = chunk_size - overlap
    bounds = []
    start = 0
    while start < n_tokens:
        end = min(start + chunk_size, n_tokens)
        bounds.append((start, end))
        if end == n_tokens:
            break
        start += stride
    return bounds


def chunk_document(
    doc_id: str,
    text: str,
    chunk_size: int = 200,
    overlap: int = 50,
    tokenizer: TokenizerSpec | dict | str | None = None,
) -> list[Chunk]:
    """Split a document into overlapping token windows.

    Window ``i`` covers tokens ``[i*stride, i*stride + chunk_size)`` with
    ``stride = chunk_size - overlap``. The last window stops at the end of the
    document and may be shorter. A window is not emitted once an earlier one
    already reaches the end, so every chunk contributes at least one new token.
    Chunk text is the exact source substring between the first and last token.
    """
    text = normalize_text(text)
    spans = token_spans(text, tokenizer)
    chunks = []
    for start, end in window_bounds(len(spans), chunk_size, overlap):
        body = text[spans[start][0] : spans[end - 1][1]]
        chunks.append(Chunk(chunk_id(doc_id, start, end), doc_id, body, start, end))
    return chunks


def read_corpus(path: str | Path) -> list[tuple[str, str]]:
    """Return ``(doc_id, text)`` pairs for a file or a directory of ``*.txt`` files."""
    path = Path(path)
    if path.is_file():
        files = [path]
    elif path.is_dir():
        files = sorted(p for p in path.rglob("*.txt") if p.is_file())
    else:
        raise FileNotFoundError(f"corpus path {path} does not exist")
    docs = []
    for f in files:
        doc_id = f.stem if path.is_file() else f.relative_to(path).with_suffix("").as_posix()
        docs.append((doc_id, normalize_text(f.read_text(encoding="utf-8"))))
    return docs


def write_chunks(chunks: Iterable[Chunk], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for c in chunks:
            fh.write(json.dumps(c.to_record(), sort_keys=True, ensure_ascii=False) + "\n")


def iter_chunks(path: str | Path) -> Iterator[Chunk]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield Chunk.from_record(json.loads(line))
