"""Embedding providers, cosine similarity and exact top-k search."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .corpus import tokenize

log = logging.getLogger(__name__)


class EmbeddingError(ValueError):
    pass


class RetrievalUnavailable(RuntimeError):
    """The embedding provider failed after all retries."""

    def __init__(self, message: str, batch: Sequence[str]):
        super().__init__(message)
        self.batch = list(batch)


class UnknownItemError(KeyError):
    def __init__(self, item_id: str):
        super().__init__(item_id)
        self.item_id = item_id

    def __str__(self):
        return f"unknown item id {self.item_id!r}"


def content_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def as_vector(values, dim: int | None = None, dtype=np.float32) -> np.ndarray:
    vec = np.asarray(values, dtype=dtype)
    if vec.ndim != 1 or vec.size == 0:
        raise EmbeddingError("a vector must be a non-empty 1-d array")
    if dim is not None and vec.size != dim:
        raise EmbeddingError(f"expected dimension {dim}, got {vec.size}")
    if not np.all(np.isfinite(vec)):
        raise EmbeddingError("vector contains non-finite values")
    return vec


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise EmbeddingError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if not (np.any(a) and np.any(b)):
        raise EmbeddingError("cosine similarity is undefined for a zero vector")
    # rescale first so tiny or huge components cannot underflow/overflow the norms
    a = a / np.max(np.abs(a))
    b = b / np.max(np.abs(b))
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def _row_norms(mat: np.ndarray) -> np.ndarray:
    # elementwise reductions, so identical rows always get identical values;
    # BLAS kernels may round a row differently depending on its position
    mat = np.asarray(mat, dtype=np.float64)
    return np.sqrt(np.sum(mat * mat, axis=-1))


class VectorIndex:
    """Exact in-memory vector store keyed by item id."""

    def __init__(self, dim: int):
        if dim <= 0:
            raise EmbeddingError("dim must be positive")
        self.dim = dim
        self._rows: dict[str, int] = {}
        self._ids: list[str] = []
        self._matrix = np.zeros((0, dim), dtype=np.float32)
        self._norms = np.zeros(0, dtype=np.float64)

    @classmethod
    def from_items(cls, items: Iterable[tuple[str, np.ndarray]], dim: int) -> "VectorIndex":
        index = cls(dim)
        ids, vecs = [], []
        for item_id, vec in items:
            ids.append(item_id)
            vecs.append(as_vector(vec, dim))
        if len(set(ids)) != len(ids):
            raise EmbeddingError("duplicate ids in index")
        if ids:
            index._ids = ids
            index._rows = {i: r for r, i in enumerate(ids)}
            index._matrix = np.vstack(vecs)
            index._norms = _row_norms(index._matrix)
        return index

    def __len__(self):
        return len(self._ids)

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._rows

    def ids(self) -> list[str]:
        return list(self._ids)

    def get(self, item_id: str) -> np.ndarray:
        try:
            return self._matrix[self._rows[item_id]]
        except KeyError:
            raise UnknownItemError(item_id) from None

    def upsert(self, item_id: str, vec) -> None:
        vec = as_vector(vec, self.dim)
        row = self._rows.get(item_id)
        if row is None:
            self._rows[item_id] = len(self._ids)
            self._ids.append(item_id)
            self._matrix = np.vstack([self._matrix, vec[None, :]])
            self._norms = np.append(self._norms, _row_norms(vec))
        else:
            self._matrix[row] = vec
            self._norms[row] = _row_norms(vec)

    def scores(self, query, candidates: Sequence[str]) -> np.ndarray:
        """Cosine scores of ``query`` against each candidate, in candidate order."""
        q = as_vector(query, self.dim, np.float64)
        qn = np.linalg.norm(q)
        if qn == 0.0:
            raise EmbeddingError("cosine similarity is undefined for a zero query vector")
        rows = []
        for c in candidates:
            r = self._rows.get(c)
            if r is None:
                raise UnknownItemError(c)
            rows.append(r)
        rows = np.asarray(rows, dtype=np.int64)
        norms = self._norms[rows]
        if np.any(norms == 0.0):
            bad = candidates[int(np.flatnonzero(norms == 0.0)[0])]
            raise EmbeddingError(f"item {bad!r} has a zero vector")
        dots = np.sum(self._matrix[rows].astype(np.float64) * (q / qn), axis=1)
        return np.clip(dots / norms, -1.0, 1.0)


def rank(query, candidates: Iterable[str], index: VectorIndex) -> list[tuple[str, float]]:
    """All candidates with scores, best first; ties go to the smaller id."""
    cands = sorted(set(candidates))
    if not cands:
        return []
    scores = index.scores(query, cands)
    # ids are pre-sorted, so a stable sort leaves tied scores in ascending id order
    order = np.argsort(-scores, kind="stable")
    return [(cands[i], float(scores[i])) for i in order]


def top_k(query, candidates: Iterable[str], index: VectorIndex, k: int) -> list[str]:
    if k <= 0:
        raise ValueError("k must be positive")
    return [item for item, _ in rank(query, candidates, index)[:k]]


class Embedder(Protocol):
    dim: int

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]: ...


class HashingEmbedder:
    """Deterministic bag-of-tokens feature hashing, normalized to unit length.

    Needs no model and no network, which makes it the default for offline
    demos and synthetic test corpora. Texts with no tokens map to the first
    basis vector so every embedding is non-zero.
    """

    def __init__(self, dim: int = 256, tokenizer=None):
        self.dim = dim
        self.tokenizer = tokenizer

    def _one(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        for tok in tokenize(text.casefold(), self.tokenizer):
            h = hashlib.blake2b(tok.encode("utf-8"), digest_size=8).digest()
            bucket = int.from_bytes(h[:4], "little") % self.dim
            sign = 1.0 if h[4] & 1 else -1.0
            vec[bucket] += sign
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            vec[0] = 1.0
            norm = 1.0
        return (vec / norm).astype(np.float32)

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        return [self._one(t) for t in texts]

    def describe(self) -> dict:
        return {"kind": "hashing", "dim": self.dim}


class ScriptedEmbedder:
    """Replays vectors from a fixture mapping exact strings (or their sha256) to vectors.

    ``fallback`` handles texts missing from the fixture; without one a miss
    raises :class:`EmbeddingError`.
    """

    def __init__(self, table: dict[str, Sequence[float]], fallback: Embedder | None = None):
        vectors = {k: as_vector(v) for k, v in table.items()}
        dims = {v.size for v in vectors.values()}
        if fallback is not None:
            dims.add(fallback.dim)
        if len(dims) > 1:
            raise EmbeddingError(f"fixture vectors disagree on dimension: {sorted(dims)}")
        if not dims:
            raise EmbeddingError("empty embedding fixture needs a fallback")
        self.dim = dims.pop()
        self._table = vectors
        self.fallback = fallback

    @classmethod
    def from_file(cls, path: str | Path, fallback: Embedder | None = None) -> "ScriptedEmbedder":
        table = {}
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
        if Path(path).suffix == ".json":
            table = json.loads(text)
        else:
            for line in text.splitlines():
                if line.strip():
                    rec = json.loads(line)
                    table[rec.get("text") or rec["hash"]] = rec["vector"]
        return cls(table, fallback)

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        out = []
        for t in texts:
            vec = self._table.get(t)
            if vec is None:
                vec = self._table.get(content_hash(t))
            if vec is None:
                if self.fallback is None:
                    raise EmbeddingError(f"no scripted embedding for {t[:60]!r}")
                vec = self.fallback.embed([t])[0]
            out.append(vec.copy())
        return out

    def describe(self) -> dict:
        return {"kind": "scripted", "dim": self.dim}


class OpenAIEmbedder:
    """Client for an OpenAI-compatible ``/embeddings`` endpoint."""

    def __init__(
        self,
        model: str,
        base_url: str | None = None,
        api_key: str | None = None,
        dim: int | None = None,
        batch_size: int = 64,
        max_retries: int = 3,
        backoff: float = 1.0,
        timeout: float = 60.0,
        transport=None,
    ):
        import httpx

        self.model = model
        self.base_url = (base_url or os.getenv("OPENAI_BASE_URL") or "https://api.openai.com/v1").rstrip("/")
        key = api_key if api_key is not None else os.getenv("OPENAI_API_KEY", "")
        self.batch_size = batch_size
        self.max_retries = max_retries
        self.backoff = backoff
        self._client = httpx.Client(
            timeout=timeout,
            transport=transport,
            headers={"Authorization": f"Bearer {key}"} if key else {},
        )
        self._dim = dim

    @property
    def dim(self) -> int:
        if self._dim is None:
            # handshake: one probe request tells us the provider's dimension
            self._dim = int(self._request(["dimension probe"])[0].size)
        return self._dim

    def _request(self, batch: list[str]) -> list[np.ndarray]:
        import httpx

        last = None
        for attempt in range(self.max_retries + 1):
            try:
                resp = self._client.post(
                    f"{self.base_url}/embeddings", json={"model": self.model, "input": batch}
                )
                if resp.status_code == 429 or resp.status_code >= 500:
                    raise httpx.HTTPStatusError(f"status {resp.status_code}", request=resp.request, response=resp)
                if resp.status_code >= 400:
                    # client errors will not go away on retry
                    raise RetrievalUnavailable(f"embedding provider rejected the request: {resp.status_code} {resp.text[:200]}", batch)
                data = sorted(resp.json()["data"], key=lambda d: d["index"])
                if len(data) != len(batch):
                    raise EmbeddingError(f"provider returned {len(data)} vectors for {len(batch)} inputs")
                return [as_vector(d["embedding"]) for d in data]
            except (httpx.TransportError, httpx.HTTPStatusError) as exc:
                last = exc
                if attempt < self.max_retries:
                    time.sleep(self.backoff * 2**attempt)
        raise RetrievalUnavailable(f"embedding provider failed: {last}", batch)

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        texts = list(texts)
        for i in range(0, len(texts), self.batch_size):
            out.extend(self._request(texts[i : i + self.batch_size]))
        if out and self._dim is None:
            self._dim = int(out[0].size)
        return out

    def describe(self) -> dict:
        return {"kind": "openai", "model": self.model, "dim": self._dim}


class CachedEmbedder:
    """Wraps a provider with a content-hash keyed cache that can be saved to disk."""

    def __init__(self, inner: Embedder, cache: dict[str, np.ndarray] | None = None):
        self.inner = inner
        self.cache: dict[str, np.ndarray] = dict(cache or {})
        self.misses = 0

    @property
    def dim(self) -> int:
        return self.inner.dim

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        keys = [content_hash(t) for t in texts]
        todo = sorted({k: t for k, t in zip(keys, texts) if k not in self.cache}.items())
        if todo:
            self.misses += len(todo)
            vecs = self.inner.embed([t for _, t in todo])
            for (k, _), v in zip(todo, vecs):
                self.cache[k] = as_vector(v)
        return [self.cache[k].copy() for k in keys]

    def describe(self) -> dict:
        return getattr(self.inner, "describe", lambda: {"kind": type(self.inner).__name__})()

    def save(self, path: str | Path) -> None:
        keys = sorted(self.cache)
        mat = np.vstack([self.cache[k] for k in keys]) if keys else np.zeros((0, 0), np.float32)
        with open(path, "wb") as fh:
            np.savez(fh, keys=np.asarray(keys, dtype=str), vectors=mat.astype("<f4"))

    @staticmethod
    def load_cache(path: str | Path) -> dict[str, np.ndarray]:
        path = Path(path)
        if not path.exists():
            return {}
        with np.load(path) as data:
            return {str(k): v.astype(np.float32) for k, v in zip(data["keys"], data["vectors"])}


def embed(texts: Sequence[str], provider: Embedder) -> list[np.ndarray]:
    """Embed a batch, checking the provider's declared dimension."""
    if not texts:
        return []
    vecs = provider.embed(list(texts))
    if len(vecs) != len(texts):
        raise EmbeddingError(f"provider returned {len(vecs)} vectors for {len(texts)} texts")
    return [as_vector(v, provider.dim) for v in vecs]
