"""Offline stand-ins: a rule-based LLM and random graph/corpus generators.

:class:`HeuristicLLM` answers every role from the structured ``context`` of
a request instead of its prompt text, so sessions run end to end with no
model and no fixtures. It is deliberately simple; its job is to exercise
the memory machinery (inserts from evidence, updates, merges of points that
share entities) deterministically, not to answer well.
"""

from __future__ import annotations

import hashlib
import random
import re
from dataclasses import dataclass

from .corpus import Chunk, chunk_document, count_tokens, tokenize
from .graph import EntityNode, KnowledgeGraph, RelationEdge, edge_id, normalize_name
from .providers import ChatRequest, Completion


def _rng(*parts) -> random.Random:
    digest = hashlib.sha256(repr(parts).encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "little"))


def _words(text: str) -> set[str]:
    return {t for t in tokenize(text.casefold()) if t.isalnum()}


@dataclass
class HeuristicLLM:
    """Deterministic rule-based chat provider.

    ``sufficient_at``: judge memory sufficient once it has this many live
    points (None: never). ``merge``: propose merges of points sharing an
    entity. ``update_rate``: chance that a point touched by new evidence is
    re-described. ``seed`` varies the choices between sessions.
    """

    seed: int = 0
    sufficient_at: int | None = None
    max_inserts: int = 3
    max_merges: int = 2
    merge: bool = True
    update_rate: float = 0.5
    local_rate: float = 0.6

    def reset(self) -> None:
        pass

    def complete(self, request: ChatRequest) -> Completion:
        ctx = request.context or {}
        tag = request.tag
        if tag.startswith("score_"):
            text = self._score(ctx)
        else:
            handler = getattr(self, "_" + tag, None)
            if handler is None:
                raise ValueError(f"no heuristic for tag {tag!r}")
            text = handler(ctx, request.step)
        return Completion(text, count_tokens(request.prompt), count_tokens(text))

    # -- extraction ------------------------------------------------------------

    def _extract(self, ctx, step):
        # capitalized names are entities; names sharing a sentence are related
        chunk: Chunk = ctx["chunk"]
        lines, seen = [], set()
        for sentence in re.split(r"(?<=[.!?])\s+", chunk.text):
            names = []
            for n in _names_in(sentence):
                if n not in names:
                    names.append(n)
            for n in names:
                if n not in seen:
                    seen.add(n)
                    lines.append(f'("entity"<|>{n}<|>thing<|>{n} appears in the text.)##')
            for a, b in zip(names, names[1:]):
                lines.append(f'("relationship"<|>{a}<|>{b}<|>{sentence.strip()}<|>cooccurrence<|>1)##')
        return "\n".join(lines + ["<|COMPLETE|>"])

    def _summarize(self, ctx, step):
        return " ".join(ctx["fragments"][:3])

    # -- session roles -----------------------------------------------------------

    def _sufficiency(self, ctx, step):
        m = ctx["memory"]
        ok = self.sufficient_at is not None and len(m.points) >= self.sufficient_at
        return "SUFFICIENT: " + ("YES" if ok else "NO")

    def _concerns(self, ctx, step):
        m, q = ctx["memory"], ctx["query"]
        rng = _rng(self.seed, "concerns", step)
        blocks = []
        for pid in sorted(m.points):
            if rng.random() < self.local_rate and len(blocks) < 2:
                names = ", ".join(sorted(m.vertices[v].name for v in m.points[pid].vertex_ids))
                blocks.append(f"[CONCERN]\nPOINT: {pid}\nTEXT: What else is connected to {names}?\n[END]")
        blocks.append(f"[CONCERN]\nPOINT: NONE\nTEXT: What other facts bear on: {q}\n[END]")
        return "\n".join(blocks)

    def _subqueries(self, ctx, step):
        return "\n".join(
            f"[SUBQUERY]\nCONCERN: {k}\nTEXT: {c.text}\n[END]" for k, c in enumerate(ctx["concerns"][: ctx["max_subqueries"]], 1)
        )

    def _update_insert(self, ctx, step):
        m, g = ctx["memory"], ctx["graph"]
        rng = _rng(self.seed, "delta", step)
        evidence = ctx["evidence"]
        covered = [set(p.vertex_ids) for p in m.points.values()]
        blocks, touched = [], set()
        seen: set[str] = set()
        for ev in evidence:
            chunk_ids = {c.id for c in ev.chunks}
            for rel in ev.relations:
                if rel.id in seen or len(blocks) >= self.max_inserts:
                    continue
                seen.add(rel.id)
                pair = {rel.source, rel.target}
                touched |= pair
                if any(pair <= vs for vs in covered):
                    continue
                covered.append(pair)
                names = " | ".join(g.nodes[v].name for v in sorted(pair))
                sources = " | ".join(sorted(rel.chunk_ids & chunk_ids))
                blocks.append(f"[INSERT]\nENTITIES: {names}\nDESCRIPTION: {rel.description}\nSOURCES: {sources}\n[END]")
        for pid in sorted(m.points):
            p = m.points[pid]
            if p.vertex_ids & touched and rng.random() < self.update_rate:
                blocks.append(f"[UPDATE]\nPOINT: {pid}\nDESCRIPTION: {p.description.split(' [')[0]} [revisited at step {step}]\n[END]")
        return "\n".join(blocks) or "(no changes)"

    def _merge(self, ctx, step):
        if not self.merge:
            return "(no merges)"
        m = ctx["memory"]
        used: set[str] = set()
        blocks = []
        ids = sorted(m.points)
        for i, a in enumerate(ids):
            for b in ids[i + 1 :]:
                if len(blocks) >= self.max_merges or a in used or b in used:
                    continue
                if m.points[a].vertex_ids & m.points[b].vertex_ids:
                    used |= {a, b}
                    desc = _join(m.points[a].description, m.points[b].description)
                    blocks.append(f"[MERGE]\nPOINTS: {a} | {b}\nDESCRIPTION: {desc}\n[END]")
        return "\n".join(blocks) or "(no merges)"

    def _merge_description(self, ctx, step):
        return _join(ctx["first"].description, ctx["second"].description)

    def _answer(self, ctx, step):
        m = ctx["memory"]
        facts = [m.points[p].description for p in sorted(m.points)]
        return f"{ctx['query']} -> " + ("; ".join(facts) if facts else "unknown")

    # -- judging ----------------------------------------------------------------

    def _judge_accuracy(self, ctx, step):
        ok = _words(ctx["reference"]) <= _words(ctx["prediction"])
        return "VERDICT: " + ("TRUE" if ok else "FALSE")

    def _score(self, ctx):
        src = _words(ctx["source"]) or {""}
        frac = len(src & _words(ctx["prediction"])) / len(src)
        score = min(100, int(frac * 100))
        level = next(lv for lv in ctx["levels"] if lv["low"] <= score <= lv["high"])
        return f"LEVEL: {level['level']}\nSCORE: {score}"


_NAME = re.compile(r"[A-Z][a-z]+(?:\s+(?:of\s+(?:the\s+)?)?[A-Z][a-z]+)*")
# capitalized only because they open a sentence
_STARTERS = set("A An And After Also Before Every He Her His How In It On She The Their There They This What When Where Who Why".split())
_REVISIT = re.compile(r"\s*\[revisited at step \d+\]")


def _names_in(sentence: str) -> list[str]:
    out = []
    for match in _NAME.finditer(sentence):
        words = match.group().split()
        while words and words[0] in _STARTERS:
            words = words[1:]
        if words:
            out.append(" ".join(words))
    return out


def _join(a: str, b: str, cap: int = 400) -> str:
    """Union of the sentences of two descriptions, in order, without repeats."""
    parts: list[str] = []
    for text in (a, b):
        for sent in re.split(r"(?<=[.!?])\s+", _REVISIT.sub("", text).strip()):
            if sent and sent not in parts:
                parts.append(sent)
    text = " ".join(parts)
    return text if len(text) <= cap else text[: cap - 3].rstrip() + "..."


def random_graph(
    n_entities: int = 30,
    n_edges: int = 60,
    n_chunks: int = 12,
    seed: int = 0,
) -> KnowledgeGraph:
    """A random graph with chunk provenance and unembedded items."""
    rng = random.Random(seed)
    g = KnowledgeGraph()
    chunks = []
    for k in range(n_chunks):
        words = " ".join(rng.choice(_VOCAB) for _ in range(12))
        c = Chunk(f"chunk-{k:04d}", "synthetic", f"Passage {k}: {words}.", k * 12, k * 12 + 12)
        g.add_chunk(c)
        chunks.append(c.id)
    names = [f"{rng.choice(_VOCAB).title()} {k}" for k in range(n_entities)]
    for name in names:
        g.add_node(
            EntityNode(
                normalize_name(name),
                name,
                f"{name} is {rng.choice(_VOCAB)} and {rng.choice(_VOCAB)}.",
                set(rng.sample(chunks, rng.randint(1, min(3, n_chunks)))),
            )
        )
    ids = sorted(g.nodes)
    for _ in range(n_edges):
        a, b = rng.sample(ids, 2)
        desc = f"{g.nodes[a].name} {rng.choice(_VOCAB)} {g.nodes[b].name}"
        prov = set(rng.sample(sorted(g.nodes[a].chunk_ids | g.nodes[b].chunk_ids), 1))
        g.add_edge(RelationEdge(edge_id(a, b, desc), a, b, desc, prov))
    return g


def random_corpus(n_docs: int = 3, sentences: int = 40, seed: int = 0) -> list[tuple[str, str]]:
    """Documents of simple sentences mentioning a small cast of capitalized names."""
    rng = random.Random(seed)
    cast = [w.title() for w in rng.sample(_NAMES, 14)]
    docs = []
    for d in range(n_docs):
        lines = []
        for _ in range(sentences):
            a, b = rng.sample(cast, 2)
            lines.append(f"{a} {rng.choice(_VERBS)} {b} near the {rng.choice(_VOCAB)}.")
        docs.append((f"doc{d:02d}", " ".join(lines)))
    return docs


def chunk_corpus(docs, chunk_size: int = 200, overlap: int = 50) -> list[Chunk]:
    return [c for doc_id, text in docs for c in chunk_document(doc_id, text, chunk_size, overlap)]


_VOCAB = (
    "river harbor lantern archive tower garden market bridge forest engine "
    "mirror treaty signal orchard quarry vessel ledger canal furnace meadow"
).split()
_NAMES = (
    "alder brisk corin dalia ephra fenwick galen hollis ivor jessa kestrel lorne "
    "marrow nyla orrin pell quill rosk sabine tamsin"
).split()
_VERBS = "meets trusts follows warns helps avoids visits hires".split()
