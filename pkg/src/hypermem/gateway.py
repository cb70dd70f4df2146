"""Prompt roles of a session: sufficiency, concerns, subqueries, memory delta, merge, response.

Each role renders a packaged prompt, sends it through :func:`providers.chat`
and parses the reply with the tagged-block grammar. Parse failures get one
reprompt with a format reminder; after that each role degrades to a safe
default instead of raising.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Sequence

from .assets import render_prompt
from .corpus import Chunk
from .grammar import Block, parse_blocks, parse_choice
from .graph import KnowledgeGraph, fragments, normalize_name
from .memory import (
    Insertion,
    MemoryDelta,
    MemoryHypergraph,
    MemoryOpError,
    MemoryPoint,
    apply_delta,
    apply_merge,
    render_memory,
)
from .providers import DEFAULT_MAX_OUTPUT_TOKENS, DEFAULT_TEMPERATURE, ChatProvider, ChatRequest, ExchangeLog, chat
from .retrieval import GLOBAL, LOCAL, Evidence, GraphIndex, Subquery
from .embedding import rank

log = logging.getLogger(__name__)

NO_CHUNKS_TEXT = "(no supporting passages)"
FORMAT_REMINDER = "Your previous reply could not be parsed. Reply again using exactly the format described above."

_POINT_ID = re.compile(r"\bP\d{4,}\b")

CONCERN_SCHEMA = {"CONCERN": ("POINT", "TEXT")}
SUBQUERY_SCHEMA = {"SUBQUERY": ("CONCERN", "TEXT")}
DELTA_SCHEMA = {"UPDATE": ("POINT", "DESCRIPTION"), "INSERT": ("ENTITIES", "DESCRIPTION", "SOURCES")}
MERGE_SCHEMA = {"MERGE": ("POINTS", "DESCRIPTION")}


@dataclass
class Concern:
    text: str
    target_point: str | None = None

    def to_record(self) -> dict:
        return {"text": self.text, "target_point": self.target_point}

    def to_block(self) -> Block:
        return Block("CONCERN", {"POINT": self.target_point or "NONE", "TEXT": self.text})


def render_evidence(batch: Sequence[Evidence]) -> str:
    """Evidence from all of a step's subqueries, each item listed once."""
    if not batch:
        return "(no new evidence)"
    parts = []
    seen: set[str] = set()
    for k, ev in enumerate(batch, 1):
        lines = [f"### Subquery {k}: {ev.subquery.text}"]
        ents = [e for e in ev.entities if ("e", e.id) not in seen]
        rels = [r for r in ev.relations if ("r", r.id) not in seen]
        chunks = [c for c in ev.chunks if ("c", c.id) not in seen]
        seen |= {("e", e.id) for e in ents} | {("r", r.id) for r in rels} | {("c", c.id) for c in chunks}
        if ents:
            lines.append("Entities:")
            lines += [f"- {e.name}: {' '.join(fragments(e.description))}".rstrip(": ") for e in ents]
        if rels:
            lines.append("Relationships:")
            lines += [f"- {r.source} -- {r.target}: {r.description}" for r in rels]
        if chunks:
            lines.append("Passages:")
            lines += [f"[{c.id}] {c.text}" for c in chunks]
        if len(lines) == 1:
            lines.append("(nothing retrieved)")
        parts.append("\n".join(lines))
    return "\n\n".join(parts)


def render_point(m: MemoryHypergraph, p: MemoryPoint) -> str:
    members = ", ".join(sorted(m.vertices[v].name for v in p.vertex_ids))
    return f"[Memory point {p.id}]\nEntities: {members}\nDescription: {p.description}"


@dataclass
class LLMGateway:
    provider: ChatProvider
    exchanges: ExchangeLog = field(default_factory=ExchangeLog)
    temperature: float = DEFAULT_TEMPERATURE
    max_output_tokens: int = DEFAULT_MAX_OUTPUT_TOKENS
    step: int = 0
    # (tag, step) of replies that stayed unparseable after the reprompt
    parse_failures: list[tuple[str, int]] = field(default_factory=list)

    def ask(self, tag: str, prompt: str, context: dict | None = None, reminder: bool = False, step: int | None = None) -> str:
        messages = [("user", prompt)]
        if reminder:
            messages.append(("user", FORMAT_REMINDER))
        req = ChatRequest(
            messages,
            tag=tag,
            temperature=self.temperature,
            max_output_tokens=self.max_output_tokens,
            step=self.step if step is None else step,
            context=context,
        )
        return chat(req, self.provider, self.exchanges)

    def ask_parsed(self, tag: str, prompt: str, parse, context: dict | None = None, step: int | None = None):
        """Ask, parse, and reprompt once if the parser returns ``None``."""
        for attempt in range(2):
            result = parse(self.ask(tag, prompt, context, reminder=attempt > 0, step=step))
            if result is not None:
                return result
        self.parse_failures.append((tag, self.step if step is None else step))
        log.warning("unparseable %s reply at step %s after reprompt", tag, self.step if step is None else step)
        return None

    # -- roles ---------------------------------------------------------------

    def judge_sufficiency(self, m: MemoryHypergraph, target_query: str) -> bool:
        if not m.points:
            # nothing to answer from; not worth a call
            return False
        prompt = render_prompt("sufficiency", query=target_query, memory=render_memory(m))
        verdict = self.ask_parsed(
            "sufficiency",
            prompt,
            lambda text: parse_choice(text, "SUFFICIENT", ("YES", "NO")),
            {"memory": m, "query": target_query},
        )
        return verdict == "YES"

    def raise_concerns(self, m: MemoryHypergraph, target_query: str) -> list[Concern]:
        prompt = render_prompt("concerns", query=target_query, memory=render_memory(m))

        def parse(text):
            blocks, _ = parse_blocks(text, CONCERN_SCHEMA)
            out = []
            for b in blocks:
                body = b.get("TEXT", "")
                if not body:
                    continue
                target = None
                raw = b.get("POINT", "NONE")
                ids = _POINT_ID.findall(raw)
                if ids:
                    if ids[0] in m.points:
                        target = ids[0]
                    else:
                        log.warning("concern targets non-live point %s; treating it as untargeted", ids[0])
                out.append(Concern(body, target))
            return out or None

        return self.ask_parsed("concerns", prompt, parse, {"memory": m, "query": target_query}) or []

    def generate_subqueries(
        self,
        concerns: Sequence[Concern],
        m: MemoryHypergraph,
        target_query: str,
        max_subqueries: int,
    ) -> list[Subquery]:
        fallback = [Subquery(target_query, GLOBAL, None, self.step)]
        if not concerns:
            return fallback
        listing = "\n".join(
            f"{k}. ({'about memory point ' + c.target_point if c.target_point else 'outside current memory'}) {c.text}"
            for k, c in enumerate(concerns, 1)
        )
        prompt = render_prompt(
            "subqueries", query=target_query, memory=render_memory(m), concerns=listing, max_subqueries=max_subqueries
        )

        def parse(text):
            blocks, _ = parse_blocks(text, SUBQUERY_SCHEMA)
            out = []
            for b in blocks:
                body = b.get("TEXT", "")
                ref = re.search(r"\d+", b.get("CONCERN", ""))
                if not body or ref is None or not 1 <= int(ref.group()) <= len(concerns):
                    continue
                target = concerns[int(ref.group()) - 1].target_point
                if target is not None and target not in m.points:
                    target = None
                out.append(Subquery(body, LOCAL if target else GLOBAL, target, self.step))
            return out or None

        subs = self.ask_parsed(
            "subqueries",
            prompt,
            parse,
            {"concerns": list(concerns), "memory": m, "query": target_query, "max_subqueries": max_subqueries},
        )
        return (subs or fallback)[:max_subqueries]

    def propose_memory_delta(
        self,
        m: MemoryHypergraph,
        g: KnowledgeGraph,
        evidence_batch: Sequence[Evidence],
        target_query: str,
        enable_update: bool = True,
        enable_merge: bool = True,
    ) -> MemoryDelta:
        """Two turns: update/insert proposals from the evidence, then merges over the result."""
        delta = MemoryDelta()
        evidence_chunks: dict[str, Chunk] = {}
        for ev in evidence_batch:
            for c in ev.chunks:
                evidence_chunks.setdefault(c.id, c)

        prompt = render_prompt("update_insert", query=target_query, memory=render_memory(m), evidence=render_evidence(evidence_batch))
        reply = self.ask("update_insert", prompt, {"memory": m, "evidence": list(evidence_batch), "query": target_query, "graph": g})
        blocks, problems = parse_blocks(reply, DELTA_SCHEMA)
        for p in problems:
            log.debug("update_insert: %s", p)
        for b in blocks:
            desc = b.get("DESCRIPTION", "")
            if not desc:
                continue
            if b.kind == "UPDATE":
                ids = _POINT_ID.findall(b.get("POINT", ""))
                if not ids or ids[0] not in m.points:
                    log.warning("dropping update of non-live point %r", b.get("POINT"))
                    continue
                if enable_update:
                    delta.updates.append((ids[0], desc))
            else:
                names = b.get_list("ENTITIES")
                if not names:
                    continue
                sources = [s for s in b.get_list("SOURCES") if s in evidence_chunks]
                delta.insertions.append(Insertion(desc, names, _provenance(names, g, evidence_chunks, sources)))

        if not enable_merge:
            return delta
        # merges are proposed against memory as it will look after this turn
        staged = m.copy()
        apply_delta(staged, g.overlay(), delta, self.step)
        if len(staged.points) < 2:
            return delta
        prompt = render_prompt("merge", query=target_query, memory=render_memory(staged))
        reply = self.ask("merge", prompt, {"memory": staged, "query": target_query})
        blocks, _ = parse_blocks(reply, MERGE_SCHEMA)
        for b in blocks:
            ids = _POINT_ID.findall(b.get("POINTS", ""))
            if len(ids) != 2 or ids[0] == ids[1] or ids[0] not in staged.points or ids[1] not in staged.points:
                log.warning("dropping merge proposal %r", b.get("POINTS"))
                continue
            desc = b.get("DESCRIPTION", "") or self.merge_description(staged.points[ids[0]], staged.points[ids[1]], target_query, staged)
            if not desc.strip():
                continue
            try:
                apply_merge(staged, ids[0], ids[1], desc, self.step)
            except MemoryOpError as exc:
                log.warning("dropping merge proposal: %s", exc)
                continue
            delta.merges.append((ids[0], ids[1], desc))
        return delta

    def merge_description(self, first: MemoryPoint, second: MemoryPoint, target_query: str, m: MemoryHypergraph) -> str:
        prompt = render_prompt(
            "merge_description", query=target_query, first=render_point(m, first), second=render_point(m, second)
        )
        reply = self.ask("merge_description", prompt, {"first": first, "second": second, "query": target_query})
        return " ".join(reply.split())

    def response_chunks(self, m: MemoryHypergraph, g: KnowledgeGraph, target_query: str, chunk_budget: int, index: GraphIndex) -> list[str]:
        pool = set()
        for v in m.vertices.values():
            pool |= {c for c in v.chunk_ids if c in g.chunks}
        if chunk_budget <= 0:
            return []
        return [cid for cid, _ in rank(index.query_vector(target_query), pool, index.chunks)[:chunk_budget]]

    def generate_response(
        self, m: MemoryHypergraph, g: KnowledgeGraph, target_query: str, chunk_budget: int, index: GraphIndex
    ) -> str:
        chunk_ids = self.response_chunks(m, g, target_query, chunk_budget, index)
        chunks = "\n\n".join(f"[{cid}] {g.chunks[cid].text}" for cid in chunk_ids) or NO_CHUNKS_TEXT
        prompt = render_prompt("response", query=target_query, memory=render_memory(m), chunks=chunks)
        return self.ask("answer", prompt, {"memory": m, "chunk_ids": chunk_ids, "query": target_query})


def _provenance(
    names: Sequence[str], g: KnowledgeGraph, evidence_chunks: dict[str, Chunk], sources: Sequence[str]
) -> dict[str, list[str]]:
    """Chunks of this step's evidence that support each named entity."""
    out = {}
    for name in names:
        node = g.nodes.get(normalize_name(name))
        if node is not None:
            ids = {c for c in evidence_chunks if c in node.chunk_ids}
        else:
            ids = set(sources) or {cid for cid, c in evidence_chunks.items() if name.casefold() in c.text.casefold()}
        out[name] = sorted(ids)
    return out
