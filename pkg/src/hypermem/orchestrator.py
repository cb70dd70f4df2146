"""The multi-step session loop.

Step 0 retrieves with the target query itself as a global subquery and
evolves memory from that seed evidence. Every later step asks whether memory
is sufficient; if not, it raises concerns, turns them into subqueries,
retrieves evidence per subquery, and evolves memory again. The loop ends when
memory is judged sufficient or after ``max_steps`` evolution steps, and the
answer is produced from the final memory.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Any

import numpy as np

from .embedding import cosine_similarity, embed
from .gateway import Concern, LLMGateway
from .graph import KnowledgeGraph
from .memory import MemoryDelta, MemoryHypergraph, apply_delta, live_descendant
from .providers import DEFAULT_MAX_OUTPUT_TOKENS, DEFAULT_TEMPERATURE, ChatProvider, Exchange
from .retrieval import (
    GLOBAL,
    LOCAL,
    GraphIndex,
    Subquery,
    exploration_scope,
    gather_evidence,
    local_neighborhood,
    retrieve_entities,
)

log = logging.getLogger(__name__)

STRATEGIES = ("adaptive", "global-only", "local-only")


class ReplayDivergence(RuntimeError):
    def __init__(self, step: int, detail: str = ""):
        super().__init__(f"replay diverged from the recorded memory at step {step}" + (f": {detail}" if detail else ""))
        self.step = step


class SessionError(RuntimeError):
    """A provider failure aborted the session; ``trace`` holds the steps completed so far."""

    def __init__(self, message: str, trace: "SessionTrace"):
        super().__init__(message)
        self.trace = trace


@dataclass
class SessionConfig:
    max_steps: int = 6
    max_subqueries: int = 3
    n_v: int = 5
    n_e: int = 10
    n_d: int = 5
    strategy: str = "adaptive"
    enable_update: bool = True
    enable_merge: bool = True
    chunk_budget: int = 20
    forced_answer_every_step: bool = False
    keep_merge_parents: bool = False
    local_fallback: bool = True
    temperature: float = DEFAULT_TEMPERATURE
    max_output_tokens: int = DEFAULT_MAX_OUTPUT_TOKENS

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        for name in ("max_subqueries", "n_v"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("n_e", "n_d", "chunk_budget"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SessionConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown session settings: {sorted(unknown)}")
        return cls(**d)


@dataclass
class StepRecord:
    step: int
    sufficient: bool | None = None
    concerns: list[dict] = field(default_factory=list)
    subqueries: list[dict] = field(default_factory=list)
    retrieval: list[dict] = field(default_factory=list)
    delta: dict = field(default_factory=lambda: MemoryDelta().to_record())
    report: list[dict] = field(default_factory=list)
    memory: list[dict] = field(default_factory=list)
    tokens: dict = field(default_factory=lambda: {"prompt": 0, "completion": 0})
    answer: str | None = None
    latency_s: float = field(default=0.0, compare=False)

    @property
    def seed(self) -> bool:
        return any(s.get("seed") for s in self.subqueries)

    def summary_record(self) -> dict:
        """Everything except the memory snapshot and wall-clock timing."""
        return {
            "step": self.step,
            "sufficient": self.sufficient,
            "concerns": self.concerns,
            "subqueries": self.subqueries,
            "retrieval": self.retrieval,
            "delta": self.delta,
            "report": self.report,
            "tokens": self.tokens,
            "answer": self.answer,
        }

    def count(self, op: str) -> int:
        return sum(1 for i in self.report if i["op"] == op and i["status"] == "applied")


@dataclass
class SessionTrace:
    query: str
    config: dict
    steps: list[StepRecord] = field(default_factory=list)
    answer: str | None = None
    termination: str | None = None
    exchanges: list[Exchange] = field(default_factory=list)
    answer_chunks: list[str] = field(default_factory=list)

    @property
    def session_id(self) -> str:
        return session_id(self.query, self.config)

    @property
    def answers(self) -> list[str]:
        return [s.answer for s in self.steps if s.answer is not None]

    def final_memory(self) -> MemoryHypergraph:
        if not self.steps:
            return MemoryHypergraph(keep_merge_parents=self.config.get("keep_merge_parents", False))
        return MemoryHypergraph.from_records(self.steps[-1].memory)

    def tokens(self) -> dict:
        return {
            "prompt": sum(e.prompt_tokens for e in self.exchanges),
            "completion": sum(e.completion_tokens for e in self.exchanges),
        }

    def summary(self) -> dict:
        final = self.final_memory()
        return {
            "session_id": self.session_id,
            "query": self.query,
            "termination": self.termination,
            "evolution_steps": len(self.steps),
            "live_points": len(final.points),
            "vertices": len(final.vertices),
            "avg_entities_per_point": round(sum(len(p.vertex_ids) for p in final.points.values()) / len(final.points), 6)
            if final.points
            else 0.0,
            "tokens": self.tokens(),
            "answer_chunks": self.answer_chunks,
        }


def session_id(query: str, config: dict) -> str:
    blob = json.dumps({"query": query, "config": config}, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _anchor_by_similarity(text: str, m: MemoryHypergraph, index: GraphIndex) -> str:
    """Live point whose description is closest to ``text`` (ties: smaller id)."""
    qv = index.query_vector(text)
    best, best_score = None, -2.0
    points = sorted(m.points)
    vecs = embed([m.points[p].description for p in points], index.embedder)
    for pid, vec in zip(points, vecs):
        score = cosine_similarity(qv, vec) if np.any(vec) else -1.0
        if score > best_score:
            best, best_score = pid, score
    return best


def enforce_strategy(subqueries: list[Subquery], m: MemoryHypergraph, strategy: str, index: GraphIndex) -> list[Subquery]:
    if strategy == "adaptive":
        return subqueries
    out = []
    for q in subqueries:
        if strategy == "global-only":
            out.append(Subquery(q.text, GLOBAL, None, q.origin_step))
        elif q.mode == LOCAL:
            out.append(q)
        elif m.points:
            out.append(Subquery(q.text, LOCAL, _anchor_by_similarity(q.text, m, index), q.origin_step))
        else:
            # nothing to anchor on yet: same situation as the step-0 seed
            out.append(Subquery(q.text, GLOBAL, None, q.origin_step, seed=True))
    return out


def retrieve_for(q: Subquery, m: MemoryHypergraph, g: KnowledgeGraph, config: SessionConfig, index: GraphIndex):
    """Run one subquery's retrieval. Returns (entity ids, trace record)."""
    rec: dict[str, Any] = {"subquery": q.to_record(), "route": q.mode}
    if q.mode == LOCAL:
        anchor = q.anchor_point
        if anchor not in m.points:
            anchor = live_descendant(m, anchor)
            rec["remapped_anchor"] = anchor
        if anchor is None:
            log.warning("stale anchor %s with no live descendant; exploring globally", q.anchor_point)
            rec["route"] = "stale-anchor-global"
        else:
            scope = local_neighborhood(m, g, anchor)
            rec["scope_size"] = len(scope)
            if scope or not config.local_fallback or config.strategy == "local-only":
                if not scope:
                    log.info("empty neighbourhood for anchor %s", anchor)
                return retrieve_entities([q.text], scope, config.n_v, index), rec
            log.info("empty neighbourhood for anchor %s; falling back to global exploration", anchor)
            rec["route"] = "global-fallback"
    scope = exploration_scope(m, g)
    rec["scope_size"] = len(scope)
    return retrieve_entities([q.text], scope, config.n_v, index), rec


def _run(target_query: str, g: KnowledgeGraph, config: SessionConfig, llm: ChatProvider, index: GraphIndex, stepwise: bool):
    if hasattr(llm, "reset"):
        llm.reset()
    m = MemoryHypergraph(keep_merge_parents=config.keep_merge_parents)
    gw = LLMGateway(llm, temperature=config.temperature, max_output_tokens=config.max_output_tokens)
    trace = SessionTrace(target_query, config.to_dict(), exchanges=gw.exchanges)
    t = 0
    try:
        while True:
            gw.step = t
            t0 = time.perf_counter()
            n_ex = len(gw.exchanges)
            rec = StepRecord(t)
            if t == 0:
                subqueries = [Subquery(target_query, GLOBAL, None, 0, seed=True)]
            else:
                if t >= config.max_steps:
                    trace.termination = "step-cap"
                    break
                rec.sufficient = gw.judge_sufficiency(m, target_query)
                if rec.sufficient and not stepwise:
                    trace.termination = "sufficient"
                    break
                concerns = gw.raise_concerns(m, target_query) or [Concern(target_query)]
                rec.concerns = [c.to_record() for c in concerns]
                subqueries = gw.generate_subqueries(concerns, m, target_query, config.max_subqueries)
                subqueries = enforce_strategy(subqueries, m, config.strategy, index)
            rec.subqueries = [q.to_record() for q in subqueries]

            evidence = []
            for q in subqueries:
                entity_ids, rrec = retrieve_for(q, m, g, config, index)
                ev = gather_evidence(entity_ids, g, q.text, config.n_e, config.n_d, index, q)
                rrec.update(ev.ids())
                rec.retrieval.append(rrec)
                evidence.append(ev)

            delta = gw.propose_memory_delta(m, g, evidence, target_query, config.enable_update, config.enable_merge)
            if not config.enable_update:
                delta.updates = []
            if not config.enable_merge:
                delta.merges = []
            report = apply_delta(m, g, delta, t, embedder=index.embedder)
            if report.forced_entities:
                index.sync()
            rec.delta = delta.to_record()
            rec.report = report.to_record()
            rec.memory = m.to_records()
            if stepwise:
                rec.answer = gw.generate_response(m, g, target_query, config.chunk_budget, index)
            new = gw.exchanges[n_ex:]
            rec.tokens = {"prompt": sum(e.prompt_tokens for e in new), "completion": sum(e.completion_tokens for e in new)}
            rec.latency_s = time.perf_counter() - t0
            trace.steps.append(rec)
            t += 1
        if stepwise:
            trace.answer = trace.steps[-1].answer
        else:
            trace.answer_chunks = gw.response_chunks(m, g, target_query, config.chunk_budget, index)
            trace.answer = gw.generate_response(m, g, target_query, config.chunk_budget, index)
    except Exception as exc:
        if trace.termination is None:
            trace.termination = "error"
        raise SessionError(f"session aborted at step {t}: {exc}", trace) from exc
    return trace


def run_session(
    target_query: str, g: KnowledgeGraph, config: SessionConfig, llm: ChatProvider, index: GraphIndex
) -> tuple[str, SessionTrace]:
    """Answer ``target_query``; ``g`` may gain force-inserted entities."""
    trace = _run(target_query, g, config, llm, index, stepwise=config.forced_answer_every_step)
    return trace.answer, trace


def run_stepwise(
    target_query: str, g: KnowledgeGraph, config: SessionConfig, llm: ChatProvider, index: GraphIndex
) -> tuple[list[str], SessionTrace]:
    """Answer after every one of ``max_steps`` evolution steps, ignoring early sufficiency."""
    trace = _run(target_query, g, config, llm, index, stepwise=True)
    return trace.answers, trace


def replay_trace(trace: SessionTrace, g: KnowledgeGraph) -> MemoryHypergraph:
    """Rebuild memory from the recorded deltas and check it against every snapshot.

    Works on a copy of ``g``; the caller's graph is not modified.
    """
    g = g.copy()
    m = MemoryHypergraph(keep_merge_parents=trace.config.get("keep_merge_parents", False))
    for rec in trace.steps:
        apply_delta(m, g, MemoryDelta.from_record(rec.delta), rec.step)
        got = m.to_records()
        if got != rec.memory:
            diff = next((f"{a} != {b}" for a, b in zip(got, rec.memory) if a != b), "record counts differ")
            raise ReplayDivergence(rec.step, diff[:200])
    return m
