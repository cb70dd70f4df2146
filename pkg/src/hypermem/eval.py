"""Judging answers: binary accuracy, two-step 0-100 scoring, and memory statistics."""

from __future__ import annotations

import json
import logging
import math
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .assets import render_prompt, score_levels
from .gateway import LLMGateway
from .grammar import parse_choice
from .memory import MemoryHypergraph, avg_entities_per_hyperedge
from .providers import ChatProvider

log = logging.getLogger(__name__)

DIMENSIONS = ("comprehensiveness", "diversity")
QUERY_TYPES = ("primitive", "sense-making")


class ManifestError(ValueError):
    pass


@dataclass
class EvalRecord:
    query_id: str
    query: str
    prediction: str = ""
    reference: str | None = None
    query_type: str | None = None
    trace: str | None = None
    source: str | None = None

    def __post_init__(self):
        if self.query_type is not None and self.query_type not in QUERY_TYPES:
            raise ManifestError(f"{self.query_id}: query_type must be one of {QUERY_TYPES}, got {self.query_type!r}")

    @classmethod
    def from_record(cls, rec: dict, base: Path | None = None) -> "EvalRecord":
        try:
            r = cls(
                str(rec["id"]),
                rec["query"],
                rec.get("prediction", ""),
                rec.get("reference"),
                rec.get("query_type"),
                rec.get("trace"),
                rec.get("source"),
            )
        except KeyError as exc:
            raise ManifestError(f"manifest record missing {exc.args[0]!r}: {rec}") from None
        if r.trace and base is not None and not Path(r.trace).is_absolute():
            r.trace = str(base / r.trace)
        return r


@dataclass
class EvalResult:
    record: EvalRecord
    correct: bool | None = None
    scores: dict[str, int | None] = field(default_factory=dict)
    avg_nv: float | None = None
    error: str | None = None

    def to_record(self) -> dict:
        return {
            "id": self.record.query_id,
            "query_type": self.record.query_type,
            "correct": self.correct,
            "scores": dict(sorted(self.scores.items())),
            "avg_nv": self.avg_nv,
            "error": self.error,
        }


def _gateway(judge: ChatProvider | LLMGateway) -> LLMGateway:
    return judge if isinstance(judge, LLMGateway) else LLMGateway(judge, temperature=0.0)


def judge_accuracy(pred: str, reference: str, judge: ChatProvider | LLMGateway, query: str = "", step: int = 0) -> bool:
    """True when the judge says ``pred`` entails ``reference``.

    An unparseable verdict (twice) counts as FALSE and is logged in the
    gateway's ``parse_failures``.
    """
    if not pred.strip() or not reference.strip():
        raise ValueError("prediction and reference must both be non-empty")
    gw = _gateway(judge)
    prompt = render_prompt("judge_accuracy", query=query, reference=reference, prediction=pred)
    verdict = gw.ask_parsed(
        "judge_accuracy",
        prompt,
        lambda text: parse_choice(text, "VERDICT", ("TRUE", "FALSE")),
        {"prediction": pred, "reference": reference, "query": query},
        step=step,
    )
    return verdict == "TRUE"


def _levels_text(levels: list[dict]) -> str:
    return "\n".join(f"Level {lv['level']} ({lv['low']}-{lv['high']}): {lv['text']}" for lv in levels)


def parse_level_score(text: str, levels: Sequence[dict]) -> int | None:
    """Score from a ``LEVEL:``/``SCORE:`` reply, or None if malformed or outside the level's range."""
    level = re.search(r"^\s*LEVEL\s*:\s*(\d+)\s*$", text, re.I | re.M)
    score = re.search(r"^\s*SCORE\s*:\s*(-?\d+)\s*$", text, re.I | re.M)
    if not level or not score:
        return None
    spec = next((lv for lv in levels if lv["level"] == int(level.group(1))), None)
    value = int(score.group(1))
    if spec is None or not spec["low"] <= value <= spec["high"]:
        return None
    return value


def score_generative(
    pred: str,
    query: str,
    source: str,
    dimension: str,
    judge: ChatProvider | LLMGateway,
    step: int = 0,
) -> int | None:
    """Level-then-score grade in [0, 100]; None when the judge fails twice (unscored)."""
    table = score_levels()
    if dimension not in table:
        raise ValueError(f"unknown dimension {dimension!r}; have {sorted(table)}")
    spec = table[dimension]
    prompt = render_prompt(
        "score_generative",
        dimension=dimension,
        definition=spec["definition"],
        query=query,
        source=source,
        prediction=pred,
        levels=_levels_text(spec["levels"]),
    )
    return _gateway(judge).ask_parsed(
        f"score_{dimension}",
        prompt,
        lambda text: parse_level_score(text, spec["levels"]),
        {"prediction": pred, "query": query, "source": source, "dimension": dimension, "levels": spec["levels"]},
        step=step,
    )


def _mean(values: Iterable[float]) -> float | None:
    values = list(values)
    # fsum is correctly rounded, so the mean does not depend on input order
    return math.fsum(values) / len(values) if values else None


def memory_stats(results: Iterable[EvalResult], group_by: str = "query_type") -> list[dict]:
    """Per-group mean Avg-N_v and accuracy. Input order does not matter."""
    groups: dict[str, list[EvalResult]] = defaultdict(list)
    for r in results:
        key = getattr(r.record, group_by) if group_by else None
        groups["all" if key is None else str(key)].append(r)
    rows = []
    for key in sorted(groups):
        members = groups[key]
        nv = [r.avg_nv for r in members if r.avg_nv is not None]
        judged = [r.correct for r in members if r.correct is not None]
        rows.append(
            {
                "group": key,
                "n": len(members),
                "avg_nv": _mean(nv),
                "accuracy": _mean(1.0 if c else 0.0 for c in judged),
                "judged": len(judged),
            }
        )
    return rows


def read_manifest(path: str | Path) -> list[EvalRecord]:
    path = Path(path)
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
            out.append(EvalRecord.from_record(rec, path.parent))
    return out


def _final_memory(trace_dir: str) -> MemoryHypergraph:
    from .traces import memory_snapshot

    return MemoryHypergraph.from_records(memory_snapshot(trace_dir))


def evaluate_record(rec: EvalRecord, judge: ChatProvider | LLMGateway, step: int, dimensions: Sequence[str] = DIMENSIONS) -> EvalResult:
    res = EvalResult(rec)
    if rec.trace:
        trace = Path(rec.trace)
        if not (trace / "config.json").exists():
            res.error = f"trace {trace} not found"
            return res
        if not rec.prediction:
            rec.prediction = (trace / "answer.txt").read_text(encoding="utf-8").rstrip("\n")
        m = _final_memory(str(trace))
        res.avg_nv = avg_entities_per_hyperedge(m) if m.points else None
    if not rec.prediction.strip():
        res.error = "empty prediction"
        return res
    if rec.reference:
        res.correct = judge_accuracy(rec.prediction, rec.reference, judge, rec.query, step)
    if rec.source:
        for dim in dimensions:
            res.scores[dim] = score_generative(rec.prediction, rec.query, rec.source, dim, judge, step)
    return res


def run_eval(records: Sequence[EvalRecord], judge: ChatProvider | LLMGateway, dimensions: Sequence[str] = DIMENSIONS) -> dict:
    """Judge every record; record ``k`` uses fixture step ``k`` for a scripted judge."""
    gw = _gateway(judge)
    results = [evaluate_record(rec, gw, k, dimensions) for k, rec in enumerate(records)]
    ok = [r for r in results if r.error is None]
    judged = [r.correct for r in ok if r.correct is not None]
    overall = {
        "records": len(results),
        "errors": len(results) - len(ok),
        "accuracy": _mean(1.0 if c else 0.0 for c in judged),
        "judged": len(judged),
        "judge_parse_failures": len(gw.parse_failures),
    }
    exclusions = {}
    for dim in dimensions:
        attempted = [r.scores[dim] for r in ok if dim in r.scores]
        scored = [s for s in attempted if s is not None]
        overall[f"mean_{dim}"] = _mean(scored)
        exclusions[dim] = len(attempted) - len(scored)
    return {
        "overall": overall,
        "exclusions": exclusions,
        "groups": memory_stats(ok),
        "records": [r.to_record() for r in results],
    }


def format_report(report: dict) -> str:
    o = report["overall"]

    def fmt(x, spec=".4f"):
        return "n/a" if x is None else format(x, spec)

    lines = [f"records: {o['records']} (errors: {o['errors']})", f"accuracy: {fmt(o['accuracy'])} over {o['judged']} judged"]
    for dim, n in report["exclusions"].items():
        lines.append(f"{dim}: mean {fmt(o[f'mean_{dim}'], '.2f')}, unscored {n}")
    for row in report["groups"]:
        lines.append(f"  [{row['group']}] n={row['n']} avg_nv={fmt(row['avg_nv'], '.2f')} accuracy={fmt(row['accuracy'])}")
    for r in report["records"]:
        if r["error"]:
            lines.append(f"  ! {r['id']}: {r['error']}")
    return "\n".join(lines)
