"""On-disk session traces.

A trace directory holds::

    config.json          session settings, query and session id
    steps.jsonl          one record per evolution step (no memory snapshot)
    memory/step_NNN.jsonl  memory snapshot after step NNN
    deltas/step_NNN.jsonl  the step's delta and its application report
    exchanges.jsonl      every LLM exchange, in call order
    answer.txt           final answer
    answers.jsonl        per-step answers (stepwise runs only)
    summary.json         termination reason, counts, token totals
    timing.jsonl         wall-clock latencies

Everything except ``timing.jsonl`` is byte-identical across reruns with the
same inputs.
"""

from __future__ import annotations

import json
from pathlib import Path

from .orchestrator import SessionTrace, StepRecord
from .providers import Exchange


class TraceFormatError(ValueError):
    pass


def _dumps(rec) -> str:
    return json.dumps(rec, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def _write_jsonl(path: Path, records) -> None:
    path.write_text("".join(_dumps(r) + "\n" for r in records), encoding="utf-8")


def _read_jsonl(path: Path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise TraceFormatError(f"{path}:{lineno}: {exc}") from None
    return out


def save_trace(trace: SessionTrace, path: str | Path, timing: bool = True) -> Path:
    path = Path(path)
    (path / "memory").mkdir(parents=True, exist_ok=True)
    (path / "deltas").mkdir(exist_ok=True)
    cfg = {"session_id": trace.session_id, "query": trace.query, "config": trace.config}
    (path / "config.json").write_text(json.dumps(cfg, sort_keys=True, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    _write_jsonl(path / "steps.jsonl", (s.summary_record() for s in trace.steps))
    for s in trace.steps:
        _write_jsonl(path / "memory" / f"step_{s.step:03d}.jsonl", s.memory)
        delta = [{"kind": "delta", **s.delta}] + [{"kind": "report", **item} for item in s.report]
        _write_jsonl(path / "deltas" / f"step_{s.step:03d}.jsonl", delta)
    _write_jsonl(path / "exchanges.jsonl", (e.to_record() for e in trace.exchanges))
    (path / "answer.txt").write_text((trace.answer or "") + "\n", encoding="utf-8")
    if trace.answers:
        _write_jsonl(path / "answers.jsonl", ({"step": s.step, "answer": s.answer} for s in trace.steps if s.answer is not None))
    (path / "summary.json").write_text(json.dumps(trace.summary(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    if timing:
        rows = [{"step": s.step, "latency_s": round(s.latency_s, 6)} for s in trace.steps]
        rows += [{"tag": e.tag, "step": e.step, "latency_s": round(e.latency_s, 6)} for e in trace.exchanges]
        _write_jsonl(path / "timing.jsonl", rows)
    return path


def load_trace(path: str | Path) -> SessionTrace:
    path = Path(path)
    try:
        cfg = json.loads((path / "config.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise TraceFormatError(f"{path} is not a trace directory (no config.json)") from None
    summary = json.loads((path / "summary.json").read_text(encoding="utf-8"))
    trace = SessionTrace(cfg["query"], cfg["config"], termination=summary.get("termination"))
    trace.answer_chunks = list(summary.get("answer_chunks", []))
    for rec in _read_jsonl(path / "steps.jsonl"):
        t = rec["step"]
        mem_file = path / "memory" / f"step_{t:03d}.jsonl"
        if not mem_file.exists():
            raise TraceFormatError(f"missing memory snapshot {mem_file}")
        trace.steps.append(
            StepRecord(
                step=t,
                sufficient=rec["sufficient"],
                concerns=rec["concerns"],
                subqueries=rec["subqueries"],
                retrieval=rec["retrieval"],
                delta=rec["delta"],
                report=rec["report"],
                memory=_read_jsonl(mem_file),
                tokens=rec["tokens"],
                answer=rec.get("answer"),
            )
        )
    trace.exchanges = [Exchange.from_record(r) for r in _read_jsonl(path / "exchanges.jsonl")]
    answer = (path / "answer.txt").read_text(encoding="utf-8")
    trace.answer = answer[:-1] if answer.endswith("\n") else answer
    return trace


def memory_snapshot(path: str | Path, step: int | None = None) -> list[dict]:
    """Memory records after ``step`` (default: the last recorded step)."""
    path = Path(path)
    files = sorted((path / "memory").glob("step_*.jsonl"))
    if not files:
        return []
    if step is None:
        return _read_jsonl(files[-1])
    f = path / "memory" / f"step_{step:03d}.jsonl"
    if not f.exists():
        raise TraceFormatError(f"no memory snapshot for step {step} (have {len(files)} steps)")
    return _read_jsonl(f)
