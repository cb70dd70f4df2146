"""Command line: ``hypermem index|query|eval|inspect``.

Exit codes: 0 success, 1 user error (bad input, missing files), 2 provider
or environment failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, ProjectConfig, make_embedder, make_llm, parse_provider_flag
from .embedding import EmbeddingError, RetrievalUnavailable
from .eval import ManifestError, format_report, read_manifest, run_eval
from .graph import GraphFormatError
from .indexing import ExtractionFailed, IndexBuildError, build_index, open_index
from .memory import MemoryHypergraph, describe_memory
from .orchestrator import STRATEGIES, SessionError, run_session, run_stepwise
from .providers import FixtureMiss, ProviderError
from .retrieval import GraphIndex
from .traces import TraceFormatError, memory_snapshot, save_trace

log = logging.getLogger("hypermem")

USER_ERRORS = (ConfigError, ManifestError, IndexBuildError, TraceFormatError, GraphFormatError, FileNotFoundError)
ENV_ERRORS = (ProviderError, FixtureMiss, RetrievalUnavailable, EmbeddingError, ExtractionFailed, OSError)


def _config(args) -> ProjectConfig:
    cfg = ProjectConfig.load(args.config)
    s = cfg.session
    if getattr(args, "strategy", None):
        s.strategy = args.strategy
    if getattr(args, "max_steps", None) is not None:
        if args.max_steps < 1:
            raise ConfigError("--max-steps must be >= 1")
        s.max_steps = args.max_steps
    if getattr(args, "no_merge", False):
        s.enable_merge = False
    if getattr(args, "no_update", False):
        s.enable_update = False
    if getattr(args, "stepwise", False):
        s.forced_answer_every_step = True
    if getattr(args, "provider", None):
        cfg.llm = parse_provider_flag(args.provider)
        cfg.judge = None
    return cfg


def cmd_index(args) -> int:
    cfg = _config(args)
    corpus = Path(args.corpus) if args.corpus else cfg.corpus
    if corpus is None:
        raise ConfigError("no corpus given (pass --corpus or set paths.corpus)")
    out = Path(args.out) if args.out else cfg.index
    res = build_index(
        corpus, out, make_llm(cfg.llm), make_embedder(cfg.embedder), cfg.chunk_size, cfg.overlap, cfg.tokenizer, llm_id=cfg.llm
    )
    m = res.manifest
    if res.up_to_date:
        print(f"up-to-date: {out}")
    else:
        print(f"indexed {m['documents']} documents, {m['chunks']} chunks -> {m['nodes']} entities, {m['edges']} relations")
        for cid in m["skipped_chunks"]:
            print(f"  extraction failed for chunk {cid}", file=sys.stderr)
    return 0


def cmd_query(args) -> int:
    cfg = _config(args)
    index_dir = Path(args.index) if args.index else cfg.index
    g, manifest = open_index(index_dir)
    embedder = make_embedder(cfg.embedder)
    if manifest["embedder"].get("dim") not in (None, embedder.dim):
        raise ConfigError(f"index was embedded with dim {manifest['embedder']['dim']}, configured embedder has {embedder.dim}")
    index = GraphIndex(g, embedder)
    run = run_stepwise if cfg.session.forced_answer_every_step else run_session
    _, trace = run(args.text, g, cfg.session, make_llm(cfg.llm), index)
    out = Path(args.trace_dir) if args.trace_dir else cfg.traces / trace.session_id
    save_trace(trace, out, timing=not args.no_timing)
    (out / "project.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    print(trace.answer)
    print(f"trace: {out}", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    records = read_manifest(args.manifest)
    judge = make_llm(cfg.judge or cfg.llm)
    report = run_eval(records, judge)
    out = Path(args.report) if args.report else Path(args.manifest).with_suffix(".report.json")
    out.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    print(format_report(report))
    print(f"report: {out}", file=sys.stderr)
    return 0


def cmd_inspect(args) -> int:
    trace = Path(args.trace_dir)
    if not (trace / "memory").is_dir():
        raise TraceFormatError(f"{trace} has no memory snapshots")
    steps = sorted(int(p.stem.split("_")[1]) for p in (trace / "memory").glob("step_*.jsonl"))
    if args.step is not None and args.step not in steps:
        raise TraceFormatError(f"no snapshot for step {args.step}; available steps: {', '.join(map(str, steps)) or 'none'}")
    step = args.step if args.step is not None else (steps[-1] if steps else None)
    m = MemoryHypergraph.from_records(memory_snapshot(trace, step))
    print(f"step {step}" if step is not None else "empty trace")
    print(describe_memory(m))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hypermem", description="Hypergraph-memory retrieval over long documents.")
    p.add_argument("--config", help="project config (JSON)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def overrides(sp):
        sp.add_argument("--provider", help="LLM override: scripted:PATH or heuristic[:SEED]")

    sp = sub.add_parser("index", help="chunk, extract and embed a corpus")
    sp.add_argument("--corpus")
    sp.add_argument("--out")
    overrides(sp)
    sp.set_defaults(func=cmd_index)

    sp = sub.add_parser("query", help="answer one query and write its trace")
    sp.add_argument("text")
    sp.add_argument("--index")
    sp.add_argument("--trace-dir")
    sp.add_argument("--strategy", choices=STRATEGIES)
    sp.add_argument("--max-steps", type=int)
    sp.add_argument("--no-merge", action="store_true")
    sp.add_argument("--no-update", action="store_true")
    sp.add_argument("--stepwise", action="store_true", help="answer after every step")
    sp.add_argument("--no-timing", action="store_true", help="skip timing.jsonl")
    overrides(sp)
    sp.set_defaults(func=cmd_query)

    sp = sub.add_parser("eval", help="judge a results manifest")
    sp.add_argument("manifest")
    sp.add_argument("--report")
    overrides(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("inspect", help="print a memory snapshot from a trace")
    sp.add_argument("trace_dir")
    which = sp.add_mutually_exclusive_group()
    which.add_argument("--step", type=int)
    which.add_argument("--final", action="store_true")
    sp.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SessionError as exc:
        cause = exc.__cause__
        print(f"error: {exc}", file=sys.stderr)
        return 2 if isinstance(cause, ENV_ERRORS) else 1
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ENV_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
