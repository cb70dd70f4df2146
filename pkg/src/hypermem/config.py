"""Project configuration file and provider construction.

The config is a JSON file::

    {
      "paths": {"corpus": "docs/", "index": "index/", "traces": "traces/"},
      "chunking": {"chunk_size": 200, "overlap": 50, "tokenizer": "wordpunct"},
      "retrieval": {"n_v": 5, "n_e": 10, "n_d": 5},
      "session": {"max_steps": 6, "strategy": "adaptive", ...},
      "providers": {
        "llm": {"kind": "openai", "model": "gpt-4o", "base_url": "...", "api_key_env": "OPENAI_API_KEY"},
        "judge": {...},
        "embedder": {"kind": "hashing", "dim": 256}
      }
    }

Relative paths resolve against the config file's directory. API keys only
come from the environment.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import TokenizerSpec
from .embedding import Embedder, HashingEmbedder, OpenAIEmbedder, ScriptedEmbedder
from .orchestrator import SessionConfig
from .providers import ChatProvider, OpenAIChatLLM, ScriptedLLM
from .synthetic import HeuristicLLM


class ConfigError(ValueError):
    pass


_SECTIONS = {"paths", "chunking", "retrieval", "session", "providers"}


@dataclass
class ProjectConfig:
    corpus: Path | None = None
    index: Path = Path("index")
    traces: Path = Path("traces")
    chunk_size: int = 200
    overlap: int = 50
    tokenizer: TokenizerSpec = field(default_factory=TokenizerSpec)
    session: SessionConfig = field(default_factory=SessionConfig)
    llm: dict = field(default_factory=lambda: {"kind": "heuristic"})
    judge: dict | None = None
    embedder: dict = field(default_factory=lambda: {"kind": "hashing", "dim": 256})

    def __post_init__(self):
        if self.chunk_size < 1 or not 0 <= self.overlap < self.chunk_size:
            raise ConfigError(f"need chunk_size >= 1 and 0 <= overlap < chunk_size, got {self.chunk_size}/{self.overlap}")

    @classmethod
    def load(cls, path: str | Path | None) -> "ProjectConfig":
        if path is None:
            return cls()
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        return cls.from_dict(raw, path.parent)

    @classmethod
    def from_dict(cls, raw: dict, base: Path = Path(".")) -> "ProjectConfig":
        unknown = set(raw) - _SECTIONS
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        paths = raw.get("paths", {})
        chunking = raw.get("chunking", {})
        providers = raw.get("providers", {})

        def resolve(p):
            return None if p is None else (base / p if not Path(p).is_absolute() else Path(p))

        try:
            session = SessionConfig.from_dict({**raw.get("session", {}), **raw.get("retrieval", {})})
            cfg = cls(
                corpus=resolve(paths.get("corpus")),
                index=resolve(paths.get("index", "index")),
                traces=resolve(paths.get("traces", "traces")),
                chunk_size=int(chunking.get("chunk_size", 200)),
                overlap=int(chunking.get("overlap", 50)),
                tokenizer=TokenizerSpec.coerce(chunking.get("tokenizer")),
                session=session,
                llm=providers.get("llm", {"kind": "heuristic"}),
                judge=providers.get("judge"),
                embedder=providers.get("embedder", {"kind": "hashing", "dim": 256}),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return cfg

    def to_dict(self) -> dict:
        """Frozen copy embedded in traces; never contains secrets."""
        return {
            "paths": {"corpus": str(self.corpus) if self.corpus else None, "index": str(self.index), "traces": str(self.traces)},
            "chunking": {"chunk_size": self.chunk_size, "overlap": self.overlap, "tokenizer": self.tokenizer.to_dict()},
            "session": self.session.to_dict(),
            "providers": {"llm": self.llm, "judge": self.judge, "embedder": self.embedder},
        }


def parse_provider_flag(flag: str) -> dict:
    """``scripted:PATH``, ``heuristic`` or ``heuristic:SEED`` as a provider spec."""
    kind, _, arg = flag.partition(":")
    if kind == "scripted":
        if not arg:
            raise ConfigError("--provider scripted:PATH needs a fixture path")
        return {"kind": "scripted", "path": arg}
    if kind == "heuristic":
        return {"kind": "heuristic", "seed": int(arg or 0)}
    raise ConfigError(f"unknown provider {flag!r}; use scripted:PATH or heuristic[:SEED]")


def make_llm(spec: dict) -> ChatProvider:
    kind = spec.get("kind")
    if kind == "scripted":
        return ScriptedLLM.from_file(spec["path"])
    if kind == "heuristic":
        opts = {k: v for k, v in spec.items() if k != "kind"}
        return HeuristicLLM(**opts)
    if kind == "openai":
        return OpenAIChatLLM(
            spec["model"],
            base_url=spec.get("base_url"),
            api_key=os.getenv(spec.get("api_key_env", "OPENAI_API_KEY"), ""),
            max_retries=int(spec.get("max_retries", 3)),
        )
    raise ConfigError(f"unknown llm provider kind {kind!r}")


def make_embedder(spec: dict) -> Embedder:
    kind = spec.get("kind")
    if kind == "hashing":
        return HashingEmbedder(int(spec.get("dim", 256)))
    if kind == "scripted":
        fallback = make_embedder(spec["fallback"]) if spec.get("fallback") else None
        return ScriptedEmbedder.from_file(spec["path"], fallback)
    if kind == "openai":
        return OpenAIEmbedder(
            spec["model"],
            base_url=spec.get("base_url"),
            api_key=os.getenv(spec.get("api_key_env", "OPENAI_API_KEY"), ""),
            dim=spec.get("dim"),
        )
    raise ConfigError(f"unknown embedder kind {kind!r}")
