"""Chat providers: OpenAI-compatible HTTP client and a fixture-replay stand-in.

Every call goes through :func:`chat`, which records the exchange (with
token counts) in an :class:`ExchangeLog` so sessions can be audited.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol

from .corpus import count_tokens

log = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.8
DEFAULT_MAX_OUTPUT_TOKENS = 2048


class ProviderError(RuntimeError):
    """Transport failure that survived all retries."""


class FixtureMiss(LookupError):
    def __init__(self, tag: str, step: int, seq: int):
        super().__init__(f"no scripted response for tag={tag!r} step={step} seq={seq}")
        self.tag, self.step, self.seq = tag, step, seq


@dataclass
class ChatRequest:
    messages: list[tuple[str, str]]
    tag: str
    temperature: float = DEFAULT_TEMPERATURE
    max_output_tokens: int = DEFAULT_MAX_OUTPUT_TOKENS
    step: int = 0
    # structured inputs behind the prompt; never sent over the wire
    context: dict[str, Any] | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")

    @property
    def prompt(self) -> str:
        return "\n\n".join(content for _, content in self.messages)


@dataclass
class Completion:
    text: str
    prompt_tokens: int
    completion_tokens: int


class ChatProvider(Protocol):
    def complete(self, request: ChatRequest) -> Completion: ...


class ScriptedLLM:
    """Replays fixture responses keyed by ``(tag, step, seq)``.

    ``seq`` counts calls with the same tag within the same step, starting at 0.
    A record may use ``"step": "*"`` to match any step and may omit ``seq``
    to match any call. Exact keys win over wildcards.
    """

    def __init__(self, records: list[dict]):
        self._table: dict[tuple[str, Any, Any], str] = {}
        for rec in records:
            step, seq = rec.get("step", "*"), rec.get("seq")
            key = (rec["tag"], step if step == "*" else int(step), None if seq is None else int(seq))
            self._table[key] = rec["response"]
        self._counters: dict[tuple[str, int], int] = {}

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedLLM":
        records = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    records.append(json.loads(line))
        return cls(records)

    def reset(self) -> None:
        self._counters.clear()

    def lookup(self, tag: str, step: int, seq: int) -> str:
        for key in ((tag, step, seq), (tag, step, None), (tag, "*", seq), (tag, "*", None)):
            if key in self._table:
                return self._table[key]
        raise FixtureMiss(tag, step, seq)

    def complete(self, request: ChatRequest) -> Completion:
        key = (request.tag, request.step)
        seq = self._counters.get(key, 0)
        self._counters[key] = seq + 1
        text = self.lookup(request.tag, request.step, seq)
        return Completion(text, count_tokens(request.prompt), count_tokens(text))


class OpenAIChatLLM:
    """Client for an OpenAI-compatible ``/chat/completions`` endpoint."""

    def __init__(
        self,
        model: str,
        base_url: str | None = None,
        api_key: str | None = None,
        max_retries: int = 3,
        backoff: float = 1.0,
        timeout: float = 120.0,
        transport=None,
    ):
        import httpx

        self.model = model
        self.base_url = (base_url or os.getenv("OPENAI_BASE_URL") or "https://api.openai.com/v1").rstrip("/")
        key = api_key if api_key is not None else os.getenv("OPENAI_API_KEY", "")
        self.max_retries = max_retries
        self.backoff = backoff
        self._client = httpx.Client(
            timeout=timeout,
            transport=transport,
            headers={"Authorization": f"Bearer {key}"} if key else {},
        )

    def complete(self, request: ChatRequest) -> Completion:
        import httpx

        payload = {
            "model": self.model,
            "messages": [{"role": r, "content": c} for r, c in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        last = None
        for attempt in range(self.max_retries + 1):
            try:
                resp = self._client.post(f"{self.base_url}/chat/completions", json=payload)
                if resp.status_code == 429 or resp.status_code >= 500:
                    raise httpx.HTTPStatusError(f"status {resp.status_code}", request=resp.request, response=resp)
                if resp.status_code >= 400:
                    raise ProviderError(f"chat provider rejected the request: {resp.status_code} {resp.text[:200]}")
                body = resp.json()
                text = body["choices"][0]["message"]["content"] or ""
                usage = body.get("usage") or {}
                return Completion(
                    text,
                    int(usage.get("prompt_tokens", count_tokens(request.prompt))),
                    int(usage.get("completion_tokens", count_tokens(text))),
                )
            except (httpx.TransportError, httpx.HTTPStatusError) as exc:
                last = exc
                log.warning("chat attempt %d/%d failed: %s", attempt + 1, self.max_retries + 1, exc)
                if attempt < self.max_retries:
                    time.sleep(self.backoff * 2**attempt)
        raise ProviderError(f"chat provider failed after {self.max_retries + 1} attempts: {last}")


@dataclass
class Exchange:
    tag: str
    step: int
    messages: list[tuple[str, str]]
    response: str
    prompt_tokens: int
    completion_tokens: int
    latency_s: float = field(default=0.0, compare=False)

    def to_record(self) -> dict:
        return {
            "tag": self.tag,
            "step": self.step,
            "messages": [{"role": r, "content": c} for r, c in self.messages],
            "response": self.response,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Exchange":
        return cls(
            tag=rec["tag"],
            step=int(rec["step"]),
            messages=[(m["role"], m["content"]) for m in rec["messages"]],
            response=rec["response"],
            prompt_tokens=int(rec["prompt_tokens"]),
            completion_tokens=int(rec["completion_tokens"]),
        )


class ExchangeLog(list):
    """Ordered record of every request/response pair in a session."""

    def tokens(self) -> tuple[int, int]:
        return sum(e.prompt_tokens for e in self), sum(e.completion_tokens for e in self)

    def latency(self) -> float:
        return sum(e.latency_s for e in self)


def chat(request: ChatRequest, provider: ChatProvider, exchanges: ExchangeLog | None = None) -> str:
    t0 = time.perf_counter()
    result = provider.complete(request)
    if exchanges is not None:
        exchanges.append(
            Exchange(
                request.tag,
                request.step,
                list(request.messages),
                result.text,
                result.prompt_tokens,
                result.completion_tokens,
                time.perf_counter() - t0,
            )
        )
    return result.text
