"""Access to the packaged prompt templates."""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources
from string import Template


@lru_cache(maxsize=None)
def _read(name: str) -> str:
    return resources.files("hypermem").joinpath("prompts", name).read_text(encoding="utf-8")


def render_prompt(name: str, /, **values) -> str:
    return Template(_read(f"{name}.txt")).substitute({k: str(v) for k, v in values.items()})


def score_levels() -> dict:
    return json.loads(_read("levels.json"))
