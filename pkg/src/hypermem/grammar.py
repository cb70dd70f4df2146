"""Line-oriented tagged blocks used for every structured LLM reply.

A reply is a sequence of blocks::

    [INSERT]
    ENTITIES: Xodar | Issus
    DESCRIPTION: Issus punishes Xodar.
    [END]

Text outside blocks is ignored, unknown block kinds are skipped, and a
broken block only loses itself, so one malformed proposal never costs the
rest of the turn.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

LIST_SEP = " | "

_HEADER = re.compile(r"^\s*\[([A-Z_]+)\]\s*$")
_FIELD = re.compile(r"^\s*([A-Z_]+)\s*:\s?(.*)$")


@dataclass
class Block:
    kind: str
    fields: dict[str, str] = field(default_factory=dict)

    def get(self, key: str, default: str | None = None) -> str | None:
        return self.fields.get(key, default)

    def get_list(self, key: str) -> list[str]:
        raw = self.fields.get(key, "")
        return [p.strip() for p in raw.split("|") if p.strip()]


def clean(value: str) -> str:
    """Collapse whitespace so a value fits on one line."""
    return " ".join(str(value).split())


def render_blocks(blocks: list[Block]) -> str:
    out = []
    for b in blocks:
        out.append(f"[{b.kind}]")
        for k, v in b.fields.items():
            out.append(f"{k}: {clean(v)}")
        out.append("[END]")
    return "\n".join(out)


def parse_blocks(text: str, schema: dict[str, tuple[str, ...]]) -> tuple[list[Block], list[str]]:
    """Parse the blocks whose kind is in ``schema``.

    ``schema`` maps a block kind to its field names; lines that are not a
    known field continue the previous field. Returns the blocks and a list of
    problems found along the way (for logging, not for control flow).
    """
    blocks: list[Block] = []
    problems: list[str] = []
    current: Block | None = None
    last_key: str | None = None

    def close():
        nonlocal current
        if current is not None:
            blocks.append(current)
        current = None

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        # markdown decoration: fences, **[HEADER]**, **FIELD:** value
        bare = line.strip("*`").strip()
        if not bare:
            continue
        m = _HEADER.match(bare)
        if m:
            kind = m.group(1)
            if kind == "END":
                if current is None:
                    problems.append(f"line {lineno}: [END] without open block")
                close()
            else:
                if current is not None:
                    problems.append(f"line {lineno}: block [{current.kind}] not terminated")
                    close()
                if kind in schema:
                    current = Block(kind)
                    last_key = None
                else:
                    problems.append(f"line {lineno}: unknown block kind [{kind}]")
            continue
        if current is None:
            continue
        fm = _FIELD.match(line.lstrip("*`"))
        if fm and fm.group(1) in schema[current.kind]:
            last_key = fm.group(1)
            current.fields[last_key] = clean(fm.group(2).lstrip("*"))
        elif last_key is not None:
            current.fields[last_key] = clean(current.fields[last_key] + " " + line)
        else:
            problems.append(f"line {lineno}: stray text in [{current.kind}]")
    if current is not None:
        problems.append(f"block [{current.kind}] not terminated at end of reply")
        close()
    return blocks, problems


def parse_choice(text: str, key: str, choices: tuple[str, ...]) -> str | None:
    """Find a single-word verdict such as ``YES``/``NO``.

    Accepts either a reply consisting of just the word or a ``KEY: WORD``
    line. Anything else (including conflicting verdicts) is unparseable.
    """
    found = set()
    stripped = text.strip().strip(".*` ").upper()
    if stripped in choices:
        return stripped
    for raw in text.splitlines():
        m = _FIELD.match(raw.strip().strip("*`"))
        if m and m.group(1) == key:
            word = m.group(2).strip().strip(".*` ").upper()
            if word in choices:
                found.add(word)
            else:
                return None
    return found.pop() if len(found) == 1 else None
