"""Deterministic log condensation.

A condensed log keeps the first ``head_chars`` characters (command echo and
initial progress), every line that matches a curated failure-pattern catalog,
and the last ``tail_chars`` characters (exit status and summary).  This
replaces model-based summarization with a pure, auditable function.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

DEFAULT_HEAD_CHARS = 2000
DEFAULT_TAIL_CHARS = 2000
DEFAULT_MAX_PATTERN_LINES = 50

_TRUNCATION_MARK = "...[truncated]..."


@dataclass(frozen=True)
class Pattern:
    id: str
    regex: re.Pattern[str]
    category: str


@dataclass(frozen=True)
class CondenserConfig:
    """Immutable condensation parameters; safe to share across threads."""

    patterns: tuple[Pattern, ...]
    head_chars: int = DEFAULT_HEAD_CHARS
    tail_chars: int = DEFAULT_TAIL_CHARS
    max_pattern_lines: int = DEFAULT_MAX_PATTERN_LINES
    version: int = 0
    # combined alternation used as a fast pre-filter per line
    _any: re.Pattern[str] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.head_chars <= 0 or self.tail_chars <= 0:
            raise ValueError("head_chars and tail_chars must be positive")
        if self.max_pattern_lines <= 0:
            raise ValueError("max_pattern_lines must be positive")
        ids = [p.id for p in self.patterns]
        if len(ids) != len(set(ids)):
            raise ValueError("pattern ids must be unique")
        combined = "|".join(f"(?:{p.regex.pattern})" for p in self.patterns) or r"(?!x)x"
        object.__setattr__(self, "_any", re.compile(combined))

    def categories(self) -> set[str]:
        return {p.category for p in self.patterns}


@dataclass(frozen=True)
class MatchedLine:
    line_number: int  # 1-based position in the raw input
    pattern_id: str
    text: str


@dataclass(frozen=True)
class CondensedLog:
    head: str
    matched_lines: tuple[MatchedLine, ...]
    tail: str
    truncated: bool
    omitted_matches: int = 0
    total_lines: int = 0


def load_catalog(path: str | None = None) -> tuple[int, tuple[Pattern, ...]]:
    """Load the (versioned) pattern catalog; the package ships a default."""
    if path is None:
        raw = resources.files("tooldriver.data").joinpath("failure_patterns.json").read_text()
    else:
        with open(path, encoding="utf-8") as handle:
            raw = handle.read()
    doc = json.loads(raw)
    patterns = tuple(
        Pattern(id=entry["id"], regex=re.compile(entry["regex"]), category=entry["category"])
        for entry in doc["patterns"]
    )
    return int(doc.get("version", 0)), patterns


@lru_cache(maxsize=1)
def default_config() -> CondenserConfig:
    version, patterns = load_catalog()
    return CondenserConfig(patterns=patterns, version=version)


def condense(raw: str, config: CondenserConfig | None = None) -> CondensedLog:
    """Pure function of ``(raw, config)``.

    ``truncated`` is False iff head and tail jointly cover the whole input;
    in that case they partition it without overlap.  Matched lines are kept
    verbatim, earliest first, capped at ``max_pattern_lines`` with the
    overflow count recorded in ``omitted_matches``.
    """
    config = config or default_config()
    size = len(raw)
    if size <= config.head_chars:
        head, tail = raw, ""
    elif size <= config.head_chars + config.tail_chars:
        head, tail = raw[: config.head_chars], raw[config.head_chars :]
    else:
        head, tail = raw[: config.head_chars], raw[-config.tail_chars :]
    truncated = size > config.head_chars + config.tail_chars

    lines = raw.split("\n")
    matches: list[MatchedLine] = []
    omitted = 0
    for number, line in enumerate(lines, start=1):
        if not config._any.search(line):
            continue
        for pattern in config.patterns:
            if pattern.regex.search(line):
                if len(matches) < config.max_pattern_lines:
                    matches.append(MatchedLine(number, pattern.id, line))
                else:
                    omitted += 1
                break

    return CondensedLog(
        head=head,
        matched_lines=tuple(matches),
        tail=tail,
        truncated=truncated,
        omitted_matches=omitted,
        total_lines=len(lines),
    )


def match_categories(
    text: str, config: CondenserConfig | None = None
) -> set[str]:
    """Categories of every catalog pattern that fires anywhere in ``text``."""
    config = config or default_config()
    found: set[str] = set()
    for line in text.split("\n"):
        if not config._any.search(line):
            continue
        for pattern in config.patterns:
            if pattern.category not in found and pattern.regex.search(line):
                found.add(pattern.category)
    return found


def _line_gap_marker(count: int) -> str:
    return f"...{count} lines omitted...\n"


def render(condensed: CondensedLog, budget_chars: int) -> str:
    """Deterministic human-readable text, never longer than ``budget_chars``.

    Layout: head, omitted-lines markers, matched lines with their numbers,
    tail.  When the budget cannot hold everything, matched lines are dropped
    from the end first, then the assembled text is hard-truncated with a
    marker.
    """
    if budget_chars <= 0:
        raise ValueError("budget_chars must be positive")

    head_full_lines = condensed.head.count("\n")
    total_lines = condensed.total_lines or (condensed.head + condensed.tail).count("\n") + 1
    tail_lines = condensed.tail.count("\n")
    tail_start_line = total_lines - tail_lines

    middle = [
        m
        for m in condensed.matched_lines
        if head_full_lines < m.line_number < tail_start_line
    ]

    def assemble(keep: int) -> str:
        parts: list[str] = [condensed.head]
        if (middle[:keep] or condensed.tail) and condensed.head and not condensed.head.endswith("\n"):
            parts.append("\n")
        previous = head_full_lines
        for m in middle[:keep]:
            gap = m.line_number - previous - 1
            if gap > 0:
                parts.append(_line_gap_marker(gap))
            parts.append(f"{m.line_number}: {m.text}\n")
            previous = m.line_number
        dropped = (len(middle) - keep) + condensed.omitted_matches
        if dropped > 0:
            parts.append(f"...{dropped} further matches omitted...\n")
        if condensed.tail:
            gap = tail_start_line - previous - 1
            if gap > 0:
                parts.append(_line_gap_marker(gap))
            parts.append(condensed.tail)
        return "".join(parts)

    text = assemble(len(middle))
    keep = len(middle)
    while len(text) > budget_chars and keep > 0:
        keep = min(keep - 1, keep // 2)
        text = assemble(keep)
    if len(text) > budget_chars:
        cut = max(0, budget_chars - len(_TRUNCATION_MARK))
        text = (text[:cut] + _TRUNCATION_MARK)[:budget_chars]
    return text
