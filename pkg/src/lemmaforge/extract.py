"""Deterministic extraction of structured output from model responses.

Model output is treated as untrusted text: code is recovered by scanning for
the stage's marker line, then for fenced blocks, with no reliance on the
model honoring the format on the first try.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from enum import Enum

logger = logging.getLogger(__name__)


class MarkerMissing(Exception):
    """The response contains no occurrence of the stage marker."""


@dataclass(frozen=True)
class ExtractionRules:
    """How to locate the code payload for one stage."""

    marker: str
    # Marker matching always ignores ASCII case; the field is kept so scripted
    # configurations can state it explicitly.
    case_insensitive_marker: bool = True

    def __post_init__(self) -> None:
        if not self.marker:
            raise ValueError("extraction marker must be non-empty")


class ParsedVerdict(str, Enum):
    CORRECT = "correct"
    WRONG = "wrong"
    UNPARSEABLE = "unparseable"


# ---------------------------------------------------------------------------
# Reasoning markup
# ---------------------------------------------------------------------------

_THINK_SPAN = re.compile(r"<think>.*?</think>", re.DOTALL | re.IGNORECASE)
_THINK_OPEN = re.compile(r"<think>", re.IGNORECASE)


def strip_reasoning_markup(response: str) -> str:
    """Remove `<think>...</think>` spans before any other extraction.

    An unbalanced open tag swallows everything to the end of the text; that
    is logged as a warning because it usually means the response was cut off.
    """
    text = _THINK_SPAN.sub("", response)
    open_match = _THINK_OPEN.search(text)
    if open_match:
        logger.warning("unbalanced <think> tag; dropping %d trailing chars", len(text) - open_match.start())
        text = text[: open_match.start()]
    return text


# ---------------------------------------------------------------------------
# Marker and fence extraction
# ---------------------------------------------------------------------------


def _trim_blank_lines(lines: list[str]) -> str:
    start, end = 0, len(lines)
    while start < end and not lines[start].strip():
        start += 1
    while end > start and not lines[end - 1].strip():
        end -= 1
    return "\n".join(lines[start:end])


def last_code_block(text: str) -> str:
    """Interior of the last fenced block, or the whole text trimmed of blank
    edge lines when no fence is present. An unterminated final fence opens a
    block running to the end of the text (truncated responses)."""
    lines = text.split("\n")
    fences = [i for i, line in enumerate(lines) if line.lstrip().startswith("```")]
    if not fences:
        return _trim_blank_lines(lines)
    if len(fences) % 2 == 1:
        return _trim_blank_lines(lines[fences[-1] + 1 :])
    return _trim_blank_lines(lines[fences[-2] + 1 : fences[-1]])


def extract_after_marker(response: str, rules: ExtractionRules) -> str:
    """Return the code payload following the last marker occurrence.

    The scan takes everything after the end of the line holding the last
    (ASCII-case-insensitive) occurrence of the marker, then prefers the last
    fenced code block within it.

    Raises:
        MarkerMissing: no occurrence of the marker anywhere in the response.
    """
    matches = list(re.finditer(re.escape(rules.marker), response, re.IGNORECASE))
    if not matches:
        raise MarkerMissing(f"marker {rules.marker!r} not found in response")
    line_end = response.find("\n", matches[-1].end())
    remainder = "" if line_end < 0 else response[line_end + 1 :]
    return last_code_block(remainder)


# ---------------------------------------------------------------------------
# Candidate splitting
# ---------------------------------------------------------------------------

_CONTEXT_KEYWORDS = frozenset({"import", "open", "set_option", "variable", "universe"})
_DECL_KEYWORDS = frozenset({"lemma", "theorem"})
_DISCARD_KEYWORDS = frozenset({"def", "abbrev"})


@dataclass
class SplitStats:
    """Counters accumulated while splitting a snippet."""

    discarded_lines: int = 0
    variable_context_lines: int = 0
    preamble_lines: list[str] = field(default_factory=list)


def _first_token(line: str) -> str:
    parts = line.split(None, 1)
    return parts[0] if parts else ""


def split_candidates(snippet: str, stats: SplitStats | None = None) -> list[tuple[str, str]]:
    """Split a multi-lemma snippet into (preamble, statement) pairs.

    Context lines (import / open / set_option / variable / universe) accumulate
    into the preamble of every declaration that follows them. A declaration
    starts at a column-0 `lemma` or `theorem` line, includes any `@[...]`
    attribute lines immediately above it, and runs to the line before the next
    declaration (or context line, or end of input). `def`/`abbrev` blocks are
    not lemma candidates and are dropped, counted in `stats.discarded_lines`.
    """
    if stats is None:
        stats = SplitStats()
    pairs: list[tuple[str, str]] = []
    preamble: list[str] = []
    seen_context: set[str] = set()
    current: list[str] | None = None
    pending_attrs: list[str] = []
    discarding = False

    def flush() -> None:
        nonlocal current
        if current is None:
            return
        while current and not current[-1].strip():
            current.pop()
        if current:
            pairs.append(("\n".join(preamble), "\n".join(current)))
        current = None

    for line in snippet.split("\n"):
        stripped = line.strip()
        token = _first_token(line)
        column0 = bool(line) and not line[0].isspace()

        if token in _CONTEXT_KEYWORDS:
            flush()
            discarding = False
            if pending_attrs:
                stats.discarded_lines += len(pending_attrs)
                pending_attrs = []
            if stripped not in seen_context:
                seen_context.add(stripped)
                preamble.append(stripped)
                if token == "variable":
                    stats.variable_context_lines += 1
            continue

        if column0 and token in _DECL_KEYWORDS:
            flush()
            discarding = False
            current = pending_attrs + [line]
            pending_attrs = []
            continue

        if column0 and token in _DISCARD_KEYWORDS:
            flush()
            discarding = True
            stats.discarded_lines += 1 + len(pending_attrs)
            pending_attrs = []
            continue

        if column0 and stripped.startswith("@["):
            flush()
            discarding = False
            pending_attrs.append(line)
            continue

        if discarding:
            if stripped:
                stats.discarded_lines += 1
            continue

        if current is not None:
            current.append(line)
        # Prose before the first declaration is ignored.

    flush()
    if pending_attrs:
        stats.discarded_lines += len(pending_attrs)
    stats.preamble_lines = list(preamble)
    if stats.variable_context_lines:
        logger.warning(
            "snippet preamble carries %d variable line(s); downstream checks see them verbatim",
            stats.variable_context_lines,
        )
    return pairs


# ---------------------------------------------------------------------------
# Judge verdicts
# ---------------------------------------------------------------------------


def parse_verdict(response: str) -> ParsedVerdict:
    """Decide a judge verdict from the last non-empty line of the response.

    The line must start with `correct` or `wrong` (ASCII case ignored, no
    leading whitespace allowed); anything else is Unparseable.
    """
    norm = response.replace("\r\n", "\n").replace("\r", "\n")
    for line in reversed(norm.split("\n")):
        if not line.strip():
            continue
        lowered = line.lower()
        if lowered.startswith("correct"):
            return ParsedVerdict.CORRECT
        if lowered.startswith("wrong"):
            return ParsedVerdict.WRONG
        return ParsedVerdict.UNPARSEABLE
    return ParsedVerdict.UNPARSEABLE
