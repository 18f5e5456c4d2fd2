"""Structured extraction from free-form model output and dataset text.

Covers the four artifact kinds the pipeline consumes: numbered step
plans, bracketed rubric scores on judge output, fenced solution
programs, and gold numeric answers from GSM8K-style solution text.
All functions are pure; failures raise typed errors from
:mod:`brain.errors` rather than returning sentinels.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

from .errors import (
    NoAnswerFound,
    NoCodeFound,
    NoEntrypoint,
    NoPlanFound,
    NotNumeric,
    ScoreNotFound,
    ScoreOutOfRange,
    ScoreUnparseable,
)

PLAN_HEADER = "To solve the problem follow these steps:"

SCORE_MIN = 0.0
SCORE_MAX = 3.0

_ORDINAL_RE = re.compile(r"^\s*(\d+)[.)]\s+(.*)$")
_FENCE_RE = re.compile(r"```([A-Za-z0-9_+-]*)[ \t]*\n(.*?)```", re.DOTALL)
_BRACKET_RE = re.compile(r"\[([^\[\]]*)\]")
_CALC_SPAN_RE = re.compile(r"<<[^>]*>>")
_NUMBER_TOKEN_RE = re.compile(r"-?\d[\d,]*(?:\.\d+)?(?:/\d+)?")


@dataclass(frozen=True)
class ParsedPlan:
    """A numbered step list with its originating raw text."""

    steps: tuple[str, ...]
    raw_text: str


@dataclass(frozen=True)
class ParsedScore:
    """A 0-3 rubric score, optionally with the per-criterion addends."""

    value: float
    addends: tuple[float, ...] | None
    raw_span: str


@dataclass(frozen=True)
class CodeBlock:
    source: str
    language_tag: str | None = None
    entrypoint: str = "solution"


@dataclass(frozen=True)
class GoldAnswer:
    raw: str
    numeric: float


def extract_plan(text: str) -> ParsedPlan:
    """Pull the numbered step list out of plan-stage output.

    Scans after the first "Plan:" header when one is present, otherwise
    the whole text. A step runs from its ordinal line up to the next
    ordinal line; intervening continuation lines are folded in.
    """
    region = text
    header_pos = text.find("Plan:")
    if header_pos != -1:
        region = text[header_pos + len("Plan:"):]

    steps: list[str] = []
    current: list[str] | None = None
    for line in region.splitlines():
        m = _ORDINAL_RE.match(line)
        if m:
            if current is not None:
                steps.append(" ".join(current).strip())
            current = [m.group(2).strip()]
        elif current is not None:
            stripped = line.strip()
            if stripped:
                current.append(stripped)
            else:
                # blank line ends the list only if something follows that
                # is not an ordinal; treat it as a soft boundary
                steps.append(" ".join(current).strip())
                current = None
    if current is not None:
        steps.append(" ".join(current).strip())

    steps = [s for s in steps if s]
    if not steps:
        raise NoPlanFound("no numbered step list in text")
    return ParsedPlan(steps=tuple(steps), raw_text=text)


def render_plan(plan: ParsedPlan, header: bool = False) -> str:
    """Render steps back to the canonical "1. ...\\n2. ..." form."""
    lines = [f"{i}. {step}" for i, step in enumerate(plan.steps, start=1)]
    body = "\n".join(lines)
    if header:
        return f"{PLAN_HEADER}\n{body}"
    return body


def _parse_bracket_value(contents: str) -> tuple[float, tuple[float, ...] | None]:
    """Parse a bracket group: either a plain number or a "+"-sum."""
    contents = contents.strip()
    if "+" in contents:
        parts = [p.strip() for p in contents.split("+")]
        try:
            addends = tuple(float(p) for p in parts)
        except ValueError as exc:
            raise ScoreUnparseable(f"bad score expression: [{contents}]") from exc
        return sum(addends), addends
    try:
        return float(contents), None
    except ValueError as exc:
        raise ScoreUnparseable(f"bad score value: [{contents}]") from exc


def extract_score(text: str) -> ParsedScore:
    """Extract the judge's total score from critique text.

    Takes the final "Score:" occurrence, then the last bracketed group
    on that line. The judge format writes the sum expression first and
    the resulting total last, so last-bracket-wins yields the total.
    """
    pos = text.rfind("Score:")
    if pos == -1:
        raise ScoreNotFound("no 'Score:' marker in text")
    line_end = text.find("\n", pos)
    line = text[pos:] if line_end == -1 else text[pos:line_end]

    groups = _BRACKET_RE.findall(line)
    if not groups:
        raise ScoreNotFound("'Score:' line has no bracketed group")

    value, addends = _parse_bracket_value(groups[-1])
    if addends is None and len(groups) > 1:
        # a preceding expression bracket supplies the addends when its
        # sum agrees with the stated total
        for earlier in reversed(groups[:-1]):
            if "+" not in earlier:
                continue
            try:
                candidate_sum, candidate = _parse_bracket_value(earlier)
            except ScoreUnparseable:
                continue
            if candidate is not None and abs(candidate_sum - value) <= 1e-9:
                addends = candidate
                break

    if not (SCORE_MIN <= value <= SCORE_MAX):
        raise ScoreOutOfRange(f"score {value} outside [{SCORE_MIN}, {SCORE_MAX}]")
    return ParsedScore(value=value, addends=addends, raw_span=line)


def extract_code_block(text: str, entrypoint: str = "solution") -> CodeBlock:
    """Find the solution program in model output.

    First fenced block defining the entrypoint wins; if no fenced block
    defines it, falls back to the unfenced region starting at the
    entrypoint definition (the def line plus its indented body).
    """
    needle = f"def {entrypoint}"
    fences = list(_FENCE_RE.finditer(text))
    for m in fences:
        source = m.group(2).strip("\n")
        if needle in source:
            tag = m.group(1) or None
            return CodeBlock(source=source, language_tag=tag, entrypoint=entrypoint)

    # unfenced fallback: capture from the def line through its block
    lines = text.splitlines()
    for i, line in enumerate(lines):
        if line.lstrip().startswith(needle):
            captured = [line]
            for follow in lines[i + 1:]:
                if follow.strip() == "" or follow[:1] in (" ", "\t"):
                    captured.append(follow)
                else:
                    break
            source = "\n".join(captured).rstrip()
            return CodeBlock(source=source, language_tag=None, entrypoint=entrypoint)

    if fences:
        raise NoEntrypoint(f"no fenced block defines '{entrypoint}'")
    raise NoCodeFound("no code block in text")


def normalize_numeric(raw: str) -> float:
    """Parse a human-formatted numeral to a float.

    Strips currency symbols, thousands commas, percent signs and
    trailing unit words; accepts integers, decimals, and two-integer
    fractions "a/b". Percentages stay in percent units ("50%" -> 50),
    matching the plain-numeral convention of GSM8K gold answers.
    """
    s = raw.strip()
    s = s.strip("$€£")
    s = s.replace(",", "").rstrip("%").strip()
    if not s:
        raise NotNumeric(f"not a number: {raw!r}")
    try:
        return float(s)
    except ValueError:
        pass
    frac = re.fullmatch(r"(-?\d+)\s*/\s*(\d+)", s)
    if frac:
        denom = int(frac.group(2))
        if denom == 0:
            raise NotNumeric(f"zero denominator: {raw!r}")
        return int(frac.group(1)) / denom
    # leading numeric token with a trailing unit word ("30 units", "5km")
    m = re.match(r"(-?\d+(?:\.\d+)?(?:/\d+)?)\s*[A-Za-z .]*$", s)
    if m:
        return normalize_numeric(m.group(1))
    raise NotNumeric(f"not a number: {raw!r}")


def extract_gold_answer(solution_text: str) -> GoldAnswer:
    """Read the gold numeric from a GSM8K-style solution.

    Calculator spans "<<...>>" are removed first. The numeric after the
    final "####" marker wins; without a marker, the last normalizable
    number in the text is used.
    """
    cleaned = _CALC_SPAN_RE.sub("", solution_text)
    marker_pos = cleaned.rfind("####")
    if marker_pos != -1:
        tail = cleaned[marker_pos + 4:].strip()
        raw = tail.splitlines()[0].strip() if tail else ""
        try:
            return GoldAnswer(raw=raw, numeric=normalize_numeric(raw))
        except NotNumeric as exc:
            raise NoAnswerFound(f"unparsable answer after '####': {raw!r}") from exc

    tokens = _NUMBER_TOKEN_RE.findall(cleaned)
    for token in reversed(tokens):
        try:
            return GoldAnswer(raw=token, numeric=normalize_numeric(token))
        except NotNumeric:
            continue
    raise NoAnswerFound("no numeric answer in solution text")
