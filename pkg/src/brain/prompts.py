"""Few-shot prompt assembly for the three prompt families.

Each family pairs a fixed requirement sentence with exactly three
hand-annotated example pairs and a task-input layout:

* ``plan_from_program``  -- (Question, Program) -> Plan
* ``plan_from_solution`` -- (Question, Solution) -> Plan
* ``score_plan``         -- (Question, Plan) -> Solution (critique + score)

The seed pairs ship as data files under ``prompts_data/``; see
``load_pair_file`` for the format. Rendering is deterministic down to
the byte: requirement first, pairs in insertion order, one blank line
between labeled blocks, "\\n" line endings, programs fenced with
triple backticks.
"""
from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .errors import (
    BlockLabelMismatch,
    ExtraField,
    MissingField,
    PlanMissing,
    PlanUnexpected,
    WrongPairCount,
)

PLAN_FROM_PROGRAM = "plan_from_program"
PLAN_FROM_SOLUTION = "plan_from_solution"
SCORE_PLAN = "score_plan"
FAMILIES = (PLAN_FROM_PROGRAM, PLAN_FROM_SOLUTION, SCORE_PLAN)

STAGE_FRONTAL = "frontal"
STAGE_PARIETAL = "parietal"

# (input labels, output labels) legal for each family
_FAMILY_BLOCKS: dict[str, tuple[tuple[str, ...], tuple[str, ...]]] = {
    PLAN_FROM_PROGRAM: (("Question", "Program"), ("Plan",)),
    PLAN_FROM_SOLUTION: (("Question", "Solution"), ("Plan",)),
    SCORE_PLAN: (("Question", "Plan"), ("Solution",)),
}

PAIRS_PER_PROMPT = 3


@dataclass(frozen=True)
class RequirementText:
    family: str
    text: str

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family: {self.family!r}")
        if not self.text:
            raise ValueError("requirement text is empty")


@dataclass(frozen=True)
class ExamplePair:
    input_blocks: tuple[tuple[str, str], ...]
    output_blocks: tuple[tuple[str, str], ...]

    def __post_init__(self) -> None:
        if not self.input_blocks or not self.output_blocks:
            raise ValueError("example pair needs input and output blocks")


@dataclass(frozen=True)
class FewShotPrompt:
    requirement: RequirementText
    pairs: tuple[ExamplePair, ...]
    rendered: str


@dataclass(frozen=True)
class TaskInput:
    question_text: str
    program: str | None = None
    solution: str | None = None
    plan: str | None = None


def _render_block(label: str, body: str) -> str:
    # Program bodies are stored as raw code; the fence belongs to the
    # rendered prompt, not the data.
    if label == "Program":
        body = f"```python\n{body}\n```"
    return f"{label}:\n{body}"


def _render_pair(pair: ExamplePair) -> str:
    blocks = list(pair.input_blocks) + list(pair.output_blocks)
    return "\n\n".join(_render_block(label, body) for label, body in blocks)


def _check_pair_labels(family: str, pair: ExamplePair) -> None:
    legal_in, legal_out = _FAMILY_BLOCKS[family]
    in_labels = tuple(label for label, _ in pair.input_blocks)
    out_labels = tuple(label for label, _ in pair.output_blocks)
    if in_labels != legal_in or out_labels != legal_out:
        raise BlockLabelMismatch(
            f"family {family} expects {legal_in}->{legal_out}, "
            f"pair has {in_labels}->{out_labels}"
        )


def assemble_few_shot(
    requirement: RequirementText, pairs: list[ExamplePair]
) -> FewShotPrompt:
    """Concatenate the requirement with exactly three example pairs."""
    if len(pairs) != PAIRS_PER_PROMPT:
        raise WrongPairCount(f"need {PAIRS_PER_PROMPT} pairs, got {len(pairs)}")
    for pair in pairs:
        _check_pair_labels(requirement.family, pair)
    parts = [requirement.text] + [_render_pair(p) for p in pairs]
    return FewShotPrompt(
        requirement=requirement,
        pairs=tuple(pairs),
        rendered="\n\n".join(parts),
    )


def render_task_input(family: str, task: TaskInput) -> str:
    """Render the task-specific input blocks, ending with the cue label
    of the block the model is expected to complete."""
    if family not in FAMILIES:
        raise ValueError(f"unknown family: {family!r}")
    required = {
        PLAN_FROM_PROGRAM: "program",
        PLAN_FROM_SOLUTION: "solution",
        SCORE_PLAN: "plan",
    }[family]
    for name in ("program", "solution", "plan"):
        value = getattr(task, name)
        if name == required and value is None:
            raise MissingField(f"family {family} requires {name}")
        if name != required and value is not None:
            raise ExtraField(f"family {family} does not take {name}")

    if family == PLAN_FROM_PROGRAM:
        blocks = [("Question", task.question_text), ("Program", task.program)]
        cue = "Plan:"
    elif family == PLAN_FROM_SOLUTION:
        blocks = [("Question", task.question_text), ("Solution", task.solution)]
        cue = "Plan:"
    else:
        blocks = [("Question", task.question_text), ("Plan", task.plan)]
        cue = "Solution:"
    rendered = "\n\n".join(_render_block(label, body) for label, body in blocks)
    return f"{rendered}\n\n{cue}"


def build_generation_prompt(prompt: FewShotPrompt, task: TaskInput) -> str:
    """Few-shot prompt plus task input, as sent to the model."""
    return f"{prompt.rendered}\n\n{render_task_input(prompt.requirement.family, task)}"


def render_stage_messages(
    stage: str, question: str, plan: str | None = None
) -> list[dict]:
    """Zero-shot messages for the trained plan and code endpoints.

    Bare "Question: ..." / "Question: ...\\nPlan: ..." layouts, mirroring
    the SFT export templates so train and inference formats match. The
    plan appears verbatim in the parietal message.
    """
    if stage == STAGE_FRONTAL:
        if plan is not None:
            raise PlanUnexpected("frontal stage takes no plan")
        content = f"Question: {question}"
    elif stage == STAGE_PARIETAL:
        if plan is None:
            raise PlanMissing("parietal stage requires a plan")
        content = f"Question: {question}\nPlan: {plan}"
    else:
        raise ValueError(f"unknown stage: {stage!r}")
    return [{"role": "user", "content": content}]


# --- pair data files ---

_PAIR_MARKER = "=== pair ==="
_BLOCK_PREFIX = "--- "
_BLOCK_SUFFIX = " ---"

_FAMILY_FILES = {
    PLAN_FROM_PROGRAM: "plan_from_program.txt",
    PLAN_FROM_SOLUTION: "plan_from_solution.txt",
    SCORE_PLAN: "score_plan.txt",
}


def parse_pair_text(text: str) -> tuple[RequirementText, list[ExamplePair]]:
    """Parse a prompt-pair data file.

    Format: a ``family: <name>`` front-matter line, a ``requirement:``
    section, then pairs introduced by ``=== pair ===`` lines. Inside a
    pair, ``--- input: Label ---`` and ``--- output: Label ---`` lines
    delimit blocks; a block body is the verbatim text up to the next
    marker, trimmed of leading/trailing newlines.
    """
    lines = text.split("\n")
    if not lines or not lines[0].startswith("family:"):
        raise ValueError("pair file must start with 'family: <name>'")
    family = lines[0].split(":", 1)[1].strip()

    idx = 1
    while idx < len(lines) and lines[idx].strip() == "":
        idx += 1
    if idx >= len(lines) or lines[idx].strip() != "requirement:":
        raise ValueError("pair file missing 'requirement:' section")
    idx += 1
    req_lines: list[str] = []
    while idx < len(lines) and lines[idx].strip() != _PAIR_MARKER:
        req_lines.append(lines[idx])
        idx += 1
    requirement = RequirementText(family=family, text="\n".join(req_lines).strip("\n"))

    pairs: list[ExamplePair] = []
    current_blocks: list[tuple[str, str, str]] = []  # (kind, label, body)

    def flush_pair() -> None:
        if not current_blocks:
            return
        inputs = tuple((l, b) for k, l, b in current_blocks if k == "input")
        outputs = tuple((l, b) for k, l, b in current_blocks if k == "output")
        pairs.append(ExamplePair(input_blocks=inputs, output_blocks=outputs))
        current_blocks.clear()

    block_kind: str | None = None
    block_label = ""
    body_lines: list[str] = []

    def flush_block() -> None:
        nonlocal block_kind
        if block_kind is not None:
            current_blocks.append(
                (block_kind, block_label, "\n".join(body_lines).strip("\n"))
            )
        block_kind = None
        body_lines.clear()

    for line in lines[idx:]:
        stripped = line.strip()
        if stripped == _PAIR_MARKER:
            flush_block()
            flush_pair()
        elif stripped.startswith(_BLOCK_PREFIX) and stripped.endswith(_BLOCK_SUFFIX):
            flush_block()
            header = stripped[len(_BLOCK_PREFIX):-len(_BLOCK_SUFFIX)]
            kind, _, label = header.partition(":")
            if kind.strip() not in ("input", "output") or not label.strip():
                raise ValueError(f"bad block marker: {stripped!r}")
            block_kind = kind.strip()
            block_label = label.strip()
        else:
            body_lines.append(line)
    flush_block()
    flush_pair()

    if not pairs:
        raise ValueError("pair file has no pairs")
    return requirement, pairs


def load_pair_file(path: str | Path) -> tuple[RequirementText, list[ExamplePair]]:
    return parse_pair_text(Path(path).read_text(encoding="utf-8"))


def builtin_pairs(family: str) -> tuple[RequirementText, list[ExamplePair]]:
    """The shipped seed pair set for a family."""
    if family not in _FAMILY_FILES:
        raise ValueError(f"unknown family: {family!r}")
    ref = resources.files("brain").joinpath("prompts_data", _FAMILY_FILES[family])
    return parse_pair_text(ref.read_text(encoding="utf-8"))


def builtin_prompt(family: str) -> FewShotPrompt:
    requirement, pairs = builtin_pairs(family)
    return assemble_few_shot(requirement, pairs)
