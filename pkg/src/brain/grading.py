"""Correctness decisions and accuracy aggregation.

A prediction matches its gold answer under a hybrid tolerance of
1e-6 * max(1, |gold|): absolute for the small integers GSM8K uses,
relative for large magnitudes produced by float arithmetic.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

from .errors import EmptyInput

FailureKind = str  # "exec_error" | "timeout" | "parse_error" | "wrong_answer"

TOLERANCE = 1e-6


@dataclass(frozen=True)
class Verdict:
    question_id: str
    predicted: float | None
    gold: float
    correct: bool
    failure_kind: FailureKind | None = None

    def __post_init__(self) -> None:
        if self.correct and self.failure_kind is not None:
            raise ValueError("correct verdicts carry no failure_kind")
        if self.predicted is None and self.correct:
            raise ValueError("missing prediction cannot be correct")


def answers_match(predicted: float, gold: float) -> bool:
    if not (math.isfinite(predicted) and math.isfinite(gold)):
        return False
    return abs(predicted - gold) <= TOLERANCE * max(1.0, abs(gold))


def grade(
    predicted: float | None,
    gold: float,
    failure_kind: FailureKind | None = None,
    question_id: str = "",
) -> Verdict:
    """Build the verdict for one prediction.

    An absent prediction is incorrect with the supplied failure kind; a
    present-but-wrong one is tagged "wrong_answer".
    """
    if not math.isfinite(gold):
        raise ValueError(f"gold answer must be finite, got {gold}")
    if predicted is None:
        return Verdict(question_id, None, gold, False, failure_kind or "parse_error")
    if answers_match(predicted, gold):
        return Verdict(question_id, predicted, gold, True, None)
    return Verdict(question_id, predicted, gold, False, "wrong_answer")


def accuracy(verdicts: list[Verdict]) -> float:
    if not verdicts:
        raise EmptyInput("accuracy over zero verdicts")
    return sum(1 for v in verdicts if v.correct) / len(verdicts)


def format_percent(fraction: float, decimals: int = 1) -> str:
    """Format a [0,1] fraction as a percentage, rounding half-up."""
    quantum = Decimal(1).scaleb(-decimals)
    value = (Decimal(str(fraction)) * 100).quantize(quantum, rounding=ROUND_HALF_UP)
    return f"{value}%"
