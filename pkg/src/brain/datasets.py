"""Dataset curation for sampled reasoning paths and scored plans.

The raw material is a pile of (question, generated program) records
from many models and many samples. This module turns that pile into
training corpora: correctness filtering, near-duplicate removal keyed
on normalized program text, question-level train splits, per-question
representative path selection, plan supervision pairs, and JSONL
exports for supervised fine-tuning and preference optimization.
"""
from __future__ import annotations

import hashlib
import json
import random
from collections import Counter
from dataclasses import dataclass, field

from .errors import BadCounts, DataError, IncompleteRecord
from .parsing import extract_gold_answer, extract_plan, render_plan
from .prompts import STAGE_FRONTAL, STAGE_PARIETAL, render_stage_messages

PLAN_SOURCE_PATHS = "paths"
PLAN_SOURCE_FREQUENT = "frequent-paths"
PLAN_SOURCE_SOLUTIONS = "solutions"
PLAN_SOURCE_SFT = "sft-source"
PLAN_SOURCE_GENERATED = "generated"

SFT_KIND_PLAN = "frontal-plan"
SFT_KIND_CODE = "parietal-code"


# --- records ---


@dataclass(frozen=True)
class QuestionRecord:
    question_id: str
    question: str
    solution: str
    gold: float

    def to_dict(self) -> dict:
        return {
            "question_id": self.question_id,
            "question": self.question,
            "solution": self.solution,
            "gold": self.gold,
        }


@dataclass(frozen=True)
class ReasoningPathRecord:
    question_id: str
    question: str
    gold: float
    code: str
    answer_numeric: float | None
    correct: bool
    source_model: str = ""
    sample_index: int = 0

    def to_dict(self) -> dict:
        return {
            "question_id": self.question_id,
            "question": self.question,
            "gold": self.gold,
            "code": self.code,
            "answer_numeric": self.answer_numeric,
            "correct": self.correct,
            "source_model": self.source_model,
            "sample_index": self.sample_index,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ReasoningPathRecord":
        return cls(
            question_id=obj["question_id"],
            question=obj["question"],
            gold=float(obj["gold"]),
            code=obj["code"],
            answer_numeric=obj.get("answer_numeric"),
            correct=bool(obj["correct"]),
            source_model=obj.get("source_model", ""),
            sample_index=int(obj.get("sample_index", 0)),
        )


@dataclass(frozen=True)
class PlanRecord:
    question_id: str
    question: str
    plan_text: str
    score: float | None = None
    source: str = PLAN_SOURCE_GENERATED
    path_key: str | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "question_id": self.question_id,
            "question": self.question,
            "plan_text": self.plan_text,
            "score": self.score,
            "source": self.source,
            "path_key": self.path_key,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "PlanRecord":
        return cls(
            question_id=obj["question_id"],
            question=obj["question"],
            plan_text=obj["plan_text"],
            score=obj.get("score"),
            source=obj.get("source", PLAN_SOURCE_GENERATED),
            path_key=obj.get("path_key"),
            error=obj.get("error"),
        )


@dataclass(frozen=True)
class PreferencePair:
    question_id: str
    prompt: str
    chosen: str
    rejected: str
    score_chosen: float
    score_rejected: float

    def __post_init__(self) -> None:
        if not self.score_chosen > self.score_rejected:
            raise ValueError("chosen score must strictly exceed rejected score")

    @property
    def margin(self) -> float:
        return self.score_chosen - self.score_rejected

    def to_dict(self) -> dict:
        return {
            "prompt": self.prompt,
            "chosen": self.chosen,
            "rejected": self.rejected,
            "score_chosen": self.score_chosen,
            "score_rejected": self.score_rejected,
            "margin": self.margin,
            "question_id": self.question_id,
        }


@dataclass(frozen=True)
class SftExample:
    prompt: str
    completion: str
    question_id: str
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "prompt": self.prompt,
            "completion": self.completion,
            "question_id": self.question_id,
            "meta": self.meta,
        }


@dataclass(frozen=True)
class SplitSpec:
    first_count: int
    second_count: int
    seed: int = 0


# --- generic JSONL IO ---


def write_jsonl(path: str, objs) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for obj in objs:
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def read_jsonl(path: str) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
    return out


def derive_question_id(question: str) -> str:
    return "g" + hashlib.sha256(question.encode("utf-8")).hexdigest()[:12]


def load_questions(path: str) -> list[QuestionRecord]:
    """Read question/answer JSONL as published for grade-school math sets.

    Accepts {"question", "answer"} or {"question", "solution"}; a
    missing question_id is derived from the question text.
    """
    records = []
    for obj in read_jsonl(path):
        question = obj.get("question")
        solution = obj.get("answer", obj.get("solution"))
        if question is None or solution is None:
            raise IncompleteRecord(f"{path}: record needs question and answer fields")
        qid = obj.get("question_id") or derive_question_id(question)
        gold = extract_gold_answer(solution)
        records.append(
            QuestionRecord(
                question_id=qid, question=question, solution=solution,
                gold=gold.numeric,
            )
        )
    return records


def load_paths(path: str) -> list[ReasoningPathRecord]:
    return [ReasoningPathRecord.from_dict(obj) for obj in read_jsonl(path)]


def load_plans(path: str) -> list[PlanRecord]:
    return [PlanRecord.from_dict(obj) for obj in read_jsonl(path)]


# --- code normalization and dedup ---


def normalize_code(code: str) -> str:
    """Canonical text for near-duplicate detection.

    Drops comments and blank lines, collapses space runs, and folds
    single quotes into double quotes. Crude on purpose: two programs
    that differ only in formatting should collide.
    """
    lines = []
    for raw in code.splitlines():
        line = _strip_comment(raw)
        line = line.rstrip()
        if not line.strip():
            continue
        out = []
        space = False
        for ch in line:
            if ch in (" ", "\t"):
                if not space and out:
                    out.append(" ")
                space = True
            else:
                out.append(ch)
                space = False
        lines.append("".join(out).replace("'", '"'))
    return "\n".join(lines)


def _strip_comment(line: str) -> str:
    quote = None
    for i, ch in enumerate(line):
        if quote is not None:
            if ch == quote and (i == 0 or line[i - 1] != "\\"):
                quote = None
        elif ch in ("'", '"'):
            quote = ch
        elif ch == "#":
            return line[:i]
    return line


def dedup_key(code: str) -> str:
    return hashlib.sha256(normalize_code(code).encode("utf-8")).hexdigest()


def filter_correct(records: list[ReasoningPathRecord]) -> list[ReasoningPathRecord]:
    return [r for r in records if r.correct]


def dedup_paths(records: list[ReasoningPathRecord]) -> list[ReasoningPathRecord]:
    """Keep the first record for each normalized-code key, in order."""
    seen: set[str] = set()
    out = []
    for r in records:
        key = dedup_key(r.code)
        if key in seen:
            continue
        seen.add(key)
        out.append(r)
    return out


def curate_paths(records: list[ReasoningPathRecord]) -> list[ReasoningPathRecord]:
    """Correct-only, deduplicated within each question's group."""
    grouped: dict[str, list[ReasoningPathRecord]] = {}
    order: list[str] = []
    for r in records:
        if r.question_id not in grouped:
            grouped[r.question_id] = []
            order.append(r.question_id)
        grouped[r.question_id].append(r)
    out: list[ReasoningPathRecord] = []
    for qid in order:
        out.extend(dedup_paths(filter_correct(grouped[qid])))
    return out


def most_frequent_paths(records: list[ReasoningPathRecord]) -> list[ReasoningPathRecord]:
    """One representative correct path per question.

    Picks the normalized-code key appearing most often among that
    question's correct samples, counted before deduplication; ties go
    to the key holding the smallest (source_model, sample_index)
    record, and that record represents the key.
    """
    grouped: dict[str, list[ReasoningPathRecord]] = {}
    order: list[str] = []
    for r in records:
        if not r.correct:
            continue
        if r.question_id not in grouped:
            grouped[r.question_id] = []
            order.append(r.question_id)
        grouped[r.question_id].append(r)

    out = []
    for qid in order:
        group = grouped[qid]
        counts: Counter[str] = Counter()
        best_record: dict[str, ReasoningPathRecord] = {}
        for r in group:
            key = dedup_key(r.code)
            counts[key] += 1
            prev = best_record.get(key)
            if prev is None or (r.source_model, r.sample_index) < (
                prev.source_model,
                prev.sample_index,
            ):
                best_record[key] = r
        winner = min(
            counts,
            key=lambda k: (
                -counts[k],
                best_record[k].source_model,
                best_record[k].sample_index,
            ),
        )
        out.append(best_record[winner])
    return out


# --- question splits ---


def split_questions(
    question_ids: list[str], spec: SplitSpec
) -> tuple[list[str], list[str]]:
    """Disjoint question-level split: sort, seeded shuffle, cut.

    The two counts must exactly cover the unique ids; splits at the
    question level so no question leaks across corpora.
    """
    unique = sorted(set(question_ids))
    total = spec.first_count + spec.second_count
    if total != len(unique):
        raise BadCounts(
            f"split sizes {spec.first_count}+{spec.second_count} != {len(unique)} questions"
        )
    if spec.first_count < 0 or spec.second_count < 0:
        raise BadCounts("split sizes must be non-negative")
    rng = random.Random(spec.seed)
    rng.shuffle(unique)
    return unique[: spec.first_count], unique[spec.first_count :]


# --- preference pairs ---


def build_preference_pairs(
    plans: list[PlanRecord], min_margin: float = 1.0
) -> list[PreferencePair]:
    """Best-vs-worst scored plan per question.

    Only questions whose score spread is at least min_margin produce a
    pair; equal-score sets produce nothing. Among equal scores the
    lexicographically smallest plan text wins, making output stable
    under input reordering. Unscored records are ignored.
    """
    grouped: dict[str, list[PlanRecord]] = {}
    order: list[str] = []
    for p in plans:
        if p.score is None:
            continue
        if p.question_id not in grouped:
            grouped[p.question_id] = []
            order.append(p.question_id)
        grouped[p.question_id].append(p)

    pairs = []
    for qid in order:
        group = grouped[qid]
        if len(group) < 2:
            continue
        chosen = min(group, key=lambda p: (-p.score, p.plan_text))
        rejected = min(group, key=lambda p: (p.score, p.plan_text))
        if chosen.score <= rejected.score:
            continue
        if chosen.score - rejected.score < min_margin:
            continue
        prompt = render_stage_messages(STAGE_FRONTAL, group[0].question)[0]["content"]
        pairs.append(
            PreferencePair(
                question_id=qid,
                prompt=prompt,
                chosen=chosen.plan_text,
                rejected=rejected.plan_text,
                score_chosen=chosen.score,
                score_rejected=rejected.score,
            )
        )
    return pairs


# --- SFT assembly ---


def plan_completion(plan_text: str) -> str:
    """Canonical plan completion: header line plus numbered steps."""
    parsed = extract_plan(plan_text)
    return render_plan(parsed, header=True)


def sft_example_for_plan(plan: PlanRecord) -> SftExample:
    if not plan.plan_text.strip():
        raise IncompleteRecord(f"{plan.question_id}: plan record has empty plan_text")
    prompt = render_stage_messages(STAGE_FRONTAL, plan.question)[0]["content"]
    return SftExample(
        prompt=prompt,
        completion=plan_completion(plan.plan_text),
        question_id=plan.question_id,
        meta={"kind": SFT_KIND_PLAN, "source": plan.source},
    )


def sft_example_for_code(
    path: ReasoningPathRecord, plan_text: str
) -> SftExample:
    if not path.code.strip():
        raise IncompleteRecord(f"{path.question_id}: path record has empty code")
    if not plan_text.strip():
        raise IncompleteRecord(f"{path.question_id}: code example needs a plan")
    plan_body = render_plan(extract_plan(plan_text), header=False)
    prompt = render_stage_messages(STAGE_PARIETAL, path.question, plan=plan_body)[0][
        "content"
    ]
    return SftExample(
        prompt=prompt,
        completion=path.code,
        question_id=path.question_id,
        meta={"kind": SFT_KIND_CODE, "source_model": path.source_model},
    )


def export_sft(examples: list[SftExample], path: str) -> int:
    write_jsonl(path, (ex.to_dict() for ex in examples))
    return len(examples)


def export_dpo(pairs: list[PreferencePair], path: str) -> int:
    write_jsonl(path, (p.to_dict() for p in pairs))
    return len(pairs)


def read_sft(path: str) -> list[SftExample]:
    return [
        SftExample(
            prompt=obj["prompt"],
            completion=obj["completion"],
            question_id=obj["question_id"],
            meta=obj.get("meta", {}),
        )
        for obj in read_jsonl(path)
    ]


def read_dpo(path: str) -> list[PreferencePair]:
    return [
        PreferencePair(
            question_id=obj["question_id"],
            prompt=obj["prompt"],
            chosen=obj["chosen"],
            rejected=obj["rejected"],
            score_chosen=float(obj["score_chosen"]),
            score_rejected=float(obj["score_rejected"]),
        )
        for obj in read_jsonl(path)
    ]


# --- iteration merging ---


def merge_iteration_paths(
    base: list[ReasoningPathRecord],
    incoming: list[ReasoningPathRecord],
    replace_questions: bool = False,
) -> list[ReasoningPathRecord]:
    """Fold a new sampling round into an existing curated set.

    Default is a union deduplicated on normalized code per question;
    with replace_questions, questions present in the incoming round
    drop their old paths first.
    """
    if replace_questions:
        incoming_qids = {r.question_id for r in incoming}
        base = [r for r in base if r.question_id not in incoming_qids]
    seen = {(r.question_id, dedup_key(r.code)) for r in base}
    merged = list(base)
    for r in incoming:
        key = (r.question_id, dedup_key(r.code))
        if key in seen:
            continue
        seen.add(key)
        merged.append(r)
    return merged
