"""End-to-end orchestration: question in, graded verdict out.

The two-stage path runs a planner endpoint ("frontal"), parses the
numbered plan, feeds question plus plan to a coder endpoint
("parietal"), extracts the generated program, executes it in the
sandbox, and grades the returned value against gold. Every stage
failure downgrades to an incorrect verdict that names the failing
stage; evaluation never dies on one bad question.

Also here: plan generation from curated programs, judge scoring of
candidate plans, the improvement-loop stopping rule, and markdown
accuracy reports.
"""
from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

from .datasets import PlanRecord, QuestionRecord, dedup_key
from .errors import (
    AllSamplesFailed,
    CassetteMiss,
    DataError,
    EmptyInput,
    EndpointNotConfigured,
    EndpointUnreachable,
    RateLimited,
)
from .gateway import Cassette, GenerationConfig, Gateway
from .grading import Verdict, accuracy, format_percent, grade
from .parsing import (
    extract_code_block,
    extract_plan,
    extract_score,
    render_plan,
)
from .prompts import (
    PLAN_FROM_PROGRAM,
    SCORE_PLAN,
    STAGE_FRONTAL,
    STAGE_PARIETAL,
    TaskInput,
    build_generation_prompt,
    builtin_prompt,
    render_stage_messages,
)
from .sandbox import ExecJob, LocalExecutor, SandboxController, STATUS_OK, STATUS_TIMEOUT

MODE_TWO_STAGE = "two-stage"
MODE_ONE_STAGE = "one-stage"

DECISION_CONTINUE = "continue"
DECISION_STOP = "stop"

DEFAULT_EPSILON = 0.001
DEFAULT_MAX_ITERATIONS = 5

_GENERATION_ERRORS = (
    AllSamplesFailed,
    CassetteMiss,
    EndpointNotConfigured,
    EndpointUnreachable,
    RateLimited,
)


# --- tracing ---


@dataclass(frozen=True)
class TraceEvent:
    stage: str
    elapsed_ms: int
    detail: str = ""


@dataclass
class Trace:
    question_id: str
    mode: str
    events: list[TraceEvent] = field(default_factory=list)
    artifacts: dict = field(default_factory=dict)
    failed_stage: str | None = None
    _started: float = field(default_factory=time.monotonic, repr=False)

    def mark(self, stage: str, detail: str = "") -> None:
        self.events.append(
            TraceEvent(
                stage=stage,
                elapsed_ms=int((time.monotonic() - self._started) * 1000),
                detail=detail,
            )
        )

    def fail(self, stage: str, detail: str = "") -> None:
        self.failed_stage = stage
        self.mark(stage, detail or "failed")

    def to_dict(self) -> dict:
        return {
            "question_id": self.question_id,
            "mode": self.mode,
            "failed_stage": self.failed_stage,
            "artifacts": self.artifacts,
            "events": [
                {"stage": e.stage, "elapsed_ms": e.elapsed_ms, "detail": e.detail}
                for e in self.events
            ],
        }

    def write(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, ensure_ascii=False, indent=2)
            fh.write("\n")


# --- stages ---


@dataclass
class Stage:
    gateway: Gateway
    config: GenerationConfig

    def one_text(self, messages: list[dict]) -> str:
        single = replace(self.config, n_samples=1)
        return self.gateway.sample_n(messages, single)[0].text

    def sample_texts(self, messages: list[dict]) -> list[str]:
        return [
            c.text
            for c in self.gateway.sample_n(messages, self.config)
            if c.finish_reason != "error"
        ]


class Pipeline:
    """Bundles stage endpoints and an executor for any questions batch."""

    def __init__(
        self,
        frontal: Stage | None = None,
        parietal: Stage | None = None,
        judge: Stage | None = None,
        onestage: Stage | None = None,
        executor=None,
        timeout_ms: int = 10_000,
        memory_limit_mb: int = 512,
    ):
        self.frontal = frontal
        self.parietal = parietal
        self.judge = judge
        self.onestage = onestage
        self.executor = executor if executor is not None else LocalExecutor()
        self.timeout_ms = timeout_ms
        self.memory_limit_mb = memory_limit_mb

    # --- single-question runs ---

    def run_two_stage(self, question: QuestionRecord) -> tuple[Verdict, Trace]:
        trace = Trace(question_id=question.question_id, mode=MODE_TWO_STAGE)
        if self.frontal is None or self.parietal is None:
            raise EndpointNotConfigured("two-stage runs need frontal and parietal stages")

        try:
            plan_raw = self.frontal.one_text(
                render_stage_messages(STAGE_FRONTAL, question.question)
            )
            trace.artifacts["plan_raw"] = plan_raw
            trace.mark("frontal_generate")
        except _GENERATION_ERRORS as exc:
            trace.fail("frontal_generate", str(exc))
            return self._failed(question, "frontal_generate", trace)

        try:
            plan = extract_plan(plan_raw)
            trace.mark("plan_parse", f"{len(plan.steps)} steps")
        except DataError as exc:
            trace.fail("plan_parse", str(exc))
            return self._failed(question, "plan_parse", trace)

        plan_body = render_plan(plan, header=False)
        parietal_messages = render_stage_messages(
            STAGE_PARIETAL, question.question, plan=plan_body
        )
        trace.artifacts["plan"] = plan_body
        trace.artifacts["parietal_prompt"] = parietal_messages[0]["content"]
        try:
            code_raw = self.parietal.one_text(parietal_messages)
            trace.artifacts["code_raw"] = code_raw
            trace.mark("parietal_generate")
        except _GENERATION_ERRORS as exc:
            trace.fail("parietal_generate", str(exc))
            return self._failed(question, "parietal_generate", trace)

        return self._run_code(question, code_raw, trace)

    def run_one_stage(self, question: QuestionRecord) -> tuple[Verdict, Trace]:
        trace = Trace(question_id=question.question_id, mode=MODE_ONE_STAGE)
        if self.onestage is None:
            raise EndpointNotConfigured("one-stage runs need the onestage endpoint")
        try:
            code_raw = self.onestage.one_text(
                render_stage_messages(STAGE_FRONTAL, question.question)
            )
            trace.artifacts["code_raw"] = code_raw
            trace.mark("onestage_generate")
        except _GENERATION_ERRORS as exc:
            trace.fail("onestage_generate", str(exc))
            return self._failed(question, "onestage_generate", trace)
        return self._run_code(question, code_raw, trace)

    def _run_code(
        self, question: QuestionRecord, code_raw: str, trace: Trace
    ) -> tuple[Verdict, Trace]:
        try:
            block = extract_code_block(code_raw)
            trace.artifacts["code"] = block.source
            trace.mark("code_extract")
        except DataError as exc:
            trace.fail("code_extract", str(exc))
            return self._failed(question, "code_extract", trace)

        job = ExecJob(
            job_id=question.question_id,
            code=block.source,
            entrypoint=block.entrypoint,
            timeout_ms=self.timeout_ms,
            memory_limit_mb=self.memory_limit_mb,
        )
        result = self.executor.execute(job)
        trace.artifacts["predicted"] = result.answer_numeric
        trace.mark("execute", result.status)
        if result.status != STATUS_OK:
            trace.failed_stage = "execute"
            kind = "execute_timeout" if result.status == STATUS_TIMEOUT else "execute_error"
            return (
                grade(None, question.gold, failure_kind=kind,
                      question_id=question.question_id),
                trace,
            )
        if result.answer_numeric is None:
            trace.failed_stage = "execute"
            return (
                grade(None, question.gold, failure_kind="not_numeric",
                      question_id=question.question_id),
                trace,
            )

        verdict = grade(
            result.answer_numeric, question.gold, question_id=question.question_id
        )
        trace.mark("grade", "correct" if verdict.correct else "wrong_answer")
        return verdict, trace

    def _failed(
        self, question: QuestionRecord, kind: str, trace: Trace
    ) -> tuple[Verdict, Trace]:
        return (
            grade(None, question.gold, failure_kind=kind,
                  question_id=question.question_id),
            trace,
        )

    # --- batch evaluation ---

    def evaluate_set(
        self,
        questions: list[QuestionRecord],
        mode: str = MODE_TWO_STAGE,
        parallelism: int = 1,
        verdict_path: str | None = None,
        trace_dir: str | None = None,
    ) -> list[Verdict]:
        """Grade a whole question set; results follow input order."""
        if mode not in (MODE_TWO_STAGE, MODE_ONE_STAGE):
            raise ValueError(f"unknown mode {mode!r}")
        if parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        if not questions:
            raise EmptyInput("no questions to evaluate")
        run = self.run_two_stage if mode == MODE_TWO_STAGE else self.run_one_stage

        if parallelism == 1:
            outcomes = [run(q) for q in questions]
        else:
            with ThreadPoolExecutor(max_workers=parallelism) as pool:
                outcomes = list(pool.map(run, questions))

        trace_paths: list[str | None] = []
        for verdict, trace in outcomes:
            if trace_dir is None:
                trace_paths.append(None)
                continue
            os.makedirs(trace_dir, exist_ok=True)
            path = os.path.join(trace_dir, f"{verdict.question_id}.{mode}.trace.json")
            trace.write(path)
            trace_paths.append(path)

        verdicts = [v for v, _ in outcomes]
        if verdict_path is not None:
            write_verdicts(verdict_path, verdicts, mode, trace_paths)
        return verdicts

    # --- plan corpus construction ---

    def plans_from_paths(self, paths, family: str = PLAN_FROM_PROGRAM) -> list[PlanRecord]:
        """Ask the judge-side model to write a plan for each program."""
        if self.judge is None:
            raise EndpointNotConfigured("plan writing needs the judge endpoint")
        prompt = builtin_prompt(family)
        out = []
        for record in paths:
            task = TaskInput(question_text=record.question, program=record.code)
            text = build_generation_prompt(prompt, task)
            raw = self.judge.one_text([{"role": "user", "content": text}])
            try:
                plan = extract_plan(raw)
                out.append(
                    PlanRecord(
                        question_id=record.question_id,
                        question=record.question,
                        plan_text=render_plan(plan),
                        source="paths",
                        path_key=dedup_key(record.code),
                    )
                )
            except DataError as exc:
                out.append(
                    PlanRecord(
                        question_id=record.question_id,
                        question=record.question,
                        plan_text=raw,
                        source="paths",
                        path_key=dedup_key(record.code),
                        error=str(exc),
                    )
                )
        return out

    def generate_candidate_plans(self, questions: list[QuestionRecord]) -> list[PlanRecord]:
        """Sample plans from the frontal stage for preference mining."""
        if self.frontal is None:
            raise EndpointNotConfigured("candidate plans need the frontal stage")
        out = []
        for q in questions:
            texts = self.frontal.sample_texts(
                render_stage_messages(STAGE_FRONTAL, q.question)
            )
            for raw in texts:
                try:
                    plan = extract_plan(raw)
                    out.append(
                        PlanRecord(
                            question_id=q.question_id,
                            question=q.question,
                            plan_text=render_plan(plan),
                        )
                    )
                except DataError as exc:
                    out.append(
                        PlanRecord(
                            question_id=q.question_id,
                            question=q.question,
                            plan_text=raw,
                            error=str(exc),
                        )
                    )
        return out

    def score_plans(self, plans: list[PlanRecord]) -> list[PlanRecord]:
        return score_generated_plans(self.judge, plans)


def score_generated_plans(judge: Stage | None, plans: list[PlanRecord]) -> list[PlanRecord]:
    """Judge each plan against the additive rubric.

    Plans whose critique yields no parseable score are kept with an
    error marker instead of being dropped, so corpus counts stay
    auditable.
    """
    if judge is None:
        raise EndpointNotConfigured("plan scoring needs the judge endpoint")
    prompt = builtin_prompt(SCORE_PLAN)
    out = []
    for plan in plans:
        if plan.error is not None:
            out.append(plan)
            continue
        task = TaskInput(question_text=plan.question, plan=plan.plan_text)
        text = build_generation_prompt(prompt, task)
        try:
            raw = judge.one_text([{"role": "user", "content": text}])
        except _GENERATION_ERRORS as exc:
            out.append(replace(plan, error=f"judge_unavailable: {exc}"))
            continue
        try:
            score = extract_score(raw)
            out.append(replace(plan, score=score.value))
        except DataError as exc:
            out.append(replace(plan, error=f"score_unparseable: {exc}"))
    return out


# --- verdict persistence ---


def write_verdicts(
    path: str,
    verdicts: list[Verdict],
    mode: str,
    trace_paths: list[str | None] | None = None,
) -> None:
    trace_paths = trace_paths or [None] * len(verdicts)
    with open(path, "w", encoding="utf-8") as fh:
        for verdict, trace_path in zip(verdicts, trace_paths):
            fh.write(
                json.dumps(
                    {
                        "question_id": verdict.question_id,
                        "mode": mode,
                        "correct": verdict.correct,
                        "predicted": verdict.predicted,
                        "gold": verdict.gold,
                        "failure_kind": verdict.failure_kind,
                        "trace_path": trace_path,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def read_verdicts(path: str) -> list[Verdict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            out.append(
                Verdict(
                    question_id=obj["question_id"],
                    predicted=obj["predicted"],
                    gold=obj["gold"],
                    correct=obj["correct"],
                    failure_kind=obj["failure_kind"],
                )
            )
    return out


# --- improvement loop stopping rule ---


@dataclass(frozen=True)
class LoopState:
    iteration: int = 0
    history: tuple[float, ...] = ()
    epsilon: float = DEFAULT_EPSILON
    max_iterations: int = DEFAULT_MAX_ITERATIONS

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "history": list(self.history),
            "epsilon": self.epsilon,
            "max_iterations": self.max_iterations,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "LoopState":
        return cls(
            iteration=int(obj.get("iteration", 0)),
            history=tuple(float(x) for x in obj.get("history", [])),
            epsilon=float(obj.get("epsilon", DEFAULT_EPSILON)),
            max_iterations=int(obj.get("max_iterations", DEFAULT_MAX_ITERATIONS)),
        )


def active_loop_step(state: LoopState, new_accuracy: float) -> tuple[str, LoopState]:
    """Fold one round's accuracy into the loop and decide stop/continue.

    Stops when the gain over the best prior round falls below epsilon,
    or when the round cap is reached. The first round always continues
    (there is nothing to compare against).
    """
    new_state = LoopState(
        iteration=state.iteration + 1,
        history=state.history + (new_accuracy,),
        epsilon=state.epsilon,
        max_iterations=state.max_iterations,
    )
    if new_state.iteration >= state.max_iterations:
        return DECISION_STOP, new_state
    if not state.history:
        return DECISION_CONTINUE, new_state
    best_prior = max(state.history)
    if new_accuracy - best_prior < state.epsilon:
        return DECISION_STOP, new_state
    return DECISION_CONTINUE, new_state


# --- reporting ---


@dataclass(frozen=True)
class ReportRow:
    label: str
    accuracy: float
    n: int = 1
    section: str | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")
        if self.n < 1:
            raise ValueError("row needs a positive question count")


def render_report(rows: list[ReportRow], title: str | None = None) -> str:
    """Markdown accuracy table, one decimal place, grouped by section."""
    lines: list[str] = []
    if title:
        lines.append(f"# {title}")
        lines.append("")
    sentinel = object()
    current: object = sentinel
    for row in rows:
        if row.section != current:
            if current is not sentinel:
                lines.append("")
            if row.section is not None:
                lines.append(f"## {row.section}")
                lines.append("")
            lines.append("| Model | Accuracy |")
            lines.append("| --- | --- |")
            current = row.section
        lines.append(f"| {row.label} | {format_percent(row.accuracy)} |")
    return "\n".join(lines) + "\n"


def report_from_verdicts(label: str, verdicts: list[Verdict]) -> ReportRow:
    return ReportRow(label=label, accuracy=accuracy(verdicts), n=len(verdicts))


# --- configuration ---


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str | None
    config: GenerationConfig


@dataclass(frozen=True)
class RunConfig:
    endpoints: dict
    worker_cmd: tuple[str, ...] | None = None
    timeout_ms: int = 10_000
    memory_limit_mb: int = 512
    grace_ms: int = 2_000
    max_parallelism: int = 16
    max_in_flight: int = 8
    work_dir: str = "."
    cassette_path: str | None = None
    cassette_mode: str = "record"


def load_run_config(path: str) -> RunConfig:
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)

    endpoints = {}
    for name, section in (raw.get("endpoints") or {}).items():
        endpoints[name] = EndpointConfig(
            base_url=section.get("base_url"),
            config=GenerationConfig(
                model_name=section.get("model", name),
                temperature=float(section.get("temperature", 0.0)),
                n_samples=int(section.get("n_samples", 1)),
                max_tokens=int(section.get("max_tokens", 1024)),
                stop_sequences=tuple(section.get("stop", [])),
            ),
        )

    sampling = raw.get("sampling") or {}
    sandbox = raw.get("sandbox") or {}
    paths = raw.get("paths") or {}
    worker_cmd = sandbox.get("worker_cmd")
    return RunConfig(
        endpoints=endpoints,
        worker_cmd=tuple(worker_cmd) if worker_cmd else None,
        timeout_ms=int(sandbox.get("timeout_ms", 10_000)),
        memory_limit_mb=int(sandbox.get("memory_limit_mb", 512)),
        grace_ms=int(sandbox.get("grace_ms", 2_000)),
        max_parallelism=int(sandbox.get("max_parallelism", 16)),
        max_in_flight=int(sampling.get("max_in_flight", 8)),
        work_dir=paths.get("work_dir", "."),
        cassette_path=paths.get("cassette"),
        cassette_mode=paths.get("cassette_mode", "record"),
    )


def build_pipeline(
    config: RunConfig,
    cassette_path: str | None = None,
    cassette_mode: str | None = None,
) -> Pipeline:
    """Materialize gateways, cassette, and executor from a run config."""
    path = cassette_path or config.cassette_path
    mode = cassette_mode or config.cassette_mode
    cassette = Cassette.open(path, mode) if path else None

    def stage(name: str) -> Stage | None:
        endpoint = config.endpoints.get(name)
        if endpoint is None:
            return None
        gateway = Gateway(
            base_url=endpoint.base_url,
            max_in_flight=config.max_in_flight,
            cassette=cassette,
        )
        return Stage(gateway=gateway, config=endpoint.config)

    if config.worker_cmd:
        executor = SandboxController(
            worker_cmd=list(config.worker_cmd),
            grace_ms=config.grace_ms,
            max_parallelism=config.max_parallelism,
        )
    else:
        executor = LocalExecutor(max_parallelism=config.max_parallelism)

    return Pipeline(
        frontal=stage("frontal"),
        parietal=stage("parietal"),
        judge=stage("judge"),
        onestage=stage("onestage"),
        executor=executor,
        timeout_ms=config.timeout_ms,
        memory_limit_mb=config.memory_limit_mb,
    )
