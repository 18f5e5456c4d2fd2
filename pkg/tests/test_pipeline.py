"""Orchestration: staged failure handling, replay evaluation, loop, report."""
import json
import random

import pytest

import fixtures_e2e
from brain.datasets import PlanRecord, QuestionRecord, ReasoningPathRecord
from brain.errors import EmptyInput, EndpointNotConfigured
from brain.gateway import Cassette, Completion, GenerationConfig, GenerationRequest, Gateway, MODE_RECORD, MODE_REPLAY
from brain.pipeline import (
    DECISION_CONTINUE,
    DECISION_STOP,
    LoopState,
    MODE_ONE_STAGE,
    MODE_TWO_STAGE,
    Pipeline,
    ReportRow,
    Stage,
    active_loop_step,
    build_pipeline,
    load_run_config,
    read_verdicts,
    render_report,
    report_from_verdicts,
    score_generated_plans,
    write_verdicts,
)
from brain.prompts import SCORE_PLAN, TaskInput, build_generation_prompt, builtin_prompt
from brain.sandbox import LocalExecutor


@pytest.fixture(scope="module")
def cassette_path(tmp_path_factory):
    path = str(tmp_path_factory.mktemp("e2e") / "fixture.jsonl")
    fixtures_e2e.build_cassette(path)
    return path


QUESTION = QuestionRecord(
    question_id="qx", question="How many?", solution="", gold=3.0
)


def canned_stage(texts_by_prompt, config=None, default=None):
    """Stage whose gateway replays from an in-memory dict, no network."""
    config = config or GenerationConfig(model_name="canned", temperature=0.0)

    class CannedGateway(Gateway):
        def generate(self, request):
            content = request.messages[-1]["content"]
            for needle, text in texts_by_prompt.items():
                if needle in content:
                    return Completion(
                        text=text, finish_reason="stop", sample_index=request.sample_index
                    )
            if default is not None:
                return Completion(
                    text=default, finish_reason="stop", sample_index=request.sample_index
                )
            raise EndpointNotConfigured("no canned reply for this prompt")

    return Stage(gateway=CannedGateway(), config=config)


GOOD_PLAN = (
    "To solve the problem follow these steps:\n"
    "1. Count the first pile.\n"
    "2. Count the second pile and add."
)
GOOD_CODE = "Solution:\n```python\ndef solution():\n    return 1 + 2\n```"


# --- staged failure downgrades ---


def test_two_stage_happy_path():
    pipe = Pipeline(
        frontal=canned_stage({"How many?": GOOD_PLAN}),
        parietal=canned_stage({"Plan:": GOOD_CODE}),
        executor=LocalExecutor(),
    )
    verdict, trace = pipe.run_two_stage(QUESTION)
    assert verdict.correct
    assert verdict.predicted == 3.0
    assert trace.failed_stage is None
    stages = [e.stage for e in trace.events]
    assert stages == ["frontal_generate", "plan_parse", "parietal_generate", "code_extract", "execute", "grade"]


def test_trace_artifacts_carry_plan_verbatim():
    pipe = Pipeline(
        frontal=canned_stage({"How many?": GOOD_PLAN}),
        parietal=canned_stage({"Plan:": GOOD_CODE}),
        executor=LocalExecutor(),
    )
    _, trace = pipe.run_two_stage(QUESTION)
    assert trace.artifacts["plan_raw"] == GOOD_PLAN
    assert "1. Count the first pile." in trace.artifacts["parietal_prompt"]
    assert trace.artifacts["parietal_prompt"].startswith("Question: How many?")
    assert trace.artifacts["code"].startswith("def solution():")
    assert trace.artifacts["predicted"] == 3.0


def test_prose_plan_downgrades_to_plan_parse():
    pipe = Pipeline(
        frontal=canned_stage({"How many?": "Just think hard about the numbers."}),
        parietal=canned_stage({}, default=GOOD_CODE),
        executor=LocalExecutor(),
    )
    verdict, trace = pipe.run_two_stage(QUESTION)
    assert not verdict.correct
    assert verdict.failure_kind == "plan_parse"
    assert trace.failed_stage == "plan_parse"
    assert verdict.predicted is None


def test_prose_code_downgrades_to_code_extract():
    pipe = Pipeline(
        frontal=canned_stage({"How many?": GOOD_PLAN}),
        parietal=canned_stage({"Plan:": "I would rather describe the idea in words."}),
        executor=LocalExecutor(),
    )
    verdict, trace = pipe.run_two_stage(QUESTION)
    assert verdict.failure_kind == "code_extract"
    assert trace.failed_stage == "code_extract"


def test_generation_miss_downgrades_to_frontal_generate(tmp_path):
    path = str(tmp_path / "empty.jsonl")
    with open(path, "w", encoding="utf-8"):
        pass
    gateway = Gateway().with_cassette(path, MODE_REPLAY)
    pipe = Pipeline(
        frontal=Stage(gateway=gateway, config=GenerationConfig(model_name="m")),
        parietal=canned_stage({}, default=GOOD_CODE),
        executor=LocalExecutor(),
    )
    verdict, trace = pipe.run_two_stage(QUESTION)
    assert verdict.failure_kind == "frontal_generate"
    assert trace.failed_stage == "frontal_generate"


def test_runtime_error_downgrades_to_execute_error():
    crash = "Solution:\n```python\ndef solution():\n    return 1 / 0\n```"
    pipe = Pipeline(
        frontal=canned_stage({"How many?": GOOD_PLAN}),
        parietal=canned_stage({"Plan:": crash}),
        executor=LocalExecutor(),
    )
    verdict, _ = pipe.run_two_stage(QUESTION)
    assert verdict.failure_kind == "execute_error"


def test_hang_downgrades_to_execute_timeout():
    hang = "Solution:\n```python\nimport time\ndef solution():\n    time.sleep(60)\n```"
    pipe = Pipeline(
        frontal=canned_stage({"How many?": GOOD_PLAN}),
        parietal=canned_stage({"Plan:": hang}),
        executor=LocalExecutor(),
        timeout_ms=200,
    )
    verdict, _ = pipe.run_two_stage(QUESTION)
    assert verdict.failure_kind == "execute_timeout"


def test_non_numeric_return_downgrades():
    talky = "Solution:\n```python\ndef solution():\n    return 'three'\n```"
    pipe = Pipeline(
        frontal=canned_stage({"How many?": GOOD_PLAN}),
        parietal=canned_stage({"Plan:": talky}),
        executor=LocalExecutor(),
    )
    verdict, _ = pipe.run_two_stage(QUESTION)
    assert verdict.failure_kind == "not_numeric"


def test_one_stage_path():
    pipe = Pipeline(
        onestage=canned_stage({"How many?": GOOD_CODE}),
        executor=LocalExecutor(),
    )
    verdict, trace = pipe.run_one_stage(QUESTION)
    assert verdict.correct
    assert trace.mode == MODE_ONE_STAGE


def test_wrong_answer_keeps_prediction():
    code = "Solution:\n```python\ndef solution():\n    return 4\n```"
    pipe = Pipeline(
        frontal=canned_stage({"How many?": GOOD_PLAN}),
        parietal=canned_stage({"Plan:": code}),
        executor=LocalExecutor(),
    )
    verdict, _ = pipe.run_two_stage(QUESTION)
    assert not verdict.correct
    assert verdict.failure_kind == "wrong_answer"
    assert verdict.predicted == 4.0


# --- batch evaluation on the replay fixture ---


def test_replay_evaluation_accuracy(cassette_path):
    pipe = fixtures_e2e.replay_pipeline(cassette_path)
    verdicts = pipe.evaluate_set(fixtures_e2e.questions(), mode=MODE_TWO_STAGE)
    assert len(verdicts) == 20
    assert sum(v.correct for v in verdicts) == 17
    assert fixtures_e2e.expected_accuracy() == 0.85


def test_replay_is_deterministic_across_runs_and_parallelism(cassette_path, tmp_path):
    outputs = []
    for run, parallelism in ((0, 1), (1, 1), (2, 4)):
        pipe = fixtures_e2e.replay_pipeline(cassette_path)
        out = str(tmp_path / f"verdicts{run}.jsonl")
        pipe.evaluate_set(
            fixtures_e2e.questions(),
            mode=MODE_TWO_STAGE,
            parallelism=parallelism,
            verdict_path=out,
        )
        with open(out, "rb") as fh:
            outputs.append(fh.read())
    assert outputs[0] == outputs[1] == outputs[2]


def test_replay_touches_no_network(cassette_path, monkeypatch):
    monkeypatch.setenv("BRAIN_FORBID_NETWORK", "1")
    pipe = fixtures_e2e.replay_pipeline(cassette_path)
    verdicts = pipe.evaluate_set(fixtures_e2e.questions(), mode=MODE_TWO_STAGE)
    assert sum(v.correct for v in verdicts) == 17
    assert pipe.frontal.gateway.stats.network_calls == 0
    assert pipe.parietal.gateway.stats.network_calls == 0


def test_replay_failure_kinds(cassette_path):
    pipe = fixtures_e2e.replay_pipeline(cassette_path)
    verdicts = pipe.evaluate_set(fixtures_e2e.questions(), mode=MODE_TWO_STAGE)
    kinds = {v.question_id: v.failure_kind for v in verdicts if not v.correct}
    expected = {
        item.question_id: item.expected
        for item in fixtures_e2e.FIXTURE
        if item.expected != fixtures_e2e.EXPECT_CORRECT
    }
    assert kinds == expected


def test_evaluate_set_writes_traces(cassette_path, tmp_path):
    pipe = fixtures_e2e.replay_pipeline(cassette_path)
    trace_dir = str(tmp_path / "traces")
    questions = fixtures_e2e.questions()[:3]
    pipe.evaluate_set(questions, mode=MODE_TWO_STAGE, trace_dir=trace_dir)
    for q in questions:
        with open(f"{trace_dir}/{q.question_id}.two-stage.trace.json", encoding="utf-8") as fh:
            obj = json.load(fh)
        assert obj["question_id"] == q.question_id
        assert obj["artifacts"]["plan_raw"]


def test_evaluate_set_rejects_empty_and_bad_mode():
    pipe = Pipeline(executor=LocalExecutor())
    with pytest.raises(EmptyInput):
        pipe.evaluate_set([], mode=MODE_TWO_STAGE)
    with pytest.raises(ValueError):
        pipe.evaluate_set([QUESTION], mode="three-stage")


# --- verdict persistence ---


def test_verdict_round_trip(cassette_path, tmp_path):
    pipe = fixtures_e2e.replay_pipeline(cassette_path)
    verdicts = pipe.evaluate_set(fixtures_e2e.questions(), mode=MODE_TWO_STAGE)
    out = str(tmp_path / "verdicts.jsonl")
    write_verdicts(out, verdicts, MODE_TWO_STAGE)
    loaded = read_verdicts(out)
    assert [(v.question_id, v.correct, v.failure_kind) for v in loaded] == [
        (v.question_id, v.correct, v.failure_kind) for v in verdicts
    ]


# --- plan scoring through a judge cassette ---


def judge_stage_from_replies(tmp_path, plans_to_replies):
    """Record judge replies into a cassette keyed by the real prompts."""
    path = str(tmp_path / "judge.jsonl")
    with open(path, "w", encoding="utf-8"):
        pass
    cassette = Cassette.open(path, MODE_RECORD)
    config = GenerationConfig(model_name="judge-fixture", temperature=0.0)
    prompt = builtin_prompt(SCORE_PLAN)
    for plan, reply in plans_to_replies:
        task = TaskInput(question_text=plan.question, plan=plan.plan_text)
        text = build_generation_prompt(prompt, task)
        request = GenerationRequest(
            messages=({"role": "user", "content": text},), config=config, sample_index=0
        )
        cassette.record(
            request.request_key,
            {"model": config.model_name},
            [Completion(text=reply, finish_reason="stop", sample_index=0).to_dict()],
        )
    gateway = Gateway().with_cassette(path, MODE_REPLAY)
    return Stage(gateway=gateway, config=config)


def plan_record(qid, text):
    return PlanRecord(question_id=qid, question=f"Question {qid}?", plan_text=text)


def test_judge_scoring_parses_rubric_totals(tmp_path):
    critique = open("tests/fixtures/judge_critique.txt", encoding="utf-8").read()
    plans = [
        plan_record("q1", "To solve the problem follow these steps:\n1. Mix the rates."),
        plan_record("q2", "To solve the problem follow these steps:\n1. Add the buckets."),
        plan_record("q3", "To solve the problem follow these steps:\n1. Wave hands."),
    ]
    judge = judge_stage_from_replies(
        tmp_path,
        [
            (plans[0], critique),
            (plans[1], "The plan is complete and correct.\nScore: [3]"),
            (plans[2], "I cannot commit to a number for this one."),
        ],
    )
    scored = score_generated_plans(judge, plans)
    assert scored[0].score == 0.5
    assert scored[1].score == 3.0
    assert scored[2].score is None
    assert scored[2].error.startswith("score_unparseable:")


def test_judge_unavailable_marks_plans(tmp_path):
    path = str(tmp_path / "empty.jsonl")
    with open(path, "w", encoding="utf-8"):
        pass
    judge = Stage(
        gateway=Gateway().with_cassette(path, MODE_REPLAY),
        config=GenerationConfig(model_name="judge"),
    )
    scored = score_generated_plans(judge, [plan_record("q1", "1. A plan.")])
    assert scored[0].error.startswith("judge_unavailable:")


def test_scoring_skips_already_failed_plans(tmp_path):
    broken = PlanRecord(
        question_id="q1", question="Q?", plan_text="prose", error="no steps found"
    )
    judge = judge_stage_from_replies(tmp_path, [])
    assert score_generated_plans(judge, [broken]) == [broken]


def test_plans_from_paths_builds_records(tmp_path):
    record = ReasoningPathRecord(
        question_id="q1",
        question="How many marbles?",
        gold=6.0,
        code="def solution():\n    return 2 * 3\n",
        answer_numeric=6.0,
        correct=True,
    )
    reply = "Plan:\n1. Multiply the bags by marbles per bag."
    path = str(tmp_path / "writer.jsonl")
    cassette = Cassette.open(path, MODE_RECORD)
    config = GenerationConfig(model_name="judge-fixture", temperature=0.0)
    from brain.prompts import PLAN_FROM_PROGRAM

    prompt = builtin_prompt(PLAN_FROM_PROGRAM)
    task = TaskInput(question_text=record.question, program=record.code)
    text = build_generation_prompt(prompt, task)
    request = GenerationRequest(
        messages=({"role": "user", "content": text},), config=config, sample_index=0
    )
    cassette.record(
        request.request_key,
        {},
        [Completion(text=reply, finish_reason="stop", sample_index=0).to_dict()],
    )
    pipe = Pipeline(
        judge=Stage(gateway=Gateway().with_cassette(path, MODE_REPLAY), config=config),
        executor=LocalExecutor(),
    )
    plans = pipe.plans_from_paths([record])
    assert len(plans) == 1
    assert plans[0].error is None
    assert plans[0].plan_text == "1. Multiply the bags by marbles per bag."
    assert plans[0].path_key


# --- improvement loop ---


def test_loop_first_round_continues():
    decision, state = active_loop_step(LoopState(), 0.690)
    assert decision == DECISION_CONTINUE
    assert state.history == (0.690,)
    assert state.iteration == 1


def test_loop_meaningful_gain_continues():
    state = LoopState(iteration=1, history=(0.690,), epsilon=0.002)
    decision, state = active_loop_step(state, 0.719)
    assert decision == DECISION_CONTINUE


def test_loop_marginal_gain_stops():
    state = LoopState(iteration=2, history=(0.690, 0.715), epsilon=0.002)
    decision, state = active_loop_step(state, 0.716)
    assert decision == DECISION_STOP


def test_loop_regression_stops():
    state = LoopState(iteration=2, history=(0.690, 0.740), epsilon=0.001)
    decision, _ = active_loop_step(state, 0.720)
    assert decision == DECISION_STOP


def test_loop_round_cap_stops():
    state = LoopState(iteration=4, history=(0.1, 0.2, 0.3, 0.4), max_iterations=5)
    decision, new_state = active_loop_step(state, 0.9)
    assert decision == DECISION_STOP
    assert new_state.iteration == 5


def test_loop_always_terminates():
    rng = random.Random(11)
    for _ in range(200):
        state = LoopState(epsilon=0.001, max_iterations=5)
        rounds = 0
        while True:
            rounds += 1
            decision, state = active_loop_step(state, rng.random())
            if decision == DECISION_STOP:
                break
        assert rounds <= state.max_iterations


def test_loop_state_round_trips():
    state = LoopState(iteration=3, history=(0.1, 0.2, 0.3), epsilon=0.01, max_iterations=7)
    assert LoopState.from_dict(state.to_dict()) == state


# --- reporting ---


def test_report_single_row():
    text = render_report([ReportRow(label="Brain", accuracy=0.74, n=1319)])
    assert "| Brain | 74.0% |" in text
    assert "| Model | Accuracy |" in text


def test_report_progression_rows():
    rows = [
        ReportRow(label="One-stage baseline", accuracy=0.690),
        ReportRow(label="Two-stage, untuned planner", accuracy=0.719),
        ReportRow(label="Two-stage, tuned planner", accuracy=0.729),
        ReportRow(label="Two-stage, tuned planner, full set", accuracy=0.740),
    ]
    text = render_report(rows, title="Ablation")
    assert text.index("69.0%") < text.index("71.9%") < text.index("72.9%") < text.index("74.0%")
    assert text.startswith("# Ablation")


def test_report_sections_group_rows():
    rows = [
        ReportRow(label="A", accuracy=0.5, section="First"),
        ReportRow(label="B", accuracy=0.6, section="First"),
        ReportRow(label="C", accuracy=0.7, section="Second"),
    ]
    text = render_report(rows)
    assert text.count("| Model | Accuracy |") == 2
    assert "## First" in text and "## Second" in text
    assert text.index("## First") < text.index("| A |") < text.index("## Second")


def test_report_row_validation():
    with pytest.raises(ValueError):
        ReportRow(label="bad", accuracy=1.2)
    with pytest.raises(ValueError):
        ReportRow(label="bad", accuracy=0.5, n=0)


def test_report_from_verdicts_counts(cassette_path):
    pipe = fixtures_e2e.replay_pipeline(cassette_path)
    verdicts = pipe.evaluate_set(fixtures_e2e.questions(), mode=MODE_TWO_STAGE)
    row = report_from_verdicts("Replay fixture", verdicts)
    assert row.accuracy == 0.85
    assert row.n == 20


# --- config loading ---


CONFIG_TOML = """
[endpoints.frontal]
base_url = "http://localhost:8001/v1"
model = "planner-7b"
temperature = 0.7
n_samples = 4

[endpoints.parietal]
base_url = "http://localhost:8002/v1"
model = "coder-7b"

[sampling]
max_in_flight = 3

[sandbox]
timeout_ms = 4000
memory_limit_mb = 256
worker_cmd = ["python3", "-m", "brain_worker"]

[paths]
work_dir = "runs/demo"
"""


def test_run_config_loads_toml(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(CONFIG_TOML, encoding="utf-8")
    config = load_run_config(str(path))
    assert config.endpoints["frontal"].config.model_name == "planner-7b"
    assert config.endpoints["frontal"].config.n_samples == 4
    assert config.endpoints["frontal"].config.temperature == 0.7
    assert config.max_in_flight == 3
    assert config.timeout_ms == 4000
    assert config.worker_cmd == ("python3", "-m", "brain_worker")
    assert config.work_dir == "runs/demo"


def test_build_pipeline_wires_stages(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(CONFIG_TOML, encoding="utf-8")
    config = load_run_config(str(path))
    pipe = build_pipeline(config)
    assert pipe.frontal.config.model_name == "planner-7b"
    assert pipe.parietal.gateway.base_url == "http://localhost:8002/v1"
    assert pipe.judge is None
    assert pipe.timeout_ms == 4000
    assert type(pipe.executor).__name__ == "SandboxController"
    assert pipe.frontal.gateway.max_in_flight == 3


def test_build_pipeline_defaults_to_local_executor(tmp_path):
    path = tmp_path / "bare.toml"
    path.write_text("[endpoints.frontal]\nmodel = 'm'\n", encoding="utf-8")
    pipe = build_pipeline(load_run_config(str(path)))
    assert type(pipe.executor).__name__ == "LocalExecutor"
