"""Command-line front end for the sampling/curation/evaluation pipeline.

Subcommands mirror the data flow: sample programs, curate them, split
questions, write plans from programs, score candidate plans, mine
preference pairs, export training files, and run or evaluate the
two-stage solver. Exit codes: 2 for usage errors, 3 for infrastructure
failures (endpoints, sandbox spawn), 4 for data problems.
"""
from __future__ import annotations

import argparse
import json
import sys

from . import datasets, pipeline
from .datasets import (
    PlanRecord,
    QuestionRecord,
    ReasoningPathRecord,
    SplitSpec,
    build_preference_pairs,
    curate_paths,
    dedup_key,
    load_paths,
    load_plans,
    load_questions,
    most_frequent_paths,
    read_dpo,
    sft_example_for_code,
    sft_example_for_plan,
    split_questions,
    write_jsonl,
)
from .errors import BrainError, DataError, IncompleteRecord
from .gateway import MODE_RECORD, MODE_REPLAY
from .grading import accuracy, answers_match, format_percent
from .parsing import extract_code_block
from .pipeline import (
    LoopState,
    MODE_ONE_STAGE,
    MODE_TWO_STAGE,
    ReportRow,
    active_loop_step,
    build_pipeline,
    load_run_config,
    read_verdicts,
    render_report,
)
from .prompts import FAMILIES, PLAN_FROM_PROGRAM, STAGE_FRONTAL, render_stage_messages
from .sandbox import ExecJob


def _add_gateway_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="TOML run configuration")
    parser.add_argument("--cassette", help="request/completion cassette path")
    parser.add_argument(
        "--replay",
        nargs="?",
        const=True,
        default=None,
        metavar="CASSETTE",
        help="serve generations from the cassette (optionally named here); "
        "never touch the network",
    )


def _pipeline_from_args(args) -> pipeline.Pipeline:
    if args.config:
        config = load_run_config(args.config)
    else:
        config = pipeline.RunConfig(endpoints={})
    cassette_path = args.cassette
    if isinstance(args.replay, str):
        cassette_path = args.replay
    if args.replay and not (cassette_path or config.cassette_path):
        raise DataError("replay mode needs a cassette (--replay PATH or --cassette)")
    mode = MODE_REPLAY if args.replay else MODE_RECORD
    return build_pipeline(
        config,
        cassette_path=cassette_path,
        cassette_mode=mode if (cassette_path or args.replay) else None,
    )


# --- commands ---


def cmd_sample(args) -> int:
    pipe = _pipeline_from_args(args)
    stage = getattr(pipe, args.endpoint, None)
    if stage is None:
        raise DataError(f"endpoint {args.endpoint!r} is not configured")
    questions = load_questions(args.questions)
    records = []
    for q in questions:
        messages = render_stage_messages(STAGE_FRONTAL, q.question)
        texts = stage.sample_texts(messages)
        for idx, raw in enumerate(texts):
            try:
                code = extract_code_block(raw).source
            except DataError:
                code = raw
            predicted = None
            if code.strip():
                job = ExecJob(
                    job_id=f"{q.question_id}.{idx}",
                    code=code,
                    timeout_ms=pipe.timeout_ms,
                    memory_limit_mb=pipe.memory_limit_mb,
                )
                result = pipe.executor.execute(job)
                predicted = result.answer_numeric
            records.append(
                ReasoningPathRecord(
                    question_id=q.question_id,
                    question=q.question,
                    gold=q.gold,
                    code=code,
                    answer_numeric=predicted,
                    correct=predicted is not None and answers_match(predicted, q.gold),
                    source_model=stage.config.model_name,
                    sample_index=idx,
                )
            )
    write_jsonl(args.out, (r.to_dict() for r in records))
    print(f"wrote {len(records)} sampled paths to {args.out}")
    return 0


def cmd_curate(args) -> int:
    records = load_paths(getattr(args, "in"))
    curated = curate_paths(records)
    write_jsonl(args.out, (r.to_dict() for r in curated))
    print(f"kept {len(curated)} of {len(records)} paths")
    return 0


def cmd_split(args) -> int:
    objs = datasets.read_jsonl(getattr(args, "in"))
    ids = []
    for obj in objs:
        qid = obj.get("question_id")
        if qid is None and "question" in obj:
            qid = datasets.derive_question_id(obj["question"])
        if qid is None:
            raise IncompleteRecord("record carries no question_id or question")
        ids.append(qid)
    spec = SplitSpec(first_count=args.sft, second_count=args.dpo, seed=args.seed)
    first, second = split_questions(ids, spec)
    with open(args.out_sft, "w", encoding="utf-8") as fh:
        json.dump(first, fh, indent=0)
        fh.write("\n")
    with open(args.out_dpo, "w", encoding="utf-8") as fh:
        json.dump(second, fh, indent=0)
        fh.write("\n")
    print(f"split {len(first) + len(second)} questions into {len(first)} + {len(second)}")
    return 0


def cmd_plans(args) -> int:
    pipe = _pipeline_from_args(args)
    paths = load_paths(args.paths)
    if args.frequent:
        paths = most_frequent_paths(paths)
    plans = pipe.plans_from_paths(paths, family=args.family)
    write_jsonl(args.out, (p.to_dict() for p in plans))
    failed = sum(1 for p in plans if p.error)
    print(f"wrote {len(plans)} plans ({failed} unparsed) to {args.out}")
    return 0


def cmd_score(args) -> int:
    pipe = _pipeline_from_args(args)
    plans = load_plans(args.plans)
    scored = pipe.score_plans(plans)
    write_jsonl(args.out, (p.to_dict() for p in scored))
    unscored = sum(1 for p in scored if p.score is None)
    print(f"scored {len(scored) - unscored} of {len(scored)} plans")
    return 0


def cmd_pairs(args) -> int:
    plans = load_plans(getattr(args, "in"))
    pairs = build_preference_pairs(plans, min_margin=args.min_margin)
    write_jsonl(args.out, (p.to_dict() for p in pairs))
    print(f"built {len(pairs)} preference pairs")
    return 0


def _load_id_filter(path: str | None) -> set | None:
    if path is None:
        return None
    with open(path, encoding="utf-8") as fh:
        return set(json.load(fh))


def cmd_export_sft(args) -> int:
    keep = _load_id_filter(args.ids)
    examples = []
    if args.kind == datasets.SFT_KIND_PLAN:
        plans = load_plans(args.plans)
        for plan in plans:
            if plan.error is not None:
                continue
            if keep is not None and plan.question_id not in keep:
                continue
            examples.append(sft_example_for_plan(plan))
    else:
        if not args.paths:
            raise DataError("parietal-code export needs --paths")
        paths = load_paths(args.paths)
        plans = load_plans(args.plans)
        by_key = {(p.question_id, p.path_key): p for p in plans if p.path_key}
        by_question: dict[str, PlanRecord] = {}
        for p in plans:
            by_question.setdefault(p.question_id, p)
        for record in paths:
            if keep is not None and record.question_id not in keep:
                continue
            plan = by_key.get((record.question_id, dedup_key(record.code)))
            if plan is None:
                plan = by_question.get(record.question_id)
            if plan is None or plan.error is not None:
                continue
            examples.append(sft_example_for_code(record, plan.plan_text))
    count = datasets.export_sft(examples, args.out)
    print(f"exported {count} supervised examples to {args.out}")
    return 0


def cmd_export_dpo(args) -> int:
    pairs = read_dpo(args.pairs)
    keep = _load_id_filter(args.ids)
    if keep is not None:
        pairs = [p for p in pairs if p.question_id in keep]
    count = datasets.export_dpo(pairs, args.out)
    print(f"exported {count} preference pairs to {args.out}")
    return 0


def cmd_infer(args) -> int:
    pipe = _pipeline_from_args(args)
    gold = args.gold if args.gold is not None else float("nan")
    question = QuestionRecord(
        question_id=args.question_id, question=args.question, solution="", gold=gold
    )
    run = pipe.run_two_stage if args.mode == MODE_TWO_STAGE else pipe.run_one_stage
    verdict, _ = run(question)
    out = {"question_id": verdict.question_id, "predicted": verdict.predicted}
    if args.gold is not None:
        out["gold"] = verdict.gold
        out["correct"] = verdict.correct
    if verdict.failure_kind:
        out["failure_kind"] = verdict.failure_kind
    print(json.dumps(out, ensure_ascii=False))
    return 0


def cmd_eval(args) -> int:
    pipe = _pipeline_from_args(args)
    questions = load_questions(args.questions)
    verdicts = pipe.evaluate_set(
        questions,
        mode=args.mode,
        parallelism=args.parallelism,
        verdict_path=args.out,
        trace_dir=args.trace_dir,
    )
    correct = sum(1 for v in verdicts if v.correct)
    frac = accuracy(verdicts)
    print(f"accuracy: {format_percent(frac)} ({correct}/{len(verdicts)})")
    return 0


def cmd_loop(args) -> int:
    try:
        with open(args.state, encoding="utf-8") as fh:
            state = LoopState.from_dict(json.load(fh))
    except FileNotFoundError:
        state = LoopState(epsilon=args.epsilon, max_iterations=args.max_iterations)
    decision, state = active_loop_step(state, args.accuracy)
    with open(args.state, "w", encoding="utf-8") as fh:
        json.dump(state.to_dict(), fh, indent=2)
        fh.write("\n")
    print(decision)
    return 0


def cmd_report(args) -> int:
    rows = []
    for spec in args.row:
        label, _, value = spec.partition("=")
        if not value:
            raise DataError(f"--row needs label=value, got {spec!r}")
        try:
            frac = float(value)
            n = 1
        except ValueError:
            verdicts = read_verdicts(value)
            frac = accuracy(verdicts)
            n = len(verdicts)
        rows.append(ReportRow(label=label, accuracy=frac, n=n))
    text = render_report(rows, title=args.title)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


# --- parser wiring ---


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="brain",
        description="Plan-then-code math solver: data curation and evaluation tools.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", help="sample programs for each question")
    _add_gateway_flags(p)
    p.add_argument("--questions", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--endpoint", default="onestage",
                   choices=["onestage", "parietal", "frontal", "judge"])
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("curate", help="keep correct, deduplicated paths")
    p.add_argument("--in", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("split", help="split questions between training corpora")
    p.add_argument("--in", required=True)
    p.add_argument("--sft", type=int, required=True)
    p.add_argument("--dpo", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-sft", default="sft_ids.json")
    p.add_argument("--out-dpo", default="dpo_ids.json")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("plans", help="write plans for curated programs")
    _add_gateway_flags(p)
    p.add_argument("--paths", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--family", default=PLAN_FROM_PROGRAM, choices=list(FAMILIES))
    p.add_argument("--frequent", action="store_true",
                   help="reduce to the most frequent path per question first")
    p.set_defaults(func=cmd_plans)

    p = sub.add_parser("score", help="judge candidate plans against the rubric")
    _add_gateway_flags(p)
    p.add_argument("--plans", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("pairs", help="mine best-vs-worst preference pairs")
    p.add_argument("--in", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-margin", type=float, default=1.0)
    p.set_defaults(func=cmd_pairs)

    p = sub.add_parser("export-sft", help="write supervised training JSONL")
    p.add_argument("--kind", required=True,
                   choices=[datasets.SFT_KIND_PLAN, datasets.SFT_KIND_CODE])
    p.add_argument("--plans", required=True)
    p.add_argument("--paths", help="curated paths (required for parietal-code)")
    p.add_argument("--ids", help="JSON list restricting question ids")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_sft)

    p = sub.add_parser("export-dpo", help="write preference training JSONL")
    p.add_argument("--pairs", required=True)
    p.add_argument("--ids", help="JSON list restricting question ids")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_dpo)

    p = sub.add_parser("infer", help="answer one question")
    _add_gateway_flags(p)
    p.add_argument("--question", required=True)
    p.add_argument("--question-id", default="q0")
    p.add_argument("--gold", type=float)
    p.add_argument("--mode", default=MODE_TWO_STAGE,
                   choices=[MODE_TWO_STAGE, MODE_ONE_STAGE])
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="grade a question set")
    _add_gateway_flags(p)
    p.add_argument("--questions", required=True)
    p.add_argument("--out", required=True, help="verdict JSONL path")
    p.add_argument("--mode", default=MODE_TWO_STAGE,
                   choices=[MODE_TWO_STAGE, MODE_ONE_STAGE])
    p.add_argument("--parallelism", type=int, default=1)
    p.add_argument("--trace-dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("loop", help="advance the improvement-loop stopping rule")
    p.add_argument("--state", required=True, help="JSON state file (created if absent)")
    p.add_argument("--accuracy", type=float, required=True)
    p.add_argument("--epsilon", type=float, default=pipeline.DEFAULT_EPSILON)
    p.add_argument("--max-iterations", type=int, default=pipeline.DEFAULT_MAX_ITERATIONS)
    p.set_defaults(func=cmd_loop)

    p = sub.add_parser("report", help="render a markdown accuracy table")
    p.add_argument("--row", action="append", required=True,
                   help="label=verdicts.jsonl or label=0.740 (repeatable)")
    p.add_argument("--title")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BrainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
