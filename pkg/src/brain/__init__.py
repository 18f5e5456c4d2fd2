"""Two-stage plan-then-code solver for grade-school math word problems.

A planner model drafts numbered solution steps, a coder model turns
question plus plan into a Python program, a sandbox executes it, and
the returned value is graded against the gold answer. The package also
carries the data machinery around that loop: sampling campaigns,
correctness filtering and deduplication, plan scoring, preference-pair
mining, and training-file export.
"""
from .errors import BrainError, DataError, InfrastructureError
from .gateway import Cassette, Completion, GenerationConfig, GenerationRequest, Gateway
from .grading import Verdict, accuracy, answers_match, format_percent, grade
from .parsing import (
    extract_code_block,
    extract_gold_answer,
    extract_plan,
    extract_score,
    normalize_numeric,
    render_plan,
)
from .pipeline import Pipeline, active_loop_step, build_pipeline, load_run_config
from .sandbox import ExecJob, ExecResult, LocalExecutor, SandboxController

__version__ = "0.1.0"

__all__ = [
    "BrainError",
    "Cassette",
    "Completion",
    "DataError",
    "ExecJob",
    "ExecResult",
    "GenerationConfig",
    "GenerationRequest",
    "Gateway",
    "InfrastructureError",
    "LocalExecutor",
    "Pipeline",
    "SandboxController",
    "Verdict",
    "accuracy",
    "active_loop_step",
    "answers_match",
    "build_pipeline",
    "extract_code_block",
    "extract_gold_answer",
    "extract_plan",
    "extract_score",
    "format_percent",
    "grade",
    "load_run_config",
    "normalize_numeric",
    "render_plan",
    "__version__",
]
