"""Untrusted-code execution: isolated worker processes plus a local stub.

Generated programs run in a separate worker process, one fresh process
per job, talking JSON-Lines over stdin/stdout:

  request:  {"id", "code", "entrypoint", "timeout_ms"}
  response: {"id", "status", "answer_repr", "answer_numeric",
             "stdout", "stderr", "wall_ms"}

The answer of a job is the value returned by the entrypoint function,
not anything printed. The memory ceiling travels as a worker spawn flag
(``--memory-limit-mb=N``) rather than a request field, keeping the wire
schema stable.

The controller enforces a hard deadline of timeout_ms plus a grace
window; a worker that blows through it is killed and the job reported
as a timeout. ``LocalExecutor`` runs code in-process with the same
result contract and exists only for trusted fixture code in tests and
offline replays.
"""
from __future__ import annotations

import io
import json
import math
import subprocess
import sys
import threading
import time
import traceback
from contextlib import redirect_stdout
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from .errors import WorkerPoolExhausted, WorkerSpawnFailure

STATUS_OK = "ok"
STATUS_ERROR = "error"
STATUS_TIMEOUT = "timeout"
STATUSES = (STATUS_OK, STATUS_ERROR, STATUS_TIMEOUT)

DEFAULT_TIMEOUT_MS = 10_000
DEFAULT_MEMORY_LIMIT_MB = 512
DEFAULT_ENTRYPOINT = "solution"


@dataclass(frozen=True)
class ExecJob:
    job_id: str
    code: str
    entrypoint: str = DEFAULT_ENTRYPOINT
    timeout_ms: int = DEFAULT_TIMEOUT_MS
    memory_limit_mb: int = DEFAULT_MEMORY_LIMIT_MB

    def __post_init__(self) -> None:
        if not self.code.strip():
            raise ValueError("job code must not be empty")
        if self.timeout_ms < 100:
            raise ValueError("timeout_ms must be at least 100")
        if self.memory_limit_mb < 1:
            raise ValueError("memory_limit_mb must be positive")

    def to_wire(self) -> dict:
        return {
            "id": self.job_id,
            "code": self.code,
            "entrypoint": self.entrypoint,
            "timeout_ms": self.timeout_ms,
        }


@dataclass(frozen=True)
class ExecResult:
    job_id: str
    status: str
    answer_repr: str | None = None
    answer_numeric: float | None = None
    stdout: str = ""
    stderr: str = ""
    wall_ms: int = 0

    def __post_init__(self) -> None:
        if self.status not in STATUSES:
            raise ValueError(f"unknown status {self.status!r}")
        if self.status == STATUS_OK and self.answer_repr is None:
            raise ValueError("ok result requires answer_repr")
        if self.status != STATUS_OK and self.answer_numeric is not None:
            raise ValueError("non-ok result cannot carry a numeric answer")


def coerce_answer(value) -> tuple[str, float | None]:
    """Stringify an entrypoint return value and try a numeric reading.

    Floats use 17 significant digits so round-tripping is lossless.
    Non-finite values carry no numeric reading: the wire field is an
    optional real and NaN/inf would also poison strict JSON output.
    """
    if isinstance(value, bool):
        return str(value), float(value)
    if isinstance(value, float):
        text = format(value, ".17g")
    elif isinstance(value, int):
        text = str(value)
    else:
        text = str(value)
    try:
        numeric = float(value)
    except (TypeError, ValueError):
        numeric = None
    else:
        if not math.isfinite(numeric):
            numeric = None
    return text, numeric


def result_from_wire(obj: dict, expected_id: str) -> ExecResult:
    if obj.get("id") != expected_id:
        return ExecResult(
            job_id=expected_id,
            status=STATUS_ERROR,
            answer_repr=None,
            answer_numeric=None,
            stdout="",
            stderr=f"response id {obj.get('id')!r} does not match request",
            wall_ms=int(obj.get("wall_ms", 0)),
        )
    status = obj.get("status", STATUS_ERROR)
    if status not in STATUSES:
        status = STATUS_ERROR
    numeric = obj.get("answer_numeric")
    if numeric is not None:
        try:
            numeric = float(numeric)
        except (TypeError, ValueError):
            numeric = None
        else:
            if not math.isfinite(numeric):
                numeric = None
    return ExecResult(
        job_id=expected_id,
        status=status,
        answer_repr=obj.get("answer_repr"),
        answer_numeric=numeric if status == STATUS_OK else None,
        stdout=obj.get("stdout", ""),
        stderr=obj.get("stderr", ""),
        wall_ms=int(obj.get("wall_ms", 0)),
    )


class SandboxController:
    """Runs jobs through worker subprocesses, one fresh process each.

    worker_cmd is the argv prefix that starts a worker (for example
    ["python3", "-m", "brain_worker"]). A memory flag derived from the
    job is appended at spawn time.
    """

    def __init__(
        self,
        worker_cmd: list[str],
        grace_ms: int = 2_000,
        max_parallelism: int = 16,
    ):
        if not worker_cmd:
            raise ValueError("worker_cmd must not be empty")
        self.worker_cmd = list(worker_cmd)
        self.grace_ms = grace_ms
        self.max_parallelism = max_parallelism

    def execute(self, job: ExecJob) -> ExecResult:
        argv = self.worker_cmd + [f"--memory-limit-mb={job.memory_limit_mb}"]
        started = time.monotonic()
        try:
            proc = subprocess.Popen(
                argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                text=True,
            )
        except OSError as exc:
            raise WorkerSpawnFailure(f"cannot spawn worker {argv[0]!r}: {exc}") from exc

        request_line = json.dumps(job.to_wire(), ensure_ascii=False) + "\n"
        deadline_s = (job.timeout_ms + self.grace_ms) / 1000.0
        try:
            out, err = proc.communicate(input=request_line, timeout=deadline_s)
        except subprocess.TimeoutExpired:
            proc.kill()
            out, err = proc.communicate()
            wall_ms = int((time.monotonic() - started) * 1000)
            return ExecResult(
                job_id=job.job_id,
                status=STATUS_TIMEOUT,
                answer_repr=None,
                answer_numeric=None,
                stdout="",
                stderr="worker killed after deadline",
                wall_ms=max(wall_ms, job.timeout_ms),
            )
        except BrokenPipeError:
            proc.kill()
            out, err = "", "worker closed its pipe before reading the job"

        wall_ms = int((time.monotonic() - started) * 1000)
        for line in (out or "").splitlines():
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError:
                continue
            if isinstance(obj, dict):
                return result_from_wire(obj, job.job_id)
        return ExecResult(
            job_id=job.job_id,
            status=STATUS_ERROR,
            answer_repr=None,
            answer_numeric=None,
            stdout="",
            stderr=(err or "").strip() or "worker exited without a response",
            wall_ms=wall_ms,
        )

    def execute_batch(self, jobs: list[ExecJob], parallelism: int = 1) -> list[ExecResult]:
        """Run jobs with bounded parallelism; results keep job order."""
        if not jobs:
            return []
        if parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        if parallelism > self.max_parallelism:
            raise WorkerPoolExhausted(
                f"parallelism {parallelism} exceeds cap {self.max_parallelism}"
            )
        if parallelism == 1:
            return [self.execute(job) for job in jobs]
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            return list(pool.map(self.execute, jobs))


class LocalExecutor:
    """In-process executor for trusted code only.

    No memory limits and only a best-effort timeout (the worker thread
    is abandoned, not killed). Never feed it generated programs; it
    exists so replay-mode runs and tests need no subprocess machinery.
    """

    def __init__(self, max_parallelism: int = 16):
        self.max_parallelism = max_parallelism

    def execute(self, job: ExecJob) -> ExecResult:
        started = time.monotonic()
        outcome: dict = {}

        def run() -> None:
            buffer = io.StringIO()
            namespace: dict = {}
            try:
                with redirect_stdout(buffer):
                    exec(compile(job.code, "<job>", "exec"), namespace)
                    fn = namespace.get(job.entrypoint)
                    if not callable(fn):
                        raise NameError(f"no callable named {job.entrypoint!r}")
                    value = fn()
            except BaseException:
                outcome["error"] = traceback.format_exc()
                outcome["stdout"] = buffer.getvalue()
                return
            outcome["value"] = value
            outcome["stdout"] = buffer.getvalue()

        thread = threading.Thread(target=run, daemon=True)
        thread.start()
        thread.join(timeout=job.timeout_ms / 1000.0)
        wall_ms = int((time.monotonic() - started) * 1000)

        if thread.is_alive():
            return ExecResult(
                job_id=job.job_id,
                status=STATUS_TIMEOUT,
                answer_repr=None,
                answer_numeric=None,
                stdout="",
                stderr="job exceeded its deadline",
                wall_ms=max(wall_ms, job.timeout_ms),
            )
        if "error" in outcome:
            return ExecResult(
                job_id=job.job_id,
                status=STATUS_ERROR,
                answer_repr=None,
                answer_numeric=None,
                stdout=outcome.get("stdout", ""),
                stderr=outcome["error"],
                wall_ms=wall_ms,
            )
        answer_repr, answer_numeric = coerce_answer(outcome.get("value"))
        return ExecResult(
            job_id=job.job_id,
            status=STATUS_OK,
            answer_repr=answer_repr,
            answer_numeric=answer_numeric,
            stdout=outcome.get("stdout", ""),
            stderr="",
            wall_ms=wall_ms,
        )

    def execute_batch(self, jobs: list[ExecJob], parallelism: int = 1) -> list[ExecResult]:
        if not jobs:
            return []
        if parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        if parallelism > self.max_parallelism:
            raise WorkerPoolExhausted(
                f"parallelism {parallelism} exceeds cap {self.max_parallelism}"
            )
        if parallelism == 1:
            return [self.execute(job) for job in jobs]
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            return list(pool.map(self.execute, jobs))


def worker_command_for_module(module: str = "brain_worker") -> list[str]:
    """Default argv to launch a worker implementing the wire protocol."""
    return [sys.executable, "-m", module]
