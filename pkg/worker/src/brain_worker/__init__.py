"""Worker shim for the sandbox stdio protocol.

Reads one JSON request per stdin line:

  {"id", "code", "entrypoint", "timeout_ms"}

and answers one JSON response per line, same id, in request order:

  {"id", "status", "answer_repr", "answer_numeric",
   "stdout", "stderr", "wall_ms"}

Each job runs in a fresh child process of the shim, so a namespace,
a crash, or a blown resource limit never leaks into the next job. The
memory ceiling arrives as a spawn flag (``--memory-limit-mb=N``) and
becomes the child's address-space rlimit; the job's timeout_ms drives
both a CPU rlimit and the parent-side deadline.

Every failure is encoded as a response; the loop itself only ends when
stdin closes, and then exits 0. This is accident containment for
model-generated arithmetic code, not a defense against hostile code.
"""
from __future__ import annotations

import argparse
import io
import json
import math
import multiprocessing
import os
import sys
import tempfile
import time
from contextlib import redirect_stdout

STATUS_OK = "ok"
STATUS_ERROR = "error"
STATUS_TIMEOUT = "timeout"

DEFAULT_TIMEOUT_MS = 10_000
DEFAULT_MEMORY_LIMIT_MB = 512
DEFAULT_ENTRYPOINT = "solution"

# fork keeps child start cheap; fall back where it does not exist
try:
    _CONTEXT = multiprocessing.get_context("fork")
except ValueError:  # pragma: no cover - non-POSIX platforms
    _CONTEXT = multiprocessing.get_context()


def render_value(value) -> tuple[str, float | None]:
    """Textual form plus numeric coercion of a return value.

    Floats carry 17 significant digits so they round-trip exactly.
    """
    if isinstance(value, bool):
        text = str(value)
    elif isinstance(value, float):
        text = format(value, ".17g")
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


def _apply_limits(memory_limit_mb: int, cpu_limit_s: int) -> None:
    try:
        import resource
    except ImportError:  # pragma: no cover - non-POSIX platforms
        return
    limit_bytes = memory_limit_mb * 1024 * 1024
    for kind, limit in (
        (resource.RLIMIT_AS, limit_bytes),
        (resource.RLIMIT_CPU, cpu_limit_s),
    ):
        try:
            resource.setrlimit(kind, (limit, limit))
        except (ValueError, OSError):
            pass  # containment is best effort; the parent deadline remains


def _child_main(conn, code: str, entrypoint: str, memory_limit_mb: int, cpu_limit_s: int) -> None:
    # cut the job off from the protocol pipes before anything runs
    devnull = os.open(os.devnull, os.O_RDWR)
    os.dup2(devnull, 0)
    os.dup2(devnull, 1)
    try:
        os.chdir(tempfile.mkdtemp(prefix="brain-job-"))
    except OSError:
        pass
    _apply_limits(memory_limit_mb, cpu_limit_s)

    payload = {"status": STATUS_ERROR, "answer_repr": None, "answer_numeric": None,
               "stdout": "", "stderr": ""}
    buffer = io.StringIO()
    namespace: dict = {"__name__": "__job__"}
    try:
        with redirect_stdout(buffer):
            exec(compile(code, "<job>", "exec"), namespace)
            fn = namespace.get(entrypoint)
            if not callable(fn):
                raise NameError(f"no callable named {entrypoint!r}")
            value = fn()
    except BaseException as exc:
        payload["stderr"] = f"{type(exc).__name__}: {exc}"
    else:
        payload["status"] = STATUS_OK
        payload["answer_repr"], payload["answer_numeric"] = render_value(value)
    payload["stdout"] = buffer.getvalue()
    conn.send(payload)
    conn.close()


def execute_job(request: dict, memory_limit_mb: int) -> dict:
    job_id = request.get("id")
    code = request.get("code")
    entrypoint = request.get("entrypoint") or DEFAULT_ENTRYPOINT
    try:
        timeout_ms = int(request.get("timeout_ms") or DEFAULT_TIMEOUT_MS)
    except (TypeError, ValueError):
        timeout_ms = DEFAULT_TIMEOUT_MS
    if not isinstance(code, str) or not code.strip():
        return _response(job_id, STATUS_ERROR, stderr="request carries no code", wall_ms=0)

    cpu_limit_s = max(1, math.ceil(timeout_ms / 1000)) + 1
    parent_conn, child_conn = _CONTEXT.Pipe(duplex=False)
    started = time.monotonic()
    proc = _CONTEXT.Process(
        target=_child_main,
        args=(child_conn, code, entrypoint, memory_limit_mb, cpu_limit_s),
        daemon=True,
    )
    proc.start()
    child_conn.close()

    payload = None
    timed_out = False
    try:
        if parent_conn.poll(timeout_ms / 1000.0):
            payload = parent_conn.recv()
        else:
            timed_out = True
    except EOFError:
        payload = None  # child died before reporting
    finally:
        parent_conn.close()

    if timed_out:
        proc.kill()
    proc.join(timeout=5.0)
    if proc.is_alive():  # pragma: no cover - kill must land eventually
        proc.kill()
        proc.join()
    wall_ms = int((time.monotonic() - started) * 1000)

    if timed_out:
        return _response(
            job_id,
            STATUS_TIMEOUT,
            stderr="job exceeded its deadline",
            wall_ms=max(wall_ms, timeout_ms),
        )
    if payload is None:
        return _response(
            job_id,
            STATUS_ERROR,
            stderr=f"job process died with exit code {proc.exitcode}",
            wall_ms=wall_ms,
        )
    return _response(
        job_id,
        payload["status"],
        answer_repr=payload["answer_repr"],
        answer_numeric=payload["answer_numeric"],
        stdout=payload["stdout"],
        stderr=payload["stderr"],
        wall_ms=wall_ms,
    )


def _response(
    job_id,
    status: str,
    answer_repr=None,
    answer_numeric=None,
    stdout: str = "",
    stderr: str = "",
    wall_ms: int = 0,
) -> dict:
    if status != STATUS_OK:
        answer_numeric = None
    return {
        "id": job_id,
        "status": status,
        "answer_repr": answer_repr,
        "answer_numeric": answer_numeric,
        "stdout": stdout,
        "stderr": stderr,
        "wall_ms": wall_ms,
    }


def run_loop(stdin=None, stdout=None, memory_limit_mb: int = DEFAULT_MEMORY_LIMIT_MB) -> int:
    """Serve requests until stdin closes; every line gets a response."""
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout
    for lineno, line in enumerate(stdin, start=1):
        if not line.strip():
            continue
        try:
            request = json.loads(line)
            if not isinstance(request, dict):
                raise ValueError("request must be a JSON object")
        except (json.JSONDecodeError, ValueError) as exc:
            response = _response(
                f"malformed-{lineno}", STATUS_ERROR, stderr=f"bad request line: {exc}"
            )
        else:
            response = execute_job(request, memory_limit_mb)
        stdout.write(json.dumps(response, ensure_ascii=False) + "\n")
        stdout.flush()
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="brain-worker",
        description="Execute solution programs from stdin per the sandbox protocol.",
    )
    parser.add_argument(
        "--memory-limit-mb",
        type=int,
        default=DEFAULT_MEMORY_LIMIT_MB,
        help="address-space ceiling for each job process",
    )
    args = parser.parse_args(argv)
    return run_loop(memory_limit_mb=args.memory_limit_mb)
