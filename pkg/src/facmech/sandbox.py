"""Isolated execution of candidate mechanisms over a line protocol.

One runner process serves one mechanism. The wire format is one JSON object
per LF-terminated UTF-8 line: a handshake first, then requests
``{"id":..., "peaks":[...], "weights":[...], "k":...}`` answered by
``{"id":..., "locations":[...]}`` or ``{"id":..., "error":{"kind":...,
"message":...}}`` in any order. The host validates every response and
enforces a wall-clock budget per fitness evaluation; a runner that breaches
it is killed and never consulted again.
"""

from __future__ import annotations

import json
import math
import os
import queue
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass
from typing import Sequence

from .fitness import EvaluatorFailure, MechanismEvaluator

PROTOCOL_VERSION = 1
DEFAULT_HANDSHAKE_TIMEOUT = 5.0
DEFAULT_EVAL_BUDGET = 60.0

# Command template for external candidate code; "{source}" is replaced by
# the path of the provisioned source file.
DEFAULT_RUNNER_COMMAND = (sys.executable, "-m", "mechrunner", "--source", "{source}")

_BUILTIN_RUNNER_COMMAND = (sys.executable, "-m", "facmech", "runner", "--builtin", "{builtin}")


class SpawnError(RuntimeError):
    """Runner process failed to start or to complete the handshake."""

    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind
        self.message = message


@dataclass
class RunnerRequest:
    id: int
    peaks: list[float]
    weights: list[float]
    k: int

    def to_line(self) -> str:
        return json.dumps({"id": self.id, "peaks": self.peaks,
                           "weights": self.weights, "k": self.k},
                          separators=(",", ":"))


@dataclass
class RunnerResponse:
    id: int
    locations: list[float] | None = None
    error: dict | None = None


class RunnerHandle:
    """A live runner process plus its stdout/stderr reader threads."""

    def __init__(self, proc: subprocess.Popen, workdir: str | None = None):
        self._proc = proc
        self._workdir = workdir
        self._lines: queue.Queue = queue.Queue()
        self._stderr_chunks: list[str] = []
        self.alive = True
        self.consumed = 0.0
        self._stdout_thread = threading.Thread(target=self._pump_stdout, daemon=True)
        self._stdout_thread.start()
        self._stderr_thread = threading.Thread(target=self._pump_stderr, daemon=True)
        self._stderr_thread.start()

    def _pump_stdout(self):
        try:
            for line in self._proc.stdout:
                self._lines.put(line)
        except ValueError:
            pass
        self._lines.put(None)

    def _pump_stderr(self):
        try:
            for line in self._proc.stderr:
                self._stderr_chunks.append(line)
        except ValueError:
            pass

    def read_line(self, timeout: float) -> str | None:
        """Next stdout line, or None on EOF; raises queue.Empty on timeout."""
        return self._lines.get(timeout=timeout)

    def write_lines(self, lines: Sequence[str]) -> None:
        stdin = self._proc.stdin
        for line in lines:
            stdin.write(line + "\n")
        stdin.flush()

    def stderr_text(self) -> str:
        return "".join(self._stderr_chunks)

    def kill(self) -> None:
        self.alive = False
        if self._proc.poll() is None:
            self._proc.kill()
        self._proc.wait()

    def close(self) -> None:
        """Shut down gracefully: EOF on stdin, then kill if it lingers."""
        self.alive = False
        try:
            if self._proc.stdin and not self._proc.stdin.closed:
                self._proc.stdin.close()
        except OSError:
            pass
        try:
            self._proc.wait(timeout=2.0)
        except subprocess.TimeoutExpired:
            self._proc.kill()
            self._proc.wait()


def _runner_env(workdir: str) -> dict:
    """Minimal child environment: no inherited secrets."""
    env = {"PATH": os.environ.get("PATH", ""),
           "PYTHONIOENCODING": "utf-8",
           "HOME": workdir}
    if "PYTHONPATH" in os.environ:
        env["PYTHONPATH"] = os.environ["PYTHONPATH"]
    return env


def spawn_runner(kind: str, source_or_id: str, *,
                 runner_command: Sequence[str] | None = None,
                 handshake_timeout: float = DEFAULT_HANDSHAKE_TIMEOUT,
                 workdir: str | None = None) -> RunnerHandle:
    """Start a runner process and wait for its handshake.

    ``kind`` is "builtin" (serve a registry mechanism from this package's own
    CLI) or "external-code" (provision the source into a jail directory and
    launch the external runner command).
    """
    if workdir is None:
        workdir = tempfile.mkdtemp(prefix="facmech-runner-")
    if kind == "builtin":
        cmd = [part.replace("{builtin}", source_or_id) for part in _BUILTIN_RUNNER_COMMAND]
    elif kind == "external-code":
        source_path = os.path.join(workdir, "candidate.py")
        with open(source_path, "w", encoding="utf-8") as handle:
            handle.write(source_or_id)
        template = runner_command or DEFAULT_RUNNER_COMMAND
        cmd = [part.replace("{source}", source_path) for part in template]
    else:
        raise ValueError(f"unknown runner kind: {kind!r}")

    try:
        proc = subprocess.Popen(
            cmd, stdin=subprocess.PIPE, stdout=subprocess.PIPE, stderr=subprocess.PIPE,
            cwd=workdir, env=_runner_env(workdir), text=True, encoding="utf-8")
    except OSError as exc:
        raise SpawnError("spawn", f"cannot start runner: {exc}") from exc

    handle = RunnerHandle(proc, workdir=workdir)
    try:
        line = handle.read_line(timeout=handshake_timeout)
    except queue.Empty:
        handle.kill()
        raise SpawnError("handshake", f"no handshake within {handshake_timeout}s") from None
    if line is None:
        stderr = handle.stderr_text()[-500:]
        handle.kill()
        raise SpawnError("spawn", f"runner exited before handshake: {stderr.strip()}")
    try:
        hello = json.loads(line)
    except json.JSONDecodeError:
        handle.kill()
        raise SpawnError("handshake", f"malformed handshake line: {line!r}") from None
    if hello.get("protocol_version") != PROTOCOL_VERSION:
        handle.kill()
        raise SpawnError("protocol", f"unsupported protocol version {hello.get('protocol_version')!r}")
    if not hello.get("ready"):
        error = hello.get("error") or {}
        handle.kill()
        raise SpawnError(str(error.get("kind", "handshake")),
                         str(error.get("message", "runner reported failure")))
    return handle


def _parse_response(line: str) -> RunnerResponse:
    try:
        data = json.loads(line)
    except json.JSONDecodeError:
        raise EvaluatorFailure("protocol", f"malformed response line: {line[:200]!r}")
    ident = data.get("id")
    if not isinstance(ident, int):
        raise EvaluatorFailure("protocol", f"response without integer id: {line[:200]!r}")
    if "error" in data and data["error"] is not None:
        err = data["error"]
        return RunnerResponse(id=ident, error={"kind": str(err.get("kind", "runtime")),
                                               "message": str(err.get("message", ""))})
    return RunnerResponse(id=ident, locations=data.get("locations"))


def _check_locations(resp: RunnerResponse, k: int) -> list[float]:
    if resp.error is not None:
        raise EvaluatorFailure(resp.error["kind"],
                               f"runner error on request {resp.id}: {resp.error['message']}")
    raw = resp.locations
    if not isinstance(raw, list):
        raise EvaluatorFailure("shape", f"request {resp.id}: locations is not a list")
    try:
        values = [float(v) for v in raw]
    except (TypeError, ValueError):
        raise EvaluatorFailure("shape", f"request {resp.id}: non-numeric location")
    if len(values) != k:
        raise EvaluatorFailure("shape", f"request {resp.id}: expected {k} locations, got {len(values)}")
    for v in values:
        if not math.isfinite(v) or v < 0.0 or v > 1.0:
            raise EvaluatorFailure("range", f"request {resp.id}: location {v!r} outside [0, 1]")
    return values


def invoke_batch(handle: RunnerHandle, requests: Sequence[RunnerRequest],
                 budget: float) -> list[list[float]]:
    """Send a request batch and collect validated responses by id.

    Responses may arrive in any order. If the budget elapses before every
    request is answered, the runner is killed and all pending requests fail
    together with kind "timeout". Every response is validated before use.
    """
    if not handle.alive:
        raise EvaluatorFailure("crash", "runner is no longer alive")
    if budget <= 0:
        handle.kill()
        raise EvaluatorFailure("timeout", "evaluation budget already exhausted")

    deadline = time.monotonic() + budget
    lines = [req.to_line() for req in requests]
    writer_error: list[BaseException] = []

    def _write():
        try:
            handle.write_lines(lines)
        except (OSError, ValueError) as exc:
            writer_error.append(exc)

    writer = threading.Thread(target=_write, daemon=True)
    writer.start()

    got: dict[int, RunnerResponse] = {}
    expected = {req.id for req in requests}
    try:
        while len(got) < len(expected):
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise queue.Empty
            line = handle.read_line(timeout=remaining)
            if line is None:
                stderr = handle.stderr_text()[-500:]
                raise EvaluatorFailure("crash", f"runner exited mid-batch: {stderr.strip()}")
            line = line.strip()
            if not line:
                continue
            resp = _parse_response(line)
            if resp.id not in expected or resp.id in got:
                raise EvaluatorFailure("protocol", f"unexpected response id {resp.id}")
            got[resp.id] = resp
    except queue.Empty:
        handle.kill()
        raise EvaluatorFailure(
            "timeout", f"runner exceeded the {budget:.3f}s evaluation budget "
                       f"({len(got)}/{len(expected)} answered)") from None
    except EvaluatorFailure:
        handle.kill()
        raise
    finally:
        writer.join(timeout=1.0)
    if writer_error:
        handle.kill()
        raise EvaluatorFailure("crash", f"failed to write requests: {writer_error[0]}")

    return [_check_locations(got[req.id], req.k) for req in requests]


class ProtocolEvaluator(MechanismEvaluator):
    """MechanismEvaluator backed by a runner process.

    The wall-clock budget spans the evaluator's whole lifetime, i.e. one
    full fitness evaluation, however many batches that takes.
    """

    def __init__(self, handle: RunnerHandle, *, budget: float = DEFAULT_EVAL_BUDGET,
                 own_handle: bool = True):
        self._handle = handle
        self._budget_left = budget
        self._own_handle = own_handle
        self._next_id = 0

    def locations(self, peaks, weights, k):
        return self.locations_batch([peaks], weights, k)[0]

    def locations_batch(self, rows, weights, k):
        requests = []
        for row in rows:
            requests.append(RunnerRequest(id=self._next_id, peaks=[float(v) for v in row],
                                          weights=[float(w) for w in weights], k=k))
            self._next_id += 1
        start = time.monotonic()
        try:
            return invoke_batch(self._handle, requests, budget=self._budget_left)
        finally:
            elapsed = time.monotonic() - start
            self._budget_left -= elapsed
            self._handle.consumed += elapsed

    def close(self):
        if self._own_handle:
            self._handle.close()


def spawn_evaluator(kind: str, source_or_id: str, *, budget: float = DEFAULT_EVAL_BUDGET,
                    runner_command: Sequence[str] | None = None) -> ProtocolEvaluator:
    """Spawn a runner and wrap it as an evaluator in one step."""
    handle = spawn_runner(kind, source_or_id, runner_command=runner_command)
    return ProtocolEvaluator(handle, budget=budget)


def builtin_runner_main(ident: str, stdin=None, stdout=None) -> int:
    """Serve the wire protocol from this process using a builtin mechanism.

    A malformed request line yields an error response (id null) and the loop
    keeps serving; the process only exits when stdin closes.
    """
    from .baselines import builtin_evaluator

    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout

    def emit(payload: dict):
        stdout.write(json.dumps(payload, separators=(",", ":")) + "\n")
        stdout.flush()

    try:
        evaluator = builtin_evaluator(ident)
    except ValueError as exc:
        emit({"protocol_version": PROTOCOL_VERSION, "ready": False,
              "error": {"kind": "builtin", "message": str(exc)}})
        return 1
    emit({"protocol_version": PROTOCOL_VERSION, "ready": True})

    for line in stdin:
        line = line.strip()
        if not line:
            continue
        request_id = None
        try:
            data = json.loads(line)
            request_id = data.get("id")
            locations = evaluator.locations(data["peaks"], data["weights"], data["k"])
            emit({"id": request_id, "locations": [float(v) for v in locations]})
        except Exception as exc:  # keep serving whatever one request does
            emit({"id": request_id,
                  "error": {"kind": "runtime", "message": f"{type(exc).__name__}: {exc}"}})
    return 0
