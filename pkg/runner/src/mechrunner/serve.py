"""Protocol loop: newline-delimited JSON requests in, responses out.

Wire format (UTF-8, LF-terminated, one JSON object per line):
  handshake:  {"protocol_version": 1, "ready": true}
              {"protocol_version": 1, "ready": false, "error": {...}}
  request:    {"id": ..., "peaks": [...], "weights": [...], "k": ...}
  response:   {"id": ..., "locations": [...]}
              {"id": ..., "error": {"kind": ..., "message": ...}}

The candidate is called with the peaks list only; weighted variants carry
their weights inside their own source, so the weights field is ignored
here. Output length and range are the host's problem: whatever the
candidate returns is passed through verbatim. One bad request never kills
the loop; a per-request watchdog stops a single call from silently eating
the host's whole evaluation budget.
"""

from __future__ import annotations

import json
import signal
import sys
from contextlib import contextmanager

from .loader import CandidateModule

PROTOCOL_VERSION = 1
DEFAULT_TIME_SLICE = 1.0


class _RequestTimeout(Exception):
    pass


@contextmanager
def _time_limit(seconds: float):
    if seconds <= 0:
        yield
        return

    def _alarm(signum, frame):
        raise _RequestTimeout()

    previous = signal.signal(signal.SIGALRM, _alarm)
    signal.setitimer(signal.ITIMER_REAL, seconds)
    try:
        yield
    finally:
        signal.setitimer(signal.ITIMER_REAL, 0.0)
        signal.signal(signal.SIGALRM, previous)


def serve(module: CandidateModule, stdin=None, stdout=None,
          time_slice: float = DEFAULT_TIME_SLICE) -> int:
    """Serve requests until stdin closes; returns the exit code."""
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout

    def emit(payload: dict):
        stdout.write(json.dumps(payload, separators=(",", ":")) + "\n")
        stdout.flush()

    emit({"protocol_version": PROTOCOL_VERSION, "ready": True})
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        request_id = None
        try:
            request = json.loads(line)
            request_id = request.get("id")
            peaks = [float(v) for v in request["peaks"]]
            with _time_limit(time_slice):
                result = module.entry(peaks)
            emit({"id": request_id, "locations": [float(v) for v in result]})
        except _RequestTimeout:
            emit({"id": request_id,
                  "error": {"kind": "timeout",
                            "message": f"request exceeded the {time_slice}s slice"}})
        except Exception as exc:
            emit({"id": request_id,
                  "error": {"kind": "runtime",
                            "message": f"{type(exc).__name__}: {exc}"}})
    return 0


def emit_failed_handshake(kind: str, message: str, stdout=None) -> None:
    stdout = stdout if stdout is not None else sys.stdout
    stdout.write(json.dumps({
        "protocol_version": PROTOCOL_VERSION,
        "ready": False,
        "error": {"kind": kind, "message": message},
    }, separators=(",", ":")) + "\n")
    stdout.flush()
