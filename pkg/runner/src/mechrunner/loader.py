"""Loads candidate mechanism source with a restricted import surface.

Candidates are plain Python defining ``get_locations(samples)``. Only the
standard math facilities may be imported; anything touching the filesystem
or network is rejected when the module body executes. This is a guard
against buggy generated code, not a security boundary.
"""

from __future__ import annotations

import builtins as _builtins
from dataclasses import dataclass

ENTRY_NAME = "get_locations"
ALLOWED_IMPORTS = frozenset({"math", "random"})

# Builtins with obvious I/O or interactive side effects are withheld from
# the candidate namespace; imports are the main gate.
_WITHHELD_BUILTINS = frozenset({"open", "input", "breakpoint", "exit", "quit", "help"})


class CandidateError(Exception):
    """Candidate source failed to load; ``kind`` is "compile" or "entry"."""

    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind
        self.message = message


@dataclass
class CandidateModule:
    source: str
    entry: object  # the resolved get_locations callable


def _guarded_import(name, globals=None, locals=None, fromlist=(), level=0):
    root = name.split(".")[0]
    if level != 0 or root not in ALLOWED_IMPORTS:
        raise ImportError(f"import of {name!r} is not allowed in candidate code")
    return _builtins.__import__(name, globals, locals, fromlist, level)


def _candidate_builtins() -> dict:
    table = {name: value for name, value in vars(_builtins).items()
             if name not in _WITHHELD_BUILTINS}
    table["__import__"] = _guarded_import
    return table


def load_candidate(source: str) -> CandidateModule:
    """Compile and execute candidate source, resolving its entry point.

    Syntax errors and import violations surface as kind "compile"; a source
    that loads but defines no callable ``get_locations`` is kind "entry".
    """
    if not source.strip():
        raise CandidateError("compile", "candidate source is empty")
    try:
        code = compile(source, "<candidate>", "exec")
    except SyntaxError as exc:
        raise CandidateError("compile", f"syntax error: {exc}") from exc
    namespace = {"__builtins__": _candidate_builtins(), "__name__": "candidate"}
    try:
        exec(code, namespace)
    except Exception as exc:
        raise CandidateError("compile", f"{type(exc).__name__}: {exc}") from exc
    entry = namespace.get(ENTRY_NAME)
    if not callable(entry):
        raise CandidateError("entry", f"candidate defines no callable {ENTRY_NAME!r}")
    return CandidateModule(source=source, entry=entry)
