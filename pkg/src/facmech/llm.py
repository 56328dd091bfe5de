"""Prompt rendering, response parsing, and text-completion backends.

Prompting is single turn: one user message, no system message, no history.
The scripted backend replays canned responses so a whole evolution run
becomes a pure function of (seed, script); the remote backend speaks the
de-facto chat-completions HTTP interface and never logs its key.
"""

from __future__ import annotations

import json
import os
import re
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from typing import Sequence

INITIALIZATION = "initialization"
EXPLORATION = "exploration"
MODIFICATION = "modification"
PROMPT_EVOLUTION = "prompt_evolution"

MAX_RESPONSE_CHARS = 8192

_HEADER = (
    "I need help design a strategy to determine {k} facility locations in [0,1] "
    "given a list of location samples. The objective is to minimize the sum of "
    "cost values to closest facility."
)

_TEMPLATE_INSTRUCTION = (
    "First, describe your new strategy and main steps in one sentence. "
    "The description must be inside a brace. Next, implement it in Python "
    "using the following template:"
)

_FOOTER = "Do not give additional explanations and do not use additional other packages."

INITIAL_EXPLORATION_STRATEGY = (
    "Please help me create a new strategy that has a totally different form "
    "from the given ones."
)

INITIAL_MODIFICATION_STRATEGY = (
    "If total cost is less than 1, please identify the main strategy parameters "
    "and assist me in creating a new strategy that has a different parameter "
    "settings of the score function provided. Otherwise, if total cost is 1 or "
    "higher, the strategy is not `strategyproof'. Please help me revise the "
    "strategy to make it `strategyproof', which means that if any sample in the "
    "list misreports its location, the resulting locations will not be closer "
    "to the sample's true location."
)

_PROMPT_EVOLUTION_PREAMBLE = (
    "I want to leverage the capabilities of LLMs to generate heuristic algorithms "
    "that can efficiently tackle this problem. I have already developed a set of "
    "initial prompts and observed the corresponding outputs. However, to improve "
    "the effectiveness of these algorithms, we need your assistance in carefully "
    "analyzing the existing prompts and their results. Based on this analysis, we "
    "ask you to generate new prompts that will help us achieve better results in "
    "solving the problem."
)

_PROMPT_EVOLUTION_NOTE = (
    "Note that we categorize prompts into two groups: Exploration and Modification. "
    "Those I just showed are {type} prompts, which ask LLMs to generate new "
    "strategies that are as different as possible from the input strategies."
)

_PROMPT_EVOLUTION_ASK = (
    "Please help me create a new {type} prompt that has a totally different form "
    "from the given ones but can be motivated from them.\n"
    "Describe your new prompt and main steps in one sentence. The description "
    "must be inside a brace. Do not give additional explanations."
)

_CODE_TEMPLATE_TOP = """def get_locations(samples):
    '''
    Determines the optimal locations from a given list of location samples.

    Args:
    samples (list): A one-dimensional list containing the location samples."""

_CODE_TEMPLATE_BOTTOM = """
    Returns:
    list: A one-dimensional list of the optimal locations, containing n_locations elements in [0,1].
    '''

    # Placeholder (replace with your actual implementation)
    locations = ...

    return locations"""


def format_weights(weights: Sequence[float]) -> str:
    """Compact list literal, integers shown without a decimal point."""
    parts = []
    for w in weights:
        parts.append(str(int(w)) if float(w).is_integer() else repr(float(w)))
    return "[" + ",".join(parts) + "]"


def code_template(weights: Sequence[float] | None = None) -> str:
    """Candidate-code skeleton; the weighted variant embeds the weight vector."""
    if weights is None:
        return _CODE_TEMPLATE_TOP + "\n" + _CODE_TEMPLATE_BOTTOM
    weight_line = (
        f"    weights (list): A list of fixed weights assigned to the samples: "
        f"{format_weights(weights)}"
    )
    return _CODE_TEMPLATE_TOP + "\n" + weight_line + "\n" + _CODE_TEMPLATE_BOTTOM


def _require(context: dict, kind: str, *names: str):
    missing = [name for name in names if context.get(name) is None]
    if missing:
        raise ValueError(f"render({kind!r}) is missing context: {', '.join(missing)}")
    return (context[name] for name in names)


def _format_fitness(value) -> str:
    if value is None:
        return "N/A"
    value = float(value)
    return "inf" if value == float("inf") else f"{value:.5f}"


def render(kind: str, **context) -> str:
    """Render one prompt.

    Context by kind:
      initialization:    k, weights (optional)
      exploration:       k, weights, strategy, parents = [(desc, code)] * 2
      modification:      k, weights, strategy, parent = (desc, code), fitness
      prompt_evolution:  k, prompt_kind, prompts = [(text, fitness-or-None), ...]
    """
    k = context.get("k")
    if k is None:
        raise ValueError(f"render({kind!r}) is missing context: k")
    header = _HEADER.format(k=k)
    weights = context.get("weights")
    template = code_template(weights)

    if kind == INITIALIZATION:
        return "\n\n".join([header, _TEMPLATE_INSTRUCTION, template, _FOOTER])

    if kind == EXPLORATION:
        (strategy, parents) = _require(context, kind, "strategy", "parents")
        if len(parents) != 2:
            raise ValueError("exploration prompts take exactly 2 parents")
        blocks = []
        for num, (desc, code) in enumerate(parents, start=1):
            blocks.append(f"No. {num} strategy and the corresponding code are:\n{desc}\n{code}")
        body = "I have 2 existing strategies with their codes as follows:\n" + "\n\n".join(blocks)
        tail = f"{strategy}\n{_TEMPLATE_INSTRUCTION}"
        return "\n\n".join([header, body, tail, template, _FOOTER])

    if kind == MODIFICATION:
        (strategy, parent, fitness) = _require(context, kind, "strategy", "parent", "fitness")
        desc, code = parent
        body = (
            "I have one strategy with its code as follows:\n"
            f"Strategy description: {desc}\n"
            f"Code: {code}\n"
            f"Total cost: {_format_fitness(fitness)}"
        )
        tail = f"{strategy}\n{_TEMPLATE_INSTRUCTION}"
        return "\n\n".join([header, body, tail, template, _FOOTER])

    if kind == PROMPT_EVOLUTION:
        (prompt_kind, prompts) = _require(context, kind, "prompt_kind", "prompts")
        if not prompts:
            raise ValueError("prompt evolution needs at least one existing prompt")
        type_name = prompt_kind.capitalize()
        listing = []
        for num, (text, fitness) in enumerate(prompts, start=1):
            listing.append(f"No. {num} prompt:\nContent: {text}\nScore: {_format_fitness(fitness)}")
        body = (
            f"I have {len(prompts)} existing prompts with average score "
            "(the lower the better) as follows:\n" + "\n".join(listing)
        )
        note = _PROMPT_EVOLUTION_NOTE.format(type=type_name)
        ask = _PROMPT_EVOLUTION_ASK.format(type=type_name)
        return "\n\n".join([header, _PROMPT_EVOLUTION_PREAMBLE, body, note, ask])

    raise ValueError(f"unknown prompt kind: {kind!r}")


@dataclass(frozen=True)
class ParsedMechanism:
    description: str
    code: str


class ParseError(ValueError):
    """The model response could not be parsed into a mechanism."""


_FENCE_RE = re.compile(r"```[a-zA-Z0-9_+-]*[ \t]*\n(.*?)```", re.DOTALL)
_ENTRY_RE = re.compile(r"^[ \t]*def\s+get_locations\s*\(", re.MULTILINE)


def _outermost_brace(text: str) -> str | None:
    start = text.find("{")
    if start < 0:
        return None
    depth = 0
    for i in range(start, len(text)):
        if text[i] == "{":
            depth += 1
        elif text[i] == "}":
            depth -= 1
            if depth == 0:
                return text[start + 1:i]
    return None


def parse_response(text: str, *, max_chars: int = MAX_RESPONSE_CHARS) -> ParsedMechanism:
    """Extract the brace-delimited description and the code block.

    Code comes from the first fenced block, or failing that from the first
    ``get_locations`` definition through the end of the response. The
    description is searched before the code so brace characters inside the
    code cannot masquerade as one.
    """
    if len(text) > max_chars:
        raise ParseError(f"response too long ({len(text)} > {max_chars} chars)")
    fence = _FENCE_RE.search(text)
    if fence:
        code = fence.group(1).strip()
        code_start = fence.start()
    else:
        entry = _ENTRY_RE.search(text)
        if entry:
            code = text[entry.start():].strip()
            code_start = entry.start()
        else:
            code = ""
            code_start = len(text)
    description = _outermost_brace(text[:code_start])
    if not code:
        if description is None:
            raise ParseError("response has neither a brace-delimited description nor a code block")
        raise ParseError("response contains no code block")
    return ParsedMechanism(description=(description or "").strip(), code=code)


def parse_prompt_response(text: str, *, max_chars: int = MAX_RESPONSE_CHARS) -> str:
    """Extract a new prompt strategy: the brace-delimited sentence."""
    if len(text) > max_chars:
        raise ParseError(f"response too long ({len(text)} > {max_chars} chars)")
    content = _outermost_brace(text)
    if content is None or not content.strip():
        raise ParseError("response has no brace-delimited prompt")
    return content.strip()


class BackendError(Exception):
    """Completion backend failed (configuration, transport, or script)."""


class ScriptedBackend:
    """Deterministic replay backend.

    ``script`` is either an ordered list of responses consumed by a single
    cursor, or a map from prompt kind to a response list with one cursor per
    kind. Running past the end of a list is an error.
    """

    def __init__(self, script):
        if isinstance(script, dict):
            self._by_kind = {key: list(vals) for key, vals in script.items()}
            self._list = None
        else:
            self._by_kind = None
            self._list = list(script)
        self._cursors: dict[str, int] = {}
        self._cursor = 0
        self.calls = 0

    def complete(self, prompt: str, *, temperature: float = 1.0, kind: str | None = None) -> str:
        self.calls += 1
        if self._list is not None:
            if self._cursor >= len(self._list):
                raise BackendError(f"scripted backend exhausted after {len(self._list)} responses")
            response = self._list[self._cursor]
            self._cursor += 1
            return response
        if kind is None or kind not in self._by_kind:
            raise BackendError(f"scripted backend has no responses for kind {kind!r}")
        pos = self._cursors.get(kind, 0)
        responses = self._by_kind[kind]
        if pos >= len(responses):
            raise BackendError(f"scripted backend exhausted {kind!r} after {len(responses)} responses")
        self._cursors[kind] = pos + 1
        return responses[pos]


class RemoteBackend:
    """Chat-completions HTTP client with retry/backoff.

    The API key is read from an environment variable at call time and only
    ever placed in the Authorization header, never in errors or logs.
    """

    def __init__(self, base_url: str, model: str, *, api_key_env: str = "FACMECH_API_KEY",
                 temperature: float = 1.0, timeout: float = 60.0, max_retries: int = 3,
                 max_prompt_chars: int = 400_000, max_inflight: int = 4,
                 backoff_base: float = 1.0):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.temperature = temperature
        self.timeout = timeout
        self.max_retries = max_retries
        self.max_prompt_chars = max_prompt_chars
        self.backoff_base = backoff_base
        self._gate = threading.BoundedSemaphore(max_inflight)

    def complete(self, prompt: str, *, temperature: float | None = None,
                 kind: str | None = None) -> str:
        api_key = os.environ.get(self.api_key_env, "")
        if not api_key:
            raise BackendError(f"environment variable {self.api_key_env} is not set")
        if len(prompt) > self.max_prompt_chars:
            raise BackendError(f"prompt exceeds the {self.max_prompt_chars}-char cap")
        body = json.dumps({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.temperature if temperature is None else temperature,
        }).encode("utf-8")
        request = urllib.request.Request(
            self.base_url + "/chat/completions",
            data=body,
            headers={"Content-Type": "application/json",
                     "Authorization": f"Bearer {api_key}"},
            method="POST",
        )
        last_error = "no attempts made"
        for attempt in range(self.max_retries + 1):
            if attempt:
                time.sleep(self.backoff_base * 2 ** (attempt - 1))
            try:
                with self._gate:
                    with urllib.request.urlopen(request, timeout=self.timeout) as resp:
                        payload = json.loads(resp.read().decode("utf-8"))
                return payload["choices"][0]["message"]["content"]
            except urllib.error.HTTPError as exc:
                if exc.code == 429 or exc.code >= 500:
                    last_error = f"HTTP {exc.code}"
                    continue
                raise BackendError(f"chat completion failed: HTTP {exc.code}") from None
            except urllib.error.URLError as exc:
                last_error = f"transport error: {exc.reason}"
                continue
            except (KeyError, IndexError, json.JSONDecodeError, TypeError) as exc:
                raise BackendError(f"malformed completion response: {exc}") from None
        raise BackendError(f"chat completion failed after {self.max_retries + 1} attempts ({last_error})")


def backend_from_config(config: dict):
    """Build a backend from a RunConfig ``backend`` section."""
    kind = config.get("kind")
    if kind == "scripted":
        return ScriptedBackend(config["responses"])
    if kind == "remote":
        kwargs = {key: config[key] for key in
                  ("api_key_env", "temperature", "timeout", "max_retries",
                   "max_prompt_chars", "max_inflight", "backoff_base")
                  if key in config}
        return RemoteBackend(config["base_url"], config["model"], **kwargs)
    raise ValueError(f"unknown backend kind: {kind!r}")
