"""Turn grammar for the frame-extraction agent.

A turn is ``<think>...</think>`` followed by exactly one action block, either
``<tool_call>frame_extraction_tool(start, end)</tool_call>`` or
``<answer>...</answer>``. Text outside recognized tags is ignored.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Union

if TYPE_CHECKING:
    from vidagent.environment import FrameSet

TOOL_NAME = "frame_extraction_tool"
TAG_NAMES = ("think", "tool_call", "answer")
_TAG_RE = re.compile(r"<(/?)(think|tool_call|answer)>")
_RESERVED = tuple(f"<{c}{t}>" for t in TAG_NAMES for c in ("", "/"))

_INT = r"\+?[0-9]+"
_POSITIONAL_RE = re.compile(
    rf"^{TOOL_NAME}\s*\(\s*({_INT})\s*,\s*({_INT})\s*\)$", re.ASCII
)
_KEYWORD_RE = re.compile(
    rf"^{TOOL_NAME}\s*\(\s*(?:idx_)?start(?:_idx)?\s*=\s*({_INT})\s*,"
    rf"\s*(?:idx_)?end(?:_idx)?\s*=\s*({_INT})\s*\)$",
    re.ASCII,
)


class FormatError(ValueError):
    """A turn that violates the tag grammar. Always counts against g_fmt."""

    code = "format_error"


class MissingThink(FormatError):
    code = "missing_think"


class MissingAction(FormatError):
    code = "missing_action"


class MalformedToolCall(FormatError):
    code = "malformed_tool_call"


class MultipleActions(FormatError):
    code = "multiple_actions"


class MalformedTags(FormatError):
    """Unclosed, nested, stray, duplicated or misordered tags."""

    code = "malformed_tags"


def _check_free_text(text: str, what: str) -> None:
    for tok in _RESERVED:
        if tok in text:
            raise ValueError(f"{what} may not contain the tag {tok!r}")


@dataclass(frozen=True)
class Thought:
    text: str

    def __post_init__(self) -> None:
        _check_free_text(self.text, "thought")


@dataclass(frozen=True)
class FrameInterval:
    start: int
    end: int

    def __post_init__(self) -> None:
        if self.start < 0 or self.end < 0:
            raise ValueError("frame indices must be non-negative")
        if self.start > self.end:
            raise ValueError(f"inverted interval ({self.start}, {self.end})")

    @property
    def width(self) -> int:
        return self.end - self.start + 1


@dataclass(frozen=True)
class FrameExtraction:
    interval: FrameInterval

    @property
    def start(self) -> int:
        return self.interval.start

    @property
    def end(self) -> int:
        return self.interval.end


@dataclass(frozen=True)
class OutputAnswer:
    text: str

    def __post_init__(self) -> None:
        _check_free_text(self.text, "answer")


Action = Union[FrameExtraction, OutputAnswer]


def _parse_tool_body(body: str) -> FrameExtraction:
    body = body.strip()
    m = _POSITIONAL_RE.match(body) or _KEYWORD_RE.match(body)
    if m:
        start, end = int(m.group(1)), int(m.group(2))
    else:
        start, end = _parse_json_call(body)
    if start > end:
        raise MalformedToolCall(f"inverted interval ({start}, {end})")
    return FrameExtraction(FrameInterval(start, end))


def _parse_json_call(body: str) -> tuple[int, int]:
    # {"name": "frame_extraction_tool", "arguments": {"start": 3, "end": 9}}
    try:
        obj = json.loads(body)
    except (ValueError, RecursionError):
        raise MalformedToolCall(f"unparseable tool call {body[:80]!r}") from None
    if not isinstance(obj, dict) or obj.get("name") != TOOL_NAME:
        raise MalformedToolCall(f"unknown tool call {body[:80]!r}")
    args = obj.get("arguments")
    if isinstance(args, list) and len(args) == 2:
        vals = args
    elif isinstance(args, dict):
        vals = [
            next((args[k] for k in keys if k in args), None)
            for keys in (("start", "idx_start", "start_idx"), ("end", "idx_end", "end_idx"))
        ]
    else:
        raise MalformedToolCall("tool call arguments must be a pair")
    if not all(type(v) is int and v >= 0 for v in vals):
        raise MalformedToolCall(f"non-integer or negative indices {vals!r}")
    return vals[0], vals[1]


def parse_turn(raw: str | bytes) -> tuple[Thought, Action]:
    """Parse one model turn into its thought and action.

    Raises a :class:`FormatError` subclass for any grammar violation; never
    raises anything else.
    """
    if isinstance(raw, bytes):
        raw = raw.decode("utf-8", errors="replace")
    blocks: list[tuple[str, str]] = []
    open_tag: str | None = None
    open_at = 0
    for m in _TAG_RE.finditer(raw):
        closing, name = m.group(1) == "/", m.group(2)
        if open_tag is None:
            if closing:
                raise MalformedTags(f"stray </{name}>")
            open_tag, open_at = name, m.end()
        elif closing and name == open_tag:
            blocks.append((name, raw[open_at:m.start()]))
            open_tag = None
        elif open_tag == "tool_call":
            raise MalformedToolCall(f"<{m.group(1)}{name}> inside tool_call")
        else:
            raise MalformedTags(f"<{m.group(1)}{name}> inside <{open_tag}>")
    if open_tag is not None:
        raise MalformedTags(f"unclosed <{open_tag}>")

    thinks = [b for b in blocks if b[0] == "think"]
    actions = [b for b in blocks if b[0] != "think"]
    if not thinks:
        raise MissingThink("no <think> block")
    if len(thinks) > 1:
        raise MalformedTags("more than one <think> block")
    if not actions:
        raise MissingAction("neither <tool_call> nor <answer> present")
    if len(actions) > 1:
        raise MultipleActions(f"{len(actions)} action blocks in one turn")
    if blocks[0][0] != "think":
        raise MalformedTags("<think> must precede the action")

    thought = Thought(thinks[0][1])
    kind, body = actions[0]
    if kind == "answer":
        return thought, OutputAnswer(body)
    return thought, _parse_tool_body(body)


def serialize_action(action: Action) -> str:
    if isinstance(action, OutputAnswer):
        return f"<answer>{action.text}</answer>"
    return f"<tool_call>{TOOL_NAME}({action.start}, {action.end})</tool_call>"


def serialize_turn(thought: Thought, action: Action) -> str:
    return f"<think>{thought.text}</think>{serialize_action(action)}"


@dataclass(frozen=True)
class Step:
    """One (frames, thought, action) triplet.

    A turn that failed to parse keeps ``thought``/``action`` as None and
    records the error code in ``error``.
    """

    frames: FrameSet | None = None
    thought: Thought | None = None
    action: Action | None = None
    error: str | None = None
    raw: str | None = None
    observation: str | None = None

    @property
    def parsed(self) -> bool:
        return self.error is None and self.action is not None


def trajectory_diagnostics(steps: list[Step] | tuple[Step, ...], max_tool_calls: int | None = None) -> list[str]:
    """Every reason the step sequence is format-invalid; empty when valid."""
    reasons: list[str] = []
    if not steps:
        return ["empty_trajectory"]
    prev: Action | None = None
    tool_calls = 0
    for i, step in enumerate(steps):
        if not step.parsed:
            reasons.append(f"step {i}: parse error {step.error or 'missing_action'}")
            prev = None
            continue
        if i < len(steps) - 1 and isinstance(step.action, OutputAnswer):
            reasons.append(f"step {i}: step follows terminal answer")
        if isinstance(step.action, FrameExtraction):
            tool_calls += 1
            if isinstance(prev, FrameExtraction) and prev.interval == step.action.interval:
                reasons.append(
                    f"step {i}: redundant interval ({step.action.start}, {step.action.end})"
                )
        prev = step.action
    if max_tool_calls is not None and tool_calls > max_tool_calls:
        reasons.append(f"tool budget exceeded: {tool_calls} > {max_tool_calls}")
    if not isinstance(steps[-1].action, OutputAnswer):
        reasons.append("no terminal answer")
    return reasons


def validate_trajectory(traj: Trajectory | list[Step], max_tool_calls: int | None = None) -> bool:
    """The format gate g_fmt."""
    steps = traj.steps if isinstance(traj, Trajectory) else traj
    if max_tool_calls is None and isinstance(traj, Trajectory):
        max_tool_calls = traj.max_tool_calls
    return not trajectory_diagnostics(steps, max_tool_calls)


@dataclass(frozen=True)
class Trajectory:
    steps: tuple[Step, ...]
    max_tool_calls: int | None = None
    format_valid: bool = field(init=False)
    diagnostics: tuple[str, ...] = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))
        diag = trajectory_diagnostics(self.steps, self.max_tool_calls)
        object.__setattr__(self, "diagnostics", tuple(diag))
        object.__setattr__(self, "format_valid", not diag)

    @property
    def actions(self) -> list[Action | None]:
        return [s.action for s in self.steps]

    @property
    def tool_calls(self) -> int:
        return sum(isinstance(s.action, FrameExtraction) for s in self.steps)

    @property
    def complete(self) -> bool:
        return bool(self.steps) and isinstance(self.steps[-1].action, OutputAnswer)

    @property
    def answer(self) -> str | None:
        return self.steps[-1].action.text if self.complete else None


def action_to_json(action: Action | None) -> dict[str, Any] | None:
    if action is None:
        return None
    if isinstance(action, OutputAnswer):
        return {"type": "answer", "text": action.text}
    return {"type": "frame_extraction", "start": action.start, "end": action.end}


def action_from_json(obj: dict[str, Any] | None) -> Action | None:
    if obj is None:
        return None
    if obj["type"] == "answer":
        return OutputAnswer(obj["text"])
    if obj["type"] == "frame_extraction":
        return FrameExtraction(FrameInterval(int(obj["start"]), int(obj["end"])))
    raise ValueError(f"unknown action type {obj['type']!r}")
