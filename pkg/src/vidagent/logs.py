"""JSON Lines records for trajectories, rewards and advantage reports."""

from __future__ import annotations

import json
import threading
from pathlib import Path
from typing import IO, Any, Iterator

from vidagent.environment import EpisodeRecord, FrameSet
from vidagent.protocol import Step, Thought, Trajectory, action_from_json, action_to_json

SCHEMA_VERSION = 1


def dumps(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def step_to_json(step: Step) -> dict[str, Any]:
    return {
        "frames": step.frames.indices if step.frames is not None else [],
        "thought": step.thought.text if step.thought is not None else None,
        "action": action_to_json(step.action),
        "error": step.error,
        "raw": step.raw,
        "observation": step.observation,
    }


def episode_to_record(
    episode: EpisodeRecord,
    question_id: str,
    rollout_index: int = 0,
    **extra: Any,
) -> dict[str, Any]:
    traj = episode.trajectory
    rec: dict[str, Any] = {
        "kind": "trajectory",
        "schema_version": SCHEMA_VERSION,
        "question_id": question_id,
        "rollout_index": rollout_index,
        "video_id": episode.video_id,
        "question": episode.question,
        "steps": [step_to_json(s) for s in traj.steps],
        "format_valid": traj.format_valid,
        "diagnostics": list(traj.diagnostics),
        "max_tool_calls": traj.max_tool_calls,
        "tool_calls": traj.tool_calls,
        "frames_consumed": episode.frames_consumed,
        "answer": episode.answer,
    }
    if any(lp is not None for lp in episode.logprobs):
        rec["logprobs"] = [list(lp) if lp is not None else None for lp in episode.logprobs]
    rec.update(extra)
    return rec


def trajectory_from_record(rec: dict[str, Any]) -> Trajectory:
    steps = []
    for s in rec["steps"]:
        steps.append(
            Step(
                frames=FrameSet(tuple((int(i), None) for i in s.get("frames", []))),
                thought=Thought(s["thought"]) if s.get("thought") is not None else None,
                action=action_from_json(s.get("action")),
                error=s.get("error"),
                raw=s.get("raw"),
                observation=s.get("observation"),
            )
        )
    return Trajectory(tuple(steps), max_tool_calls=rec.get("max_tool_calls"))


def read_jsonl(path: str | Path) -> Iterator[tuple[int, dict[str, Any] | Exception]]:
    """Yield (line number, parsed object or the parse error). Blank lines skipped."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ValueError("line is not a JSON object")
            except ValueError as exc:
                yield lineno, exc
                continue
            yield lineno, obj


class JsonlWriter:
    """Serializes writes from many workers onto one stream."""

    def __init__(self, fh: IO[str]):
        self.fh = fh
        self._lock = threading.Lock()
        self.count = 0

    def write(self, obj: dict[str, Any]) -> None:
        line = dumps(obj) + "\n"
        with self._lock:
            self.fh.write(line)
            self.fh.flush()
            self.count += 1
