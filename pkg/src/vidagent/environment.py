"""Indexed frame store, the frame-extraction tool, and the episode loop."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Sequence

from vidagent.assets import load_asset
from vidagent.policy import Message, Policy, PolicyError, PolicyTurnRequest
from vidagent.protocol import (
    FormatError,
    FrameExtraction,
    FrameInterval,
    OutputAnswer,
    Step,
    Trajectory,
    parse_turn,
)

log = logging.getLogger(__name__)

TOOL_ERROR_PREFIX = "TOOL_ERROR: "


class EmptyWindow(ValueError):
    """The requested interval lies entirely past the last frame."""


def stub_frame(idx: int) -> str:
    return f"frame_{idx}"


@dataclass(frozen=True)
class VideoHandle:
    video_id: str
    frame_count: int
    frame_source: Callable[[int], Any] = stub_frame

    def __post_init__(self) -> None:
        if self.frame_count < 1:
            raise ValueError(f"video {self.video_id!r} has no frames")

    def frame(self, idx: int) -> Any:
        if not 0 <= idx < self.frame_count:
            raise IndexError(f"frame {idx} outside [0, {self.frame_count - 1}]")
        return self.frame_source(idx)


@dataclass(frozen=True)
class FrameSet:
    entries: tuple[tuple[int, Any], ...] = ()

    def __post_init__(self) -> None:
        idx = [i for i, _ in self.entries]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("frame indices must be strictly increasing")

    @property
    def indices(self) -> list[int]:
        return [i for i, _ in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[tuple[int, Any]]:
        return iter(self.entries)


@dataclass(frozen=True)
class EpisodeConfig:
    k_initial: int = 8
    k_per_call: int = 8
    max_tool_calls: int = 6

    def __post_init__(self) -> None:
        if self.k_initial < 1 or self.k_per_call < 1 or self.max_tool_calls < 0:
            raise ValueError(f"invalid episode config {self}")


@dataclass(frozen=True)
class EpisodeRecord:
    video_id: str
    question: str
    trajectory: Trajectory
    frames_consumed: int
    answer: str | None
    logprobs: tuple[tuple[float, ...] | None, ...] = field(default=())


def _round_half_up_div(num: int, den: int) -> int:
    return (2 * num + den) // (2 * den)


def uniform_indices(lo: int, hi: int, k: int) -> list[int]:
    """k indices spread over [lo, hi] with round-half-up spacing, deduplicated."""
    if k < 1:
        raise ValueError("k must be >= 1")
    span = hi - lo
    if k == 1 or span == 0:
        return [lo]
    out: list[int] = []
    for i in range(k):
        idx = lo + _round_half_up_div(i * span, k - 1)
        if not out or idx != out[-1]:
            out.append(idx)
    return out


def _frameset(video: VideoHandle, indices: Iterable[int]) -> FrameSet:
    return FrameSet(tuple((i, video.frame(i)) for i in indices))


def initial_context(video: VideoHandle, k: int) -> FrameSet:
    return _frameset(video, uniform_indices(0, video.frame_count - 1, k))


def extract_frames(video: VideoHandle, interval: FrameInterval, k: int) -> FrameSet:
    last = video.frame_count - 1
    if interval.start > last:
        raise EmptyWindow(
            f"empty window: requested ({interval.start}, {interval.end}) "
            f"but valid frame indices are 0..{last}"
        )
    return _frameset(video, uniform_indices(interval.start, min(interval.end, last), k))


def _tool_observation(interval: FrameInterval, frames: FrameSet) -> str:
    return (
        f"frame_extraction_tool({interval.start}, {interval.end}) returned "
        f"{len(frames)} frames"
    )


def run_episode(
    video: VideoHandle,
    question: str,
    policy: Policy,
    config: EpisodeConfig | None = None,
    system_prompt: str | None = None,
) -> EpisodeRecord:
    """Drive one question to an answer, a format error, or the tool budget.

    Transport failures from the policy propagate; such an episode has no
    record and must not be scored.
    """
    config = config or EpisodeConfig()
    if system_prompt is None:
        system_prompt = load_asset("system_prompt_v1.txt")
    system_prompt = system_prompt.replace("{max_tool_calls}", str(config.max_tool_calls))
    frames = initial_context(video, config.k_initial)
    conversation = [
        Message("system", system_prompt),
        Message("user", question, frames),
    ]
    steps: list[Step] = []
    logprobs: list[tuple[float, ...] | None] = []
    consumed = len(frames)
    prev: FrameExtraction | None = None
    tool_calls = 0

    while True:
        resp = policy.next_turn(PolicyTurnRequest(tuple(conversation)))
        logprobs.append(resp.logprobs)
        raw = resp.raw_text
        try:
            thought, action = parse_turn(raw)
        except FormatError as exc:
            log.debug("format error in %s: %s", video.video_id, exc)
            steps.append(Step(frames, error=exc.code, raw=raw))
            break
        if isinstance(action, OutputAnswer):
            steps.append(Step(frames, thought, action, raw=raw))
            break
        tool_calls += 1
        if tool_calls > config.max_tool_calls or (prev is not None and prev.interval == action.interval):
            steps.append(Step(frames, thought, action, raw=raw))
            break
        try:
            new_frames = extract_frames(video, action.interval, config.k_per_call)
            observation = _tool_observation(action.interval, new_frames)
        except EmptyWindow as exc:
            new_frames = FrameSet()
            observation = TOOL_ERROR_PREFIX + str(exc)
        steps.append(Step(frames, thought, action, raw=raw, observation=observation))
        conversation.append(Message("assistant", raw))
        conversation.append(Message("user", observation, new_frames))
        consumed += len(new_frames)
        frames = new_frames
        prev = action

    traj = Trajectory(tuple(steps), max_tool_calls=config.max_tool_calls)
    return EpisodeRecord(
        video_id=video.video_id,
        question=question,
        trajectory=traj,
        frames_consumed=consumed,
        answer=traj.answer,
        logprobs=tuple(logprobs),
    )


def run_group(
    video: VideoHandle,
    question: str,
    policies: Sequence[Policy],
    config: EpisodeConfig | None = None,
    jobs: int = 1,
    system_prompt: str | None = None,
) -> list[EpisodeRecord | PolicyError]:
    """Run one episode per policy; failed episodes come back as their error."""

    def one(policy: Policy) -> EpisodeRecord | PolicyError:
        try:
            return run_episode(video, question, policy, config, system_prompt)
        except PolicyError as exc:
            return exc

    if jobs <= 1:
        return [one(p) for p in policies]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, policies))


class DirectoryFrameSource:
    """Frames pre-extracted to image files, one file per index."""

    def __init__(self, root: str | Path, pattern: str = "{:06d}.jpg"):
        self.root = Path(root)
        self.pattern = pattern

    def __call__(self, idx: int) -> bytes:
        return (self.root / self.pattern.format(idx)).read_bytes()


def video_from_json(obj: dict[str, Any], base: Path | None = None) -> VideoHandle:
    uri = obj.get("uri")
    if obj.get("stub") or not uri:
        source: Callable[[int], Any] = stub_frame
    else:
        root = Path(uri)
        if base is not None and not root.is_absolute():
            root = base / root
        source = DirectoryFrameSource(root, obj.get("pattern", "{:06d}.jpg"))
    return VideoHandle(str(obj["video_id"]), int(obj["frame_count"]), source)


def load_video_manifest(path: str | Path) -> dict[str, VideoHandle]:
    path = Path(path)
    videos: dict[str, VideoHandle] = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                video = video_from_json(json.loads(line), path.parent)
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad video entry: {exc}") from exc
            videos[video.video_id] = video
    return videos
