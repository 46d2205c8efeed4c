"""QA unification, video-level splitting, and judge-filtered CoT distillation."""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
import random
import string
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from vidagent.assets import load_asset
from vidagent.environment import EpisodeConfig, EpisodeRecord, VideoHandle, run_episode
from vidagent.policy import (
    JudgeUnavailable,
    Policy,
    PolicyError,
    UnparseableVerdict,
)
from vidagent.protocol import Trajectory

log = logging.getLogger(__name__)

SPLITS = ("train_sft", "train_rl", "test")
TRAIN_SPLITS = ("train_sft", "train_rl")
DEFAULT_RATIOS = (0.18, 0.74, 0.08)
DEFAULT_JUDGE_THRESHOLD = 80


class TaskDimension(str, enum.Enum):
    FineGrainedRecognition = "FineGrainedRecognition"
    RuleProcedural = "RuleProcedural"
    AssessmentCoaching = "AssessmentCoaching"
    LiveCommentary = "LiveCommentary"


class MissingSlot(KeyError):
    pass


class UnknownTemplate(KeyError):
    pass


class EmptyInput(ValueError):
    pass


@dataclass(frozen=True)
class QARecord:
    qa_id: str
    video_id: str
    source_dataset: str
    sport: str
    task_dimension: TaskDimension
    question: str
    ground_truth: str
    answer_format: str
    options: tuple[str, ...] | None = None
    native_split: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "task_dimension", TaskDimension(self.task_dimension))
        if self.answer_format not in ("multiple_choice", "open_ended"):
            raise ValueError(f"unknown answer format {self.answer_format!r}")
        if self.native_split is not None and self.native_split not in SPLITS:
            raise ValueError(f"unknown split {self.native_split!r}")
        if self.options is not None:
            object.__setattr__(self, "options", tuple(self.options))

    @property
    def reference(self) -> str:
        """What a scorer compares against: the option letter for lettered MCQs."""
        if self.options and self.ground_truth in self.options:
            return string.ascii_uppercase[self.options.index(self.ground_truth)]
        return self.ground_truth

    def to_json(self) -> dict[str, Any]:
        d = asdict(self)
        d["task_dimension"] = self.task_dimension.value
        d["options"] = list(self.options) if self.options is not None else None
        return d

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> QARecord:
        fields = {k: d.get(k) for k in cls.__dataclass_fields__}
        return cls(**fields)


@dataclass(frozen=True)
class Template:
    """Declarative label-to-QA conversion.

    ``question`` is a str.format pattern over source fields; ``answer_slot``
    names the field holding the ground truth. Multiple-choice templates draw
    ``n_distractors`` wrong options from the label vocabulary.
    """

    name: str
    source_dataset: str
    task: str
    sport: str
    task_dimension: TaskDimension
    answer_format: str
    question: str
    answer_slot: str
    id_slot: str = "id"
    video_slot: str = "video_id"
    sport_slot: str | None = None
    n_distractors: int = 3

    @property
    def slots(self) -> list[str]:
        names = [f for _, f, _, _ in string.Formatter().parse(self.question) if f]
        return sorted({*names, self.answer_slot, self.id_slot, self.video_slot})

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> Template:
        return cls(**{**d, "task_dimension": TaskDimension(d["task_dimension"])})


class TemplateRegistry:
    def __init__(self, templates: Iterable[Template] = ()):
        self._by_key: dict[tuple[str, str], Template] = {}
        for t in templates:
            self.register(t)

    def register(self, template: Template) -> None:
        self._by_key[(template.source_dataset, template.task)] = template

    def get(self, source_dataset: str, task: str) -> Template:
        try:
            return self._by_key[(source_dataset, task)]
        except KeyError:
            raise UnknownTemplate(f"no template for ({source_dataset!r}, {task!r})") from None

    def __iter__(self):
        return iter(self._by_key.values())

    @classmethod
    def load(cls, path: str | Path | None = None) -> TemplateRegistry:
        text = Path(path).read_text(encoding="utf-8") if path else load_asset("templates_v1.json")
        return cls(Template.from_json(d) for d in json.loads(text))


def format_options(question: str, options: Sequence[str]) -> str:
    lines = [f"({string.ascii_uppercase[i]}) {opt}" for i, opt in enumerate(options)]
    return question + "\nOptions:\n" + "\n".join(lines)


def apply_template(
    source_record: Mapping[str, Any],
    template: Template,
    vocabulary: Sequence[str] | None = None,
    seed: int = 0,
) -> QARecord:
    missing = [s for s in template.slots if source_record.get(s) in (None, "")]
    if missing:
        raise MissingSlot(f"{template.name}: record lacks {', '.join(missing)}")
    truth = str(source_record[template.answer_slot])
    qa_id = f"{template.source_dataset}:{source_record[template.id_slot]}:{template.name}"
    question = template.question.format(**{k: source_record[k] for k in template.slots})
    sport = str(source_record[template.sport_slot]) if template.sport_slot else template.sport
    options = None
    if template.answer_format == "multiple_choice":
        pool = sorted({str(v) for v in (vocabulary or ())} - {truth})
        if not pool:
            raise ValueError(f"{template.name}: label vocabulary has no distractors for {truth!r}")
        rng = random.Random(f"{seed}|{qa_id}")
        opts = rng.sample(pool, min(template.n_distractors, len(pool))) + [truth]
        rng.shuffle(opts)
        options = tuple(opts)
        question = format_options(question, options)
    return QARecord(
        qa_id=qa_id,
        video_id=str(source_record[template.video_slot]),
        source_dataset=template.source_dataset,
        sport=sport,
        task_dimension=template.task_dimension,
        question=question,
        ground_truth=truth,
        answer_format=template.answer_format,
        options=options,
        native_split=source_record.get("native_split") or None,
    )


@dataclass(frozen=True)
class SourceAdapter:
    """Column mapping from a source file onto template slots."""

    source_dataset: str
    task: str
    path: str
    columns: dict[str, str] = field(default_factory=dict)
    file_format: str = "jsonl"
    vocabulary: tuple[str, ...] | None = None

    @classmethod
    def from_json(cls, d: Mapping[str, Any], base: Path | None = None) -> SourceAdapter:
        path = Path(d["path"])
        if base is not None and not path.is_absolute():
            path = base / path
        vocab = d.get("vocabulary")
        return cls(
            source_dataset=d["source_dataset"],
            task=d["task"],
            path=str(path),
            columns=dict(d.get("columns", {})),
            file_format=d.get("format", "jsonl"),
            vocabulary=tuple(vocab) if vocab else None,
        )

    def rows(self) -> list[dict[str, Any]]:
        with open(self.path, encoding="utf-8", newline="") as fh:
            if self.file_format == "csv":
                raw = list(csv.DictReader(fh))
            elif self.file_format == "tsv":
                raw = list(csv.DictReader(fh, delimiter="\t"))
            elif self.file_format == "jsonl":
                raw = [json.loads(line) for line in fh if line.strip()]
            else:
                raise ValueError(f"unknown source format {self.file_format!r}")
        out = []
        for row in raw:
            mapped = dict(row)
            for slot, column in self.columns.items():
                mapped[slot] = row.get(column)
            out.append(mapped)
        return out


def convert_source(adapter: SourceAdapter, registry: TemplateRegistry, seed: int = 0) -> list[QARecord]:
    template = registry.get(adapter.source_dataset, adapter.task)
    rows = adapter.rows()
    vocab = adapter.vocabulary
    if vocab is None and template.answer_format == "multiple_choice":
        vocab = tuple(sorted({str(r[template.answer_slot]) for r in rows if r.get(template.answer_slot)}))
    return [apply_template(r, template, vocab, seed) for r in rows]


# --- splits ---------------------------------------------------------------

@dataclass
class SplitPlan:
    assignment: dict[str, str]
    exclusions: list[tuple[str, str]]
    seed: int = 0
    ratios: tuple[float, float, float] = DEFAULT_RATIOS

    def split_of(self, record: QARecord) -> str | None:
        return self.assignment.get(record.video_id)

    def videos_in(self, split: str) -> set[str]:
        return {v for v, s in self.assignment.items() if s == split}

    def to_json(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "ratios": list(self.ratios),
            "assignment": dict(sorted(self.assignment.items())),
            "exclusions": [list(e) for e in self.exclusions],
        }

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> SplitPlan:
        return cls(
            assignment=dict(d["assignment"]),
            exclusions=[tuple(e) for e in d.get("exclusions", [])],
            seed=d.get("seed", 0),
            ratios=tuple(d.get("ratios", DEFAULT_RATIOS)),
        )


def _quotas(n: int, ratios: Sequence[float]) -> list[int]:
    raw = [n * r for r in ratios]
    counts = [math.floor(x) for x in raw]
    order = sorted(range(len(ratios)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def plan_splits(
    records: Sequence[QARecord],
    ratios: Sequence[float] = DEFAULT_RATIOS,
    overlap_pairs: Sequence[tuple[str, str]] = (),
    seed: int = 0,
    video_equivalence: Mapping[str, str] | None = None,
) -> SplitPlan:
    """Assign whole videos to splits, then drop train videos that duplicate a test video.

    Videos carrying a ``native_split`` keep it. The rest are shuffled with
    ``seed`` and dealt out by largest-remainder quotas. For each overlap pair
    (A, B), in both directions, a video holding dataset-B records whose
    canonical identity (``video_equivalence``) matches a test video of
    dataset A is removed from the train pools and logged as an exclusion.
    """
    if not records:
        raise EmptyInput("no QA records")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    equiv = video_equivalence or {}

    def canon(v: str) -> str:
        return equiv.get(v, v)

    pinned: dict[str, str] = {}
    datasets: dict[str, set[str]] = {}
    for r in records:
        datasets.setdefault(r.video_id, set()).add(r.source_dataset)
        if r.native_split:
            prev = pinned.setdefault(r.video_id, r.native_split)
            if prev != r.native_split:
                raise ValueError(f"video {r.video_id!r} pinned to both {prev} and {r.native_split}")

    free = sorted(v for v in datasets if v not in pinned)
    random.Random(seed).shuffle(free)
    assignment = dict(pinned)
    pos = 0
    for split, count in zip(SPLITS, _quotas(len(free), ratios)):
        for v in free[pos:pos + count]:
            assignment[v] = split
        pos += count

    exclusions: list[tuple[str, str]] = []
    pairs = {(a, b) for a, b in overlap_pairs} | {(b, a) for a, b in overlap_pairs}
    for a, b in sorted(pairs):
        test_a = {canon(v): v for v, s in assignment.items() if s == "test" and a in datasets[v]}
        for v in sorted(assignment):
            if assignment[v] in TRAIN_SPLITS and b in datasets[v] and canon(v) in test_a:
                exclusions.append(
                    (v, f"{b} {assignment[v]} video duplicates {a} test video {test_a[canon(v)]}")
                )
                del assignment[v]
    return SplitPlan(assignment, exclusions, seed, tuple(ratios))


def split_violations(
    records: Sequence[QARecord],
    plan: SplitPlan,
    video_equivalence: Mapping[str, str] | None = None,
    overlap_pairs: Sequence[tuple[str, str]] = (),
) -> list[str]:
    """Recount every integrity rule the plan must satisfy; empty when sound."""
    equiv = video_equivalence or {}
    problems: list[str] = []
    excluded = {v for v, _ in plan.exclusions}
    for v in excluded & plan.assignment.keys():
        problems.append(f"video {v} both excluded and assigned")
    for r in records:
        split = plan.assignment.get(r.video_id)
        if split is None and r.video_id not in excluded:
            problems.append(f"{r.qa_id}: video {r.video_id} neither assigned nor excluded")
        if r.native_split and split not in (None, r.native_split):
            problems.append(f"{r.qa_id}: native split {r.native_split} overridden by {split}")
    by_video: dict[str, set[str | None]] = {}
    for r in records:
        by_video.setdefault(r.video_id, set()).add(plan.assignment.get(r.video_id))
    for v, splits in by_video.items():
        if len(splits) > 1:
            problems.append(f"video {v} spans splits {sorted(map(str, splits))}")
    datasets: dict[str, set[str]] = {}
    for r in records:
        datasets.setdefault(r.video_id, set()).add(r.source_dataset)
    pairs = {(a, b) for a, b in overlap_pairs} | {(b, a) for a, b in overlap_pairs}
    for a, b in sorted(pairs):
        test_a = {equiv.get(v, v) for v, s in plan.assignment.items() if s == "test" and a in datasets.get(v, ())}
        for v, s in sorted(plan.assignment.items()):
            if s in TRAIN_SPLITS and b in datasets.get(v, ()) and equiv.get(v, v) in test_a:
                problems.append(f"{s} video {v} ({b}) duplicates a {a} test video")
    return problems


# --- CoT distillation -------------------------------------------------------

@dataclass(frozen=True)
class CoTSample:
    qa_id: str
    trajectory: Trajectory
    judge_score: int
    retained: bool
    threshold: int = DEFAULT_JUDGE_THRESHOLD
    rationale: str = ""
    episode: EpisodeRecord | None = None

    def __post_init__(self) -> None:
        if not 0 <= self.judge_score <= 100:
            raise ValueError("judge score outside 0..100")
        if self.retained and not (self.judge_score >= self.threshold and self.trajectory.format_valid):
            raise ValueError(f"{self.qa_id}: retained sample fails the retention rule")


@dataclass
class DistillResult:
    samples: list[CoTSample]
    failures: list[tuple[str, str]]

    @property
    def retained(self) -> list[CoTSample]:
        return [s for s in self.samples if s.retained]


def render_transcript(episode: EpisodeRecord) -> str:
    """The trajectory as the judge sees it: turns interleaved with tool results."""
    parts = []
    for step in episode.trajectory.steps:
        parts.append(f"[frames shown: {', '.join(map(str, step.frames.indices)) if step.frames else 'none'}]")
        parts.append(step.raw or "")
        if step.observation:
            parts.append(f"[tool] {step.observation}")
    return "\n".join(parts)


def distill_cot(
    records: Sequence[QARecord],
    teacher: Policy | Callable[[QARecord], Policy],
    judge: Any,
    videos: Mapping[str, VideoHandle],
    judge_threshold: int = DEFAULT_JUDGE_THRESHOLD,
    config: EpisodeConfig | None = None,
    plan: SplitPlan | None = None,
    attempts: int = 1,
    jobs: int = 1,
    system_prompt: str | None = None,
    rubric: str | None = None,
) -> DistillResult:
    """Generate a teacher trajectory per record and keep the ones the judge passes.

    ``teacher`` is either one policy shared by all records (stateless remote
    clients) or a factory returning a fresh policy per record. With ``plan``
    given, records outside the SFT split are refused. A record whose
    generation or judging fails is reported in ``failures`` and skipped.
    """
    if plan is not None:
        outside = [r.qa_id for r in records if plan.split_of(r) != "train_sft"]
        if outside:
            raise ValueError(f"{len(outside)} records are not in train_sft, e.g. {outside[0]}")
    rubric = rubric or load_asset("cot_rubric_v1.txt")
    factory = teacher if not hasattr(teacher, "next_turn") else (lambda _r: teacher)

    def one(record: QARecord) -> CoTSample | tuple[str, str]:
        sample = None
        for _ in range(max(1, attempts)):
            try:
                video = videos[record.video_id]
            except KeyError:
                return record.qa_id, f"unknown video {record.video_id}"
            try:
                ep = run_episode(video, record.question, factory(record), config, system_prompt)
            except PolicyError as exc:
                return record.qa_id, f"{type(exc).__name__}: {exc}"
            try:
                verdict = judge.score(record.question, record.reference, render_transcript(ep), rubric)
            except (JudgeUnavailable, UnparseableVerdict) as exc:
                return record.qa_id, f"{type(exc).__name__}: {exc}"
            keep = ep.trajectory.format_valid and verdict.score >= judge_threshold
            sample = CoTSample(record.qa_id, ep.trajectory, verdict.score, keep, judge_threshold, verdict.rationale, ep)
            if keep:
                break
        return sample

    if jobs <= 1:
        results = [one(r) for r in records]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, records))
    samples = [r for r in results if isinstance(r, CoTSample)]
    failures = [r for r in results if isinstance(r, tuple)]
    for qa_id, reason in failures:
        log.warning("distillation failed for %s: %s", qa_id, reason)
    return DistillResult(samples, failures)


def _frame_parts(video_id: str, indices: Sequence[int]) -> list[dict[str, Any]]:
    parts: list[dict[str, Any]] = []
    for i in indices:
        parts.append({"type": "text", "text": f"frame_index: {i}"})
        parts.append({"type": "image", "video_id": video_id, "frame_index": i})
    return parts


def to_sft_example(sample: CoTSample, record: QARecord, system_prompt: str) -> dict[str, Any]:
    """Chat-format SFT row: system, user, then assistant/tool turns."""
    steps = sample.trajectory.steps
    first = steps[0].frames.indices if steps and steps[0].frames else []
    messages: list[dict[str, Any]] = [
        {"role": "system", "content": system_prompt},
        {"role": "user", "content": [{"type": "text", "text": record.question}, *_frame_parts(record.video_id, first)]},
    ]
    for i, step in enumerate(steps):
        messages.append({"role": "assistant", "content": step.raw})
        if step.observation is not None:
            nxt = steps[i + 1].frames.indices if i + 1 < len(steps) and steps[i + 1].frames else []
            messages.append({
                "role": "tool",
                "name": "frame_extraction_tool",
                "content": [{"type": "text", "text": step.observation}, *_frame_parts(record.video_id, nxt)],
            })
    return {
        "qa_id": sample.qa_id,
        "video_id": record.video_id,
        "task_dimension": record.task_dimension.value,
        "judge_score": sample.judge_score,
        "messages": messages,
    }
