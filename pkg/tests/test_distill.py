from __future__ import annotations

import json
from collections import Counter

import pytest

from tests.conftest import answer, tool
from vidagent.distill import (
    CoTSample,
    EmptyInput,
    MissingSlot,
    QARecord,
    SourceAdapter,
    SplitPlan,
    TaskDimension,
    TemplateRegistry,
    UnknownTemplate,
    apply_template,
    convert_source,
    distill_cot,
    plan_splits,
    split_violations,
    to_sft_example,
)
from vidagent.environment import VideoHandle
from vidagent.policy import JudgeVerdict, PolicyTransportError, ScriptedPolicy, StaticJudge
from vidagent.protocol import FrameExtraction, FrameInterval, OutputAnswer, Step, Thought, Trajectory

VOCAB = ["lunge", "parry", "riposte", "advance", "retreat", "fleche"]

# frozen at seed 7
FENCING_FIXTURE = {
    "qa_id": "FACTS:c17:fencing_action_mcq",
    "video_id": "vid17",
    "source_dataset": "FACTS",
    "sport": "fencing",
    "task_dimension": "FineGrainedRecognition",
    "question": (
        "Which fencing action does the athlete on the left perform in this clip?\n"
        "Options:\n(A) parry\n(B) advance\n(C) retreat\n(D) lunge"
    ),
    "ground_truth": "lunge",
    "answer_format": "multiple_choice",
    "options": ["parry", "advance", "retreat", "lunge"],
    "native_split": None,
}


@pytest.fixture(scope="module")
def registry():
    return TemplateRegistry.load()


def qa(i: int, video: str, source: str = "FACTS", native: str | None = None) -> QARecord:
    return QARecord(f"{source}:{i}", video, source, "fencing", TaskDimension.FineGrainedRecognition,
                    "q", "lunge", "open_ended", native_split=native)


class TestTemplates:
    def test_fencing_mcq_frozen(self, registry):
        t = registry.get("FACTS", "action_classification")
        rec = apply_template({"id": "c17", "video_id": "vid17", "side": "left", "action": "lunge"}, t, VOCAB, seed=7)
        assert rec.to_json() == FENCING_FIXTURE
        assert rec.reference == "D"
        assert rec.ground_truth in rec.options and len(set(rec.options)) == 4
        assert set(rec.options) <= set(VOCAB)

    def test_deterministic_bytes(self, registry):
        t = registry.get("FACTS", "action_classification")
        src = {"id": "c1", "video_id": "v", "side": "right", "action": "parry"}
        a = json.dumps(apply_template(src, t, VOCAB, seed=3).to_json())
        b = json.dumps(apply_template(src, t, VOCAB, seed=3).to_json())
        assert a == b

    def test_commentary_pass_through(self, registry):
        t = registry.get("SoccerReplay-1988", "commentary")
        text = "A curling effort from the edge of the box, just wide."
        rec = apply_template({"id": "m1", "video_id": "g1", "commentary": text}, t)
        assert rec.answer_format == "open_ended" and rec.ground_truth == text
        assert rec.task_dimension is TaskDimension.LiveCommentary
        assert rec.options is None and rec.reference == text

    def test_missing_slot(self, registry):
        t = registry.get("FACTS", "action_classification")
        with pytest.raises(MissingSlot):
            apply_template({"id": "c1", "video_id": "v", "side": "left"}, t, VOCAB)

    def test_unknown_template(self, registry):
        with pytest.raises(UnknownTemplate):
            registry.get("FACTS", "pose_estimation")

    def test_bundled_templates_cover_taxonomy(self, registry):
        dims = {t.task_dimension for t in registry}
        assert TaskDimension.FineGrainedRecognition in dims and TaskDimension.LiveCommentary in dims

    def test_csv_adapter(self, tmp_path, registry):
        path = tmp_path / "facts.csv"
        path.write_text("clip,video,fencer,label\nc1,v1,left,lunge\nc2,v2,right,parry\n", encoding="utf-8")
        adapter = SourceAdapter.from_json(
            {
                "source_dataset": "FACTS",
                "task": "action_classification",
                "path": "facts.csv",
                "format": "csv",
                "columns": {"id": "clip", "video_id": "video", "side": "fencer", "action": "label"},
                "vocabulary": VOCAB,
            },
            base=tmp_path,
        )
        records = convert_source(adapter, registry, seed=1)
        assert [r.qa_id for r in records] == ["FACTS:c1:fencing_action_mcq", "FACTS:c2:fencing_action_mcq"]
        assert records[1].ground_truth == "parry" and "right" in records[1].question

    def test_record_round_trip(self):
        rec = QARecord.from_json(FENCING_FIXTURE)
        assert QARecord.from_json(json.loads(json.dumps(rec.to_json()))) == rec


class TestSplits:
    def records(self):
        return [qa(i, f"v{i % 10}") for i in range(30)]

    def test_sizes(self):
        plan = plan_splits(self.records(), (0.2, 0.6, 0.2), seed=11)
        assert Counter(plan.assignment.values()) == {"train_sft": 2, "train_rl": 6, "test": 2}
        for r in self.records():
            assert plan.split_of(r) == plan.assignment[r.video_id]
        assert split_violations(self.records(), plan) == []

    def test_deterministic(self):
        a = plan_splits(self.records(), (0.2, 0.6, 0.2), seed=11)
        b = plan_splits(self.records(), (0.2, 0.6, 0.2), seed=11)
        assert a == b and json.dumps(a.to_json()) == json.dumps(b.to_json())
        assert SplitPlan.from_json(a.to_json()) == a

    def test_seed_changes_assignment(self):
        plans = {tuple(sorted(plan_splits(self.records(), (0.2, 0.6, 0.2), seed=s).videos_in("test"))) for s in range(6)}
        assert len(plans) > 1

    def test_overlap_exclusion(self):
        records = [
            qa(1, "bench_7", "SoccerBench", native="test"),
            qa(2, "replay_7", "SoccerReplay-1988", native="train_rl"),
            qa(3, "replay_8", "SoccerReplay-1988", native="train_rl"),
        ]
        equiv = {"bench_7": "match_7", "replay_7": "match_7"}
        plan = plan_splits(records, overlap_pairs=[("SoccerBench", "SoccerReplay-1988")], video_equivalence=equiv)
        assert [v for v, _ in plan.exclusions] == ["replay_7"]
        assert "SoccerBench test" in plan.exclusions[0][1]
        assert plan.assignment == {"bench_7": "test", "replay_8": "train_rl"}
        assert split_violations(records, plan, equiv, [("SoccerBench", "SoccerReplay-1988")]) == []

    def test_overlap_applies_both_ways(self):
        records = [qa(1, "a", "A", native="train_sft"), qa(2, "b", "B", native="test")]
        plan = plan_splits(records, overlap_pairs=[("A", "B")], video_equivalence={"a": "x", "b": "x"})
        assert [v for v, _ in plan.exclusions] == ["a"]

    def test_violation_detector_catches_leak(self):
        records = [qa(1, "a", "A"), qa(2, "b", "B")]
        leaky = SplitPlan({"a": "test", "b": "train_rl"}, [], 0, (0.5, 0.0, 0.5))
        assert split_violations(records, leaky, {"a": "x", "b": "x"}, [("A", "B")])

    def test_errors(self):
        with pytest.raises(EmptyInput):
            plan_splits([])
        with pytest.raises(ValueError):
            plan_splits(self.records(), (0.5, 0.5, 0.5))


def fencing_record(i: int) -> QARecord:
    return QARecord(f"q{i}", f"v{i}", "FACTS", "fencing", TaskDimension.FineGrainedRecognition,
                    f"Which action? #{i}", "lunge", "multiple_choice", options=("parry", "lunge"))


class RecordingJudge(StaticJudge):
    def __init__(self, verdicts):
        super().__init__(verdicts)
        self.references = []

    def score(self, question, reference, candidate, rubric=None):
        self.references.append(reference)
        assert rubric and "{candidate}" in rubric
        return super().score(question, reference, candidate, rubric)


class TestDistill:
    videos = {f"v{i}": VideoHandle(f"v{i}", 120) for i in range(4)}

    def test_retention_rules(self):
        records = [fencing_record(i) for i in range(3)]
        scripts = {
            "q0": [tool(35, 59), answer("B")],
            "q1": [tool(35, 59), answer("B")],
            "q2": [tool(10, 20), tool(10, 20), answer("B")],
        }
        scores = {r.question: JudgeVerdict(s) for r, s in zip(records, (88, 60, 95))}
        judge = RecordingJudge(scores)
        result = distill_cot(records, lambda r: ScriptedPolicy(scripts[r.qa_id]), judge, self.videos)
        by_id = {s.qa_id: s for s in result.samples}
        assert by_id["q0"].retained and by_id["q0"].judge_score == 88
        assert not by_id["q1"].retained
        assert not by_id["q2"].retained and not by_id["q2"].trajectory.format_valid
        assert judge.references == ["B", "B", "B"]
        for s in result.samples:
            assert not s.retained or (s.judge_score >= 80 and s.trajectory.format_valid)

    def test_transport_failure_reported(self):
        class Down:
            def next_turn(self, request):
                raise PolicyTransportError("down")

        records = [fencing_record(0), fencing_record(1)]
        judge = StaticJudge(default=JudgeVerdict(90))
        result = distill_cot(records, lambda r: Down() if r.qa_id == "q0" else ScriptedPolicy([answer("B")]),
                             judge, self.videos, jobs=2)
        assert [f[0] for f in result.failures] == ["q0"]
        assert [s.qa_id for s in result.retained] == ["q1"]

    def test_refuses_non_sft_records(self):
        records = [fencing_record(0)]
        plan = SplitPlan({"v0": "test"}, [], 0, (0.18, 0.74, 0.08))
        with pytest.raises(ValueError, match="train_sft"):
            distill_cot(records, ScriptedPolicy([answer("B")]), StaticJudge(default=JudgeVerdict(90)), self.videos, plan=plan)

    def test_attempts_retry_rejected(self):
        scripts = iter([[answer("A")], [tool(0, 50), answer("B")]])

        class CandidateJudge:
            def score(self, question, reference, candidate, rubric=None):
                return JudgeVerdict(10) if "<answer>A</answer>" in candidate else JudgeVerdict(90)

        result = distill_cot([fencing_record(0)], lambda r: ScriptedPolicy(next(scripts)), CandidateJudge(),
                             self.videos, attempts=2)
        assert result.retained[0].trajectory.tool_calls == 1

    def test_cot_sample_invariant(self):
        bad = Trajectory((Step(thought=Thought("t"), action=FrameExtraction(FrameInterval(0, 1))),))
        with pytest.raises(ValueError):
            CoTSample("q", bad, 95, True)
        good = Trajectory((Step(thought=Thought("t"), action=OutputAnswer("B")),))
        with pytest.raises(ValueError):
            CoTSample("q", good, 79, True, threshold=80)
        assert CoTSample("q", good, 80, True, threshold=80).retained

    def test_sft_format(self):
        rec = fencing_record(0)
        result = distill_cot([rec], ScriptedPolicy([tool(35, 59), answer("B")]),
                             StaticJudge(default=JudgeVerdict(92)), self.videos)
        row = to_sft_example(result.samples[0], rec, "SYS")
        roles = [m["role"] for m in row["messages"]]
        assert roles == ["system", "user", "assistant", "tool", "assistant"]
        tool_msg = row["messages"][3]
        frame_labels = [p["text"] for p in tool_msg["content"] if p["type"] == "text"][1:]
        assert frame_labels == [f"frame_index: {i}" for i in (35, 38, 42, 45, 49, 52, 56, 59)]
        assert row["messages"][2]["content"] == tool(35, 59)
        json.dumps(row)
