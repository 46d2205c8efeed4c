from __future__ import annotations

import json
from pathlib import Path

import pytest

from tests.conftest import answer, tool
from vidagent.cli import EXIT_DATA, EXIT_INPUT, EXIT_OK, EXIT_TRANSPORT, main, stats_report
from vidagent.distill import QARecord, TaskDimension


def write_jsonl(path: Path, rows) -> Path:
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return path


def read_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def qa_row(i: int, fmt: str = "multiple_choice") -> dict:
    rec = QARecord(f"q{i}", f"v{i}", "FACTS", "fencing", TaskDimension.FineGrainedRecognition,
                   f"Which action? #{i}", "lunge", fmt, options=("parry", "lunge") if fmt == "multiple_choice" else None)
    return rec.to_json()


@pytest.fixture
def workspace(tmp_path):
    write_jsonl(tmp_path / "qa.jsonl", [qa_row(i) for i in range(4)])
    write_jsonl(tmp_path / "videos.jsonl", [{"video_id": f"v{i}", "frame_count": 120, "stub": True} for i in range(4)])
    scripts = {
        "q0": [tool(35, 59), answer("B")],        # correct with tool
        "q1": [tool(35, 59), answer("A")],        # wrong with tool
        "q2": [tool(5, 9), tool(5, 9), answer("B")],  # redundant call
        "q3": [answer("(b)")],                    # correct, no tool
    }
    (tmp_path / "script.json").write_text(json.dumps(scripts), encoding="utf-8")
    return tmp_path


def rollout(ws: Path, out: str = "log.jsonl", *extra: str) -> int:
    return main(["rollout", "--qa", str(ws / "qa.jsonl"), "--videos", str(ws / "videos.jsonl"),
                 "--script", str(ws / "script.json"), "--out", str(ws / out), *extra])


class TestRollout:
    def test_four_questions(self, workspace):
        assert rollout(workspace) == EXIT_OK
        rows = read_jsonl(workspace / "log.jsonl")
        assert rows[0]["kind"] == "header" and rows[0]["schema_version"] == 1
        assert [r["question_id"] for r in rows[1:]] == ["q0", "q1", "q2", "q3"]
        assert [r["frames_consumed"] for r in rows[1:]] == [16, 16, 13, 8]
        assert rows[0]["config"]["seed"] == 0
        assert rows[1]["reference"] == "B"

    def test_deterministic_bytes(self, workspace):
        log = workspace / "log.jsonl"
        rollout(workspace, "log.jsonl", "--jobs", "4", "--seed", "5")
        first = log.read_bytes()
        rollout(workspace, "log.jsonl", "--jobs", "4", "--seed", "5")
        assert log.read_bytes() == first
        assert json.loads(first.split(b"\n", 1)[0])["config"]["seed"] == 5
        # worker count changes the header only
        rollout(workspace, "log.jsonl", "--jobs", "1", "--seed", "5")
        assert log.read_bytes().split(b"\n", 1)[1] == first.split(b"\n", 1)[1]

    def test_group_mode(self, workspace):
        assert rollout(workspace, "g.jsonl", "--group-size", "8") == EXIT_OK
        rows = read_jsonl(workspace / "g.jsonl")[1:]
        assert len(rows) == 32
        for qid in ("q0", "q1", "q2", "q3"):
            group = [r for r in rows if r["group_id"] == qid]
            assert sorted(r["rollout_index"] for r in group) == list(range(8))

    def test_unreachable_endpoint(self, workspace):
        code = main(["rollout", "--qa", str(workspace / "qa.jsonl"), "--videos", str(workspace / "videos.jsonl"),
                     "--endpoint", "http://127.0.0.1:9/v1", "--model", "m", "--max-retries", "0",
                     "--timeout", "2", "--out", str(workspace / "down.jsonl")])
        assert code == EXIT_TRANSPORT
        rows = read_jsonl(workspace / "down.jsonl")
        assert rows[0]["kind"] == "header"
        assert {r["kind"] for r in rows[1:]} == {"episode_error"} and len(rows) == 5

    def test_missing_manifest(self, workspace):
        assert main(["rollout", "--qa", str(workspace / "nope.jsonl"), "--videos", str(workspace / "videos.jsonl"),
                     "--script", str(workspace / "script.json")]) == EXIT_INPUT

    def test_no_policy(self, workspace, monkeypatch):
        monkeypatch.delenv("VIDAGENT_ENDPOINT", raising=False)
        assert main(["rollout", "--qa", str(workspace / "qa.jsonl"), "--videos", str(workspace / "videos.jsonl")]) == EXIT_INPUT

    def test_config_precedence(self, workspace, monkeypatch):
        (workspace / "cfg.json").write_text(json.dumps({"max_tool_calls": 3, "k_initial": 4}), encoding="utf-8")
        monkeypatch.setenv("VIDAGENT_MODEL", "env-model")
        rollout(workspace, "p.jsonl", "--config", str(workspace / "cfg.json"), "--k-initial", "2")
        cfg = read_jsonl(workspace / "p.jsonl")[0]["config"]
        assert cfg["k_initial"] == 2 and cfg["max_tool_calls"] == 3 and cfg["k_per_call"] == 8


class TestScore:
    def test_canonical_totals(self, workspace):
        rollout(workspace)
        assert main(["score", "--log", str(workspace / "log.jsonl"), "--out", str(workspace / "r.jsonl")]) == EXIT_OK
        rows = read_jsonl(workspace / "r.jsonl")
        rewards = [r for r in rows if r["kind"] == "reward"]
        assert [r["total"] for r in rewards] == [1.5, 0.03, -0.05, 1.0]
        assert rows[-1]["kind"] == "summary" and rows[-1]["count"] == 4

    def test_reward_fixture_log(self, tmp_path):
        # the four reference cases: acc 0.8 and 0.4 come from judge scores on open-ended answers
        qa = [qa_row(i, "open_ended") for i in range(4)]
        write_jsonl(tmp_path / "qa.jsonl", qa)
        write_jsonl(tmp_path / "videos.jsonl", [{"video_id": f"v{i}", "frame_count": 120, "stub": True} for i in range(4)])
        scripts = {
            "q0": [tool(35, 59), answer("mostly right")],
            "q1": [tool(35, 59), answer("half wrong")],
            "q2": [tool(5, 9), tool(5, 9), answer("anything")],
            "q3": [answer("exactly right")],
        }
        (tmp_path / "script.json").write_text(json.dumps(scripts), encoding="utf-8")
        (tmp_path / "judge.json").write_text(
            json.dumps({"mostly right": 80, "half wrong": 40, "anything": 90, "exactly right": 100}), encoding="utf-8"
        )
        main(["rollout", "--qa", str(tmp_path / "qa.jsonl"), "--videos", str(tmp_path / "videos.jsonl"),
              "--script", str(tmp_path / "script.json"), "--out", str(tmp_path / "log.jsonl")])
        code = main(["score", "--log", str(tmp_path / "log.jsonl"), "--judge-scores", str(tmp_path / "judge.json"),
                     "--out", str(tmp_path / "r.jsonl")])
        assert code == EXIT_OK
        totals = [r["total"] for r in read_jsonl(tmp_path / "r.jsonl") if r["kind"] == "reward"]
        assert totals == [1.2, 0.43, -0.05, 1.0]

    def test_empty_log(self, tmp_path):
        (tmp_path / "empty.jsonl").write_text("", encoding="utf-8")
        assert main(["score", "--log", str(tmp_path / "empty.jsonl"), "--out", str(tmp_path / "r.jsonl")]) == EXIT_OK
        rows = read_jsonl(tmp_path / "r.jsonl")
        assert [r["kind"] for r in rows] == ["header", "summary"] and rows[1]["count"] == 0

    def test_corrupt_line(self, workspace, capsys):
        rollout(workspace, "log.jsonl", "--group-size", "3")
        lines = (workspace / "log.jsonl").read_text(encoding="utf-8").splitlines()
        body = lines[1:11]
        body[4] = body[4][: len(body[4]) // 2]
        (workspace / "bad.jsonl").write_text("\n".join(body) + "\n", encoding="utf-8")
        code = main(["score", "--log", str(workspace / "bad.jsonl"), "--out", str(workspace / "r.jsonl")])
        assert code == EXIT_DATA
        rows = read_jsonl(workspace / "r.jsonl")
        assert sum(r["kind"] == "reward" for r in rows) == 9
        assert [e["line"] for e in rows[-1]["errors"]] == [5]
        assert "bad.jsonl:line 5" in capsys.readouterr().err

    def test_judge_missing_defers(self, tmp_path):
        write_jsonl(tmp_path / "qa.jsonl", [qa_row(0, "open_ended")])
        write_jsonl(tmp_path / "videos.jsonl", [{"video_id": "v0", "frame_count": 50, "stub": True}])
        (tmp_path / "s.json").write_text(json.dumps([answer("x")]), encoding="utf-8")
        main(["rollout", "--qa", str(tmp_path / "qa.jsonl"), "--videos", str(tmp_path / "videos.jsonl"),
              "--script", str(tmp_path / "s.json"), "--out", str(tmp_path / "log.jsonl")])
        assert main(["score", "--log", str(tmp_path / "log.jsonl"), "--out", str(tmp_path / "r.jsonl")]) == EXIT_OK
        rows = read_jsonl(tmp_path / "r.jsonl")
        assert rows[1]["kind"] == "deferred" and rows[-1]["deferred"] == 1


def reward_rows(groups: dict[str, list[float]], ratios: dict[str, list[float]] | None = None) -> list[dict]:
    rows = []
    for pid, totals in groups.items():
        for i, t in enumerate(totals):
            row = {"kind": "reward", "question_id": pid, "rollout_index": i, "total": t}
            if ratios and pid in ratios:
                row["ratio"] = ratios[pid][i]
            rows.append(row)
    return rows


class TestAdvantages:
    def run(self, tmp_path, rows, *extra):
        write_jsonl(tmp_path / "r.jsonl", rows)
        code = main(["advantages", "--rewards", str(tmp_path / "r.jsonl"), "--out", str(tmp_path / "a.jsonl"), *extra])
        return code, {r.get("prompt_id"): r for r in read_jsonl(tmp_path / "a.jsonl")[1:]}

    def test_examples(self, tmp_path):
        code, out = self.run(tmp_path, reward_rows({"p": [1.0, 0.0], "flat": [0.7, 0.7, 0.7], "solo": [1.0]}))
        assert code == EXIT_OK
        assert out["p"]["advantages"] == [1.0, -1.0] and not out["p"]["degenerate"]
        assert out["flat"]["advantages"] == [0.0, 0.0, 0.0] and out["flat"]["degenerate"]
        assert "objective" not in out["p"]
        assert out["solo"]["kind"] == "group_error" and out["solo"]["error"] == "GroupTooSmall"

    def test_objective_with_ratios(self, tmp_path):
        rows = reward_rows({"p": [1.0, 0.0]}, {"p": [2.0, 1.0]})
        code, out = self.run(tmp_path, rows, "--kl-coeff", "0")
        assert out["p"]["objective"] == pytest.approx((1.2 - 1.0) / 2)
        assert out["p"]["kl"] == 0.0

    @pytest.mark.parametrize("backend", ["numpy", "numba"])
    def test_backends(self, tmp_path, backend):
        from vidagent import kernels

        if backend not in kernels.available():
            pytest.skip("numba not installed")
        _, out = self.run(tmp_path, reward_rows({"p": [1.2, 0.43, -0.05, 1.0]}), "--backend", backend)
        assert out["p"]["advantages"] == pytest.approx(
            [1.130946858724768173, -0.438114548875360644, -1.416230751015700685, 0.723398441166293156], abs=1e-12
        )


def episode_row(frames: list[list[int]], valid: bool = True, tools: int | None = None, dim: str = "FineGrainedRecognition"):
    n_tools = len(frames) - 1 if tools is None else tools
    steps = [{"frames": f, "action": {"type": "frame_extraction", "start": 0, "end": 1}} for f in frames[:n_tools]]
    steps += [{"frames": f, "action": {"type": "answer", "text": "B"}} for f in frames[n_tools:]]
    return {"kind": "trajectory", "question_id": "q", "steps": steps, "format_valid": valid,
            "frames_consumed": sum(map(len, frames)), "task_dimension": dim}


class TestStats:
    def test_mean_frames(self, tmp_path):
        log = write_jsonl(tmp_path / "log.jsonl", [episode_row([list(range(8))]),
                                                   episode_row([list(range(8)), list(range(8))])])
        report = stats_report(log)
        assert report["mean_frames_consumed"] == 12.0 and report["frames_consistent"]

    def test_no_tools(self, tmp_path):
        log = write_jsonl(tmp_path / "log.jsonl", [episode_row([[0, 1]], tools=0)] * 3)
        assert stats_report(log)["tool_call_rate"] == 0.0

    def test_invalid_rate(self, tmp_path):
        rows = [episode_row([[0]]) for _ in range(3)] + [episode_row([[0]], valid=False)]
        assert stats_report(write_jsonl(tmp_path / "log.jsonl", rows))["format_invalid_rate"] == 0.25

    def test_cli_with_histogram(self, workspace):
        rollout(workspace)
        main(["score", "--log", str(workspace / "log.jsonl"), "--out", str(workspace / "r.jsonl")])
        code = main(["stats", "--log", str(workspace / "log.jsonl"), "--rewards", str(workspace / "r.jsonl"),
                     "--out", str(workspace / "s.json")])
        assert code == EXIT_OK
        report = json.loads((workspace / "s.json").read_text(encoding="utf-8"))
        assert report["episodes"] == 4 and report["mean_frames_consumed"] == 13.25
        assert sum(report["reward_histogram"]["counts"]) == 4
        assert report["per_dimension"] == {"FineGrainedRecognition": 4}

    def test_inconsistent_frames_flagged(self, tmp_path):
        row = episode_row([[0, 1, 2]])
        row["frames_consumed"] = 5
        code = main(["stats", "--log", str(write_jsonl(tmp_path / "log.jsonl", [row])), "--out", str(tmp_path / "s.json")])
        assert code == EXIT_DATA


class TestDistill:
    def test_end_to_end(self, tmp_path):
        src = tmp_path / "facts.jsonl"
        write_jsonl(src, [{"clip": f"c{i}", "video_id": f"v{i}", "side": "left", "action": a}
                          for i, a in enumerate(["lunge", "parry", "riposte", "advance"] * 5)])
        sources = [{"source_dataset": "FACTS", "task": "action_classification", "path": "facts.jsonl",
                    "columns": {"id": "clip"}, "vocabulary": ["lunge", "parry", "riposte", "advance", "retreat"]}]
        (tmp_path / "sources.json").write_text(json.dumps(sources), encoding="utf-8")
        write_jsonl(tmp_path / "videos.jsonl", [{"video_id": f"v{i}", "frame_count": 90, "stub": True} for i in range(20)])
        (tmp_path / "script.json").write_text(json.dumps([tool(30, 60), answer("A")]), encoding="utf-8")
        (tmp_path / "judge.json").write_text(json.dumps({}), encoding="utf-8")
        out = tmp_path / "out"
        args = ["distill", "--sources", str(tmp_path / "sources.json"), "--videos", str(tmp_path / "videos.jsonl"),
                "--script", str(tmp_path / "script.json"), "--judge-scores", str(tmp_path / "judge.json"),
                "--ratios", "0.5", "0.3", "0.2", "--seed", "2", "--out-dir", str(out)]
        # every judged sample needs a verdict; an empty table fails them all, reported not raised
        assert main(args) == EXIT_TRANSPORT
        manifest = json.loads((out / "distill_manifest.json").read_text(encoding="utf-8"))
        assert manifest["failures"] == manifest["sft_candidates"] == 10

        qa = read_jsonl(out / "qa_manifest.jsonl")
        table = {r["question"]: 85 for r in qa}
        (tmp_path / "judge.json").write_text(json.dumps(table), encoding="utf-8")
        assert main(args) == EXIT_OK
        manifest = json.loads((out / "distill_manifest.json").read_text(encoding="utf-8"))
        assert manifest["split_counts"] == {"test": 4, "train_rl": 6, "train_sft": 10}
        assert manifest["retained"] == 10 and manifest["split_violations"] == []
        sft = read_jsonl(out / "sft.jsonl")
        assert len(sft) == 10 and sft[0]["messages"][0]["role"] == "system"
        assert {r["qa_id"] for r in sft} == {r["qa_id"] for r in qa if r["split"] == "train_sft"}

    def test_skip_cot(self, tmp_path):
        write_jsonl(tmp_path / "qa.jsonl", [qa_row(i) for i in range(10)])
        out = tmp_path / "o"
        assert main(["distill", "--qa", str(tmp_path / "qa.jsonl"), "--skip-cot", "--out-dir", str(out)]) == EXIT_OK
        plan = json.loads((out / "split_plan.json").read_text(encoding="utf-8"))
        assert len(plan["assignment"]) == 10
        assert not (out / "sft.jsonl").exists()
