"""Command-line workflows: rollout, score, advantages, distill, stats.

Settings resolve as command-line flag, then ``--config`` JSON file, then
environment variable, then built-in default. The resolved values are
written into the header line of every output file.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import math
import os
import sys
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Sequence

from vidagent import kernels
from vidagent.assets import load_asset
from vidagent.distill import (
    DEFAULT_JUDGE_THRESHOLD,
    DEFAULT_RATIOS,
    QARecord,
    SourceAdapter,
    SplitPlan,
    TemplateRegistry,
    convert_source,
    distill_cot,
    plan_splits,
    split_violations,
    to_sft_example,
)
from vidagent.environment import EpisodeConfig, load_video_manifest, run_episode
from vidagent.grpo import DEFAULT_GROUP_SIZE, GrpoConfig, RolloutGroup, compute_advantages_batch, objective_value
from vidagent.logs import SCHEMA_VERSION, JsonlWriter, dumps, episode_to_record, read_jsonl, trajectory_from_record
from vidagent.policy import (
    ENV_API_KEY,
    ENV_ENDPOINT,
    ENV_JUDGE_API_KEY,
    ENV_JUDGE_ENDPOINT,
    ENV_JUDGE_MODEL,
    ENV_MODEL,
    ChatClient,
    Decoding,
    JudgeClient,
    JudgeUnavailable,
    JudgeVerdict,
    PolicyError,
    RemotePolicy,
    ScriptedPolicy,
    ScriptExhausted,
    StaticJudge,
    UnparseableVerdict,
    load_scripts,
)
from vidagent.reward import AccuracyScore, GroundTruth, RewardConfig, compute_reward, score_answer

log = logging.getLogger("vidagent")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_TRANSPORT = 3
EXIT_DATA = 4

ENV_FALLBACKS = {
    "endpoint": ENV_ENDPOINT,
    "model": ENV_MODEL,
    "judge_endpoint": ENV_JUDGE_ENDPOINT,
    "judge_model": ENV_JUDGE_MODEL,
}

DEFAULTS: dict[str, Any] = {
    "k_initial": 8,
    "k_per_call": 8,
    "max_tool_calls": 6,
    "group_size": 1,
    "seed": 0,
    "jobs": 1,
    "temperature": 0.0,
    "max_tokens": 2048,
    "max_retries": 4,
    "timeout": 120.0,
    "scorer": "auto",
    "acc_gate_threshold": 0.5,
    "tool_success_coeff": 0.5,
    "curiosity_bonus": 0.03,
    "format_penalty": 0.05,
    "clip_epsilon": 0.2,
    "kl_coeff": 0.01,
    "std_floor": 1e-6,
    "threshold": DEFAULT_JUDGE_THRESHOLD,
    "attempts": 1,
    "ratios": list(DEFAULT_RATIOS),
}


class InputError(Exception):
    pass


class Settings:
    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.file: dict[str, Any] = {}
        if getattr(args, "config", None):
            try:
                self.file = json.loads(Path(args.config).read_text(encoding="utf-8"))
            except (OSError, ValueError) as exc:
                raise InputError(f"cannot read config {args.config}: {exc}") from exc
        self.resolved: dict[str, Any] = {}
        # resolve every flag up front so headers record the full configuration, seed included
        for name in vars(args):
            if name not in ("command", "verbose", "config"):
                getattr(self, name)

    def __getattr__(self, name: str) -> Any:
        if name.startswith("_") or name in ("args", "file", "resolved"):
            raise AttributeError(name)
        value = getattr(self.args, name, None)
        if value is None:
            value = self.file.get(name)
        if value is None and name in ENV_FALLBACKS:
            value = os.environ.get(ENV_FALLBACKS[name])
        if value is None:
            value = DEFAULTS.get(name)
        self.resolved[name] = value
        return value

    def header(self, command: str) -> dict[str, Any]:
        return {
            "kind": "header",
            "schema_version": SCHEMA_VERSION,
            "command": command,
            "config": dict(sorted(self.resolved.items())),
        }


def _require_file(path: str | None, what: str) -> Path:
    if not path:
        raise InputError(f"{what} is required")
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{what} not found: {path}")
    return p


def _open_out(path: str | None):
    if path in (None, "-"):
        return contextlib.nullcontext(sys.stdout)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    return open(path, "w", encoding="utf-8")


def _load_qa(path: Path) -> list[QARecord]:
    out = []
    for lineno, obj in read_jsonl(path):
        if isinstance(obj, Exception):
            raise InputError(f"{path}:{lineno}: {obj}")
        try:
            out.append(QARecord.from_json(obj))
        except (TypeError, ValueError) as exc:
            raise InputError(f"{path}:{lineno}: bad QA record: {exc}") from exc
    return out


def _episode_config(s: Settings) -> EpisodeConfig:
    return EpisodeConfig(int(s.k_initial), int(s.k_per_call), int(s.max_tool_calls))


def _policy_factory(s: Settings, role: str = "policy") -> Callable[[str, int], Any]:
    """Returns make(question_id, rollout_index) -> Policy."""
    if s.script:
        path = _require_file(s.script, "script fixture")
        lookup = load_scripts(json.loads(path.read_text(encoding="utf-8")))

        def make_scripted(qid: str, _idx: int) -> ScriptedPolicy:
            try:
                return ScriptedPolicy(lookup(qid))
            except KeyError as exc:
                raise InputError(str(exc)) from exc
        return make_scripted
    if not s.endpoint or not s.model:
        raise InputError(f"{role}: give --script, or --endpoint and --model (or {ENV_ENDPOINT}/{ENV_MODEL})")
    client = ChatClient(
        s.endpoint,
        s.model,
        api_key=os.environ.get(ENV_API_KEY),
        timeout=float(s.timeout),
        max_retries=int(s.max_retries),
        max_in_flight=max(1, int(s.jobs)),
    )
    shared = RemotePolicy(
        client,
        Decoding(temperature=float(s.temperature), max_tokens=int(s.max_tokens), seed=int(s.seed)),
    )
    return lambda _qid, _idx: shared


def _system_prompt(s: Settings) -> str | None:
    if s.system_prompt:
        return _require_file(s.system_prompt, "system prompt").read_text(encoding="utf-8")
    return None


# --- rollout -----------------------------------------------------------------

def cmd_rollout(s: Settings) -> int:
    qa = _load_qa(_require_file(s.qa, "--qa manifest"))
    videos = load_video_manifest(_require_file(s.videos, "--videos manifest"))
    cfg = _episode_config(s)
    make = _policy_factory(s)
    system_prompt = _system_prompt(s)
    group_size = int(s.group_size)
    jobs = max(1, int(s.jobs))
    jobs_list = []
    for rec in qa:
        if rec.video_id not in videos:
            raise InputError(f"{rec.qa_id}: video {rec.video_id} not in video manifest")
        jobs_list += [(rec, i) for i in range(group_size)]

    def run(job):
        rec, idx = job
        try:
            ep = run_episode(videos[rec.video_id], rec.question, make(rec.qa_id, idx), cfg, system_prompt)
        except PolicyError as exc:
            return rec, idx, exc
        return rec, idx, ep

    transport_failed = input_failed = 0
    with _open_out(s.out) as fh:
        writer = JsonlWriter(fh)
        writer.write(s.header("rollout"))
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            for rec, idx, result in pool.map(run, jobs_list):
                if isinstance(result, Exception):
                    if isinstance(result, ScriptExhausted):
                        input_failed += 1
                    else:
                        transport_failed += 1
                    log.error("%s#%d excluded: %s: %s", rec.qa_id, idx, type(result).__name__, result)
                    writer.write({
                        "kind": "episode_error",
                        "schema_version": SCHEMA_VERSION,
                        "question_id": rec.qa_id,
                        "rollout_index": idx,
                        "error": type(result).__name__,
                        "message": str(result),
                    })
                    continue
                writer.write(episode_to_record(
                    result,
                    rec.qa_id,
                    idx,
                    group_id=rec.qa_id,
                    reference=rec.reference,
                    answer_format=rec.answer_format,
                    task_dimension=rec.task_dimension.value,
                ))
    if transport_failed:
        return EXIT_TRANSPORT
    if input_failed:
        return EXIT_INPUT
    return EXIT_OK


# --- score --------------------------------------------------------------------

def _judge(s: Settings, rubric: str | None = None):
    if s.judge_scores:
        table = json.loads(_require_file(s.judge_scores, "judge score fixture").read_text(encoding="utf-8"))
        verdicts = {
            k: JudgeVerdict(int(v["score"]), v.get("rationale", "")) if isinstance(v, dict) else JudgeVerdict(int(v))
            for k, v in table.items()
        }
        return StaticJudge(verdicts)
    if s.judge_endpoint and s.judge_model:
        client = ChatClient(
            s.judge_endpoint,
            s.judge_model,
            api_key=os.environ.get(ENV_JUDGE_API_KEY),
            timeout=float(s.timeout),
            max_retries=int(s.max_retries),
            max_in_flight=max(1, int(s.jobs)),
        )
        return JudgeClient(client, rubric)
    return None


def _reward_config(s: Settings) -> RewardConfig:
    return RewardConfig(
        float(s.acc_gate_threshold), float(s.tool_success_coeff), float(s.curiosity_bonus), float(s.format_penalty)
    )


def cmd_score(s: Settings) -> int:
    path = _require_file(s.log, "--log")
    cfg = _reward_config(s)
    scorer = s.scorer
    judge = _judge(s)
    errors: list[dict[str, Any]] = []
    totals: list[float] = []
    deferred = 0
    with _open_out(s.out) as fh:
        writer = JsonlWriter(fh)
        writer.write(s.header("score"))
        for lineno, obj in read_jsonl(path):
            if isinstance(obj, dict) and obj.get("kind") in ("header", "episode_error"):
                continue
            try:
                if isinstance(obj, Exception):
                    raise obj
                traj = trajectory_from_record(obj)
                qid, idx = obj["question_id"], int(obj.get("rollout_index", 0))
                reference = GroundTruth(str(obj["reference"]), obj.get("answer_format", "multiple_choice"),
                                        obj.get("question", ""))
            except (ValueError, KeyError, TypeError) as exc:
                msg = f"line {lineno}: {type(exc).__name__}: {exc}"
                print(f"{path}:{msg}", file=sys.stderr)
                errors.append({"line": lineno, "message": str(exc)})
                continue
            try:
                acc = score_answer(traj.answer, reference, scorer, judge)
            except (JudgeUnavailable, UnparseableVerdict) as exc:
                deferred += 1
                writer.write({"kind": "deferred", "question_id": qid, "rollout_index": idx, "reason": str(exc)})
                continue
            breakdown = compute_reward(traj, acc, cfg)
            row = {"kind": "reward", "question_id": qid, "rollout_index": idx, "scorer_id": acc.scorer_id,
                   **breakdown.to_json()}
            for key in ("ratio", "kl"):
                if key in obj:
                    row[key] = obj[key]
            writer.write(row)
            totals.append(breakdown.total)
        writer.write({
            "kind": "summary",
            "count": len(totals),
            "mean_total": math.fsum(totals) / len(totals) if totals else None,
            "deferred": deferred,
            "errors": errors,
        })
    return EXIT_DATA if errors else EXIT_OK


# --- advantages ------------------------------------------------------------

def cmd_advantages(s: Settings) -> int:
    path = _require_file(s.rewards, "--rewards")
    cfg = GrpoConfig(float(s.clip_epsilon), float(s.kl_coeff), float(s.std_floor))
    backend = s.backend
    groups: dict[str, list[dict[str, Any]]] = {}
    errors = []
    for lineno, obj in read_jsonl(path):
        if isinstance(obj, Exception):
            errors.append({"line": lineno, "message": str(obj)})
            continue
        if obj.get("kind") != "reward":
            continue
        groups.setdefault(str(obj["question_id"]), []).append(obj)

    ok, bad = [], []
    for pid, rows in groups.items():
        rows.sort(key=lambda r: int(r.get("rollout_index", 0)))
        (ok if len(rows) >= 2 else bad).append(pid)
    sets = compute_advantages_batch([[float(r["total"]) for r in groups[p]] for p in ok], cfg, backend)
    results = dict(zip(ok, sets))

    with _open_out(s.out) as fh:
        writer = JsonlWriter(fh)
        writer.write(s.header("advantages"))
        for pid, rows in groups.items():
            if pid in bad:
                writer.write({"kind": "group_error", "prompt_id": pid, "error": "GroupTooSmall",
                              "message": f"{len(rows)} rollout(s); need at least 2"})
                continue
            aset = results[pid]
            out = {
                "kind": "group",
                "prompt_id": pid,
                "rewards": [float(r["total"]) for r in rows],
                "advantages": list(aset.advantages),
                "mean": aset.mean_r,
                "std": aset.std_r,
                "degenerate": aset.degenerate,
            }
            if all("ratio" in r for r in rows):
                kls = [float(r["kl"]) for r in rows if "kl" in r]
                kl = math.fsum(kls) / len(kls) if kls else 0.0
                group = RolloutGroup(pid, tuple(out["rewards"]), tuple(float(r["ratio"]) for r in rows), kl)
                out["objective"] = objective_value(group, aset, cfg, backend=backend)
                out["kl"] = kl
            writer.write(out)
        if errors:
            writer.write({"kind": "summary", "errors": errors})
    return EXIT_DATA if errors else EXIT_OK


# --- stats -------------------------------------------------------------------

def stats_report(log_path: Path, rewards_path: Path | None = None, bins: int = 10) -> dict[str, Any]:
    episodes = 0
    frames_total = 0
    recount_total = 0
    with_tool = 0
    tool_calls = 0
    invalid = 0
    dims: Counter[str] = Counter()
    errors = []
    for lineno, obj in read_jsonl(log_path):
        if isinstance(obj, dict) and obj.get("kind") in ("header", "episode_error"):
            continue
        try:
            if isinstance(obj, Exception):
                raise obj
            steps = obj["steps"]
            consumed = int(obj["frames_consumed"])
            recount = sum(len(st.get("frames", [])) for st in steps)
            calls = sum(1 for st in steps if (st.get("action") or {}).get("type") == "frame_extraction")
            valid = bool(obj["format_valid"])
        except (ValueError, KeyError, TypeError, AttributeError) as exc:
            errors.append({"line": lineno, "message": f"{type(exc).__name__}: {exc}"})
            continue
        episodes += 1
        frames_total += consumed
        recount_total += recount
        tool_calls += calls
        with_tool += calls > 0
        invalid += not valid
        dims[obj.get("task_dimension") or "unknown"] += 1

    report: dict[str, Any] = {
        "kind": "stats",
        "episodes": episodes,
        "per_dimension": dict(sorted(dims.items())),
        "total_frames": frames_total,
        "mean_frames_consumed": frames_total / episodes if episodes else None,
        "mean_frames_recount": recount_total / episodes if episodes else None,
        "frames_consistent": frames_total == recount_total,
        "tool_call_rate": with_tool / episodes if episodes else None,
        "mean_tool_calls": tool_calls / episodes if episodes else None,
        "format_invalid_rate": invalid / episodes if episodes else None,
        "reward_histogram": None,
        "errors": errors,
    }
    if rewards_path is not None:
        totals = [
            float(o["total"]) for _, o in read_jsonl(rewards_path)
            if isinstance(o, dict) and o.get("kind") == "reward"
        ]
        report["reward_histogram"] = reward_histogram(totals, bins)
    return report


def reward_histogram(totals: Sequence[float], bins: int = 10, lo: float = -0.05, hi: float = 1.5) -> dict[str, Any]:
    import numpy as np

    counts, edges = np.histogram(np.asarray(totals, dtype=np.float64), bins=bins, range=(lo, hi))
    return {"edges": [round(float(e), 10) for e in edges], "counts": counts.tolist()}


def cmd_stats(s: Settings) -> int:
    rewards = _require_file(s.rewards, "--rewards") if s.rewards else None
    report = stats_report(_require_file(s.log, "--log"), rewards)
    report["config"] = dict(sorted(s.resolved.items()))
    with _open_out(s.out) as fh:
        fh.write(json.dumps(report, indent=2, ensure_ascii=False) + "\n")
    if not report["frames_consistent"]:
        log.error("frames_consumed disagrees with per-step recount")
        return EXIT_DATA
    return EXIT_DATA if report["errors"] else EXIT_OK


# --- distill ---------------------------------------------------------------

def cmd_distill(s: Settings) -> int:
    out_dir = Path(s.out_dir or "distill_out")
    out_dir.mkdir(parents=True, exist_ok=True)
    records: list[QARecord] = []
    if s.sources:
        src = _require_file(s.sources, "--sources")
        registry = TemplateRegistry.load(s.templates)
        for spec in json.loads(src.read_text(encoding="utf-8")):
            records += convert_source(SourceAdapter.from_json(spec, src.parent), registry, int(s.seed))
    if s.qa:
        records += _load_qa(_require_file(s.qa, "--qa"))
    if not records:
        raise InputError("no QA records: give --sources and/or --qa")

    equivalence = {}
    if s.equivalence:
        equivalence = json.loads(_require_file(s.equivalence, "--equivalence").read_text(encoding="utf-8"))
    overlaps = [tuple(p.split(",", 1)) for p in (s.overlap or [])]
    if any(len(p) != 2 for p in overlaps):
        raise InputError("--overlap takes DATASET_A,DATASET_B")
    plan = plan_splits(records, tuple(float(r) for r in s.ratios), overlaps, int(s.seed), equivalence)
    problems = split_violations(records, plan, equivalence, overlaps)

    with open(out_dir / "qa_manifest.jsonl", "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(dumps({**r.to_json(), "split": plan.split_of(r)}) + "\n")
    (out_dir / "split_plan.json").write_text(json.dumps(plan.to_json(), indent=2) + "\n", encoding="utf-8")
    manifest: dict[str, Any] = {
        "schema_version": SCHEMA_VERSION,
        "records": len(records),
        "split_counts": dict(sorted(Counter(plan.split_of(r) or "excluded" for r in records).items())),
        "exclusions": len(plan.exclusions),
        "split_violations": problems,
        "judge_threshold": int(s.threshold),
    }
    if problems:
        log.error("split integrity violations: %s", problems[:5])

    code = EXIT_DATA if problems else EXIT_OK
    if not s.skip_cot:
        videos = load_video_manifest(_require_file(s.videos, "--videos manifest"))
        sft_records = [r for r in records if plan.split_of(r) == "train_sft"]
        make = _policy_factory(s, "teacher")
        judge = _judge(s, load_asset("cot_rubric_v1.txt"))
        if judge is None:
            raise InputError(f"judge required: --judge-scores or --judge-endpoint/--judge-model ({ENV_JUDGE_ENDPOINT})")
        system_prompt = _system_prompt(s) or load_asset("system_prompt_v1.txt")
        cfg = _episode_config(s)
        result = distill_cot(
            sft_records,
            lambda r: make(r.qa_id, 0),
            judge,
            videos,
            judge_threshold=int(s.threshold),
            config=cfg,
            plan=plan,
            attempts=int(s.attempts),
            jobs=max(1, int(s.jobs)),
            system_prompt=system_prompt,
        )
        by_id = {r.qa_id: r for r in sft_records}
        prompt_text = system_prompt.replace("{max_tool_calls}", str(cfg.max_tool_calls))
        with open(out_dir / "sft.jsonl", "w", encoding="utf-8") as sft, \
                open(out_dir / "rejections.jsonl", "w", encoding="utf-8") as rej:
            for sample in result.samples:
                if sample.retained:
                    sft.write(dumps(to_sft_example(sample, by_id[sample.qa_id], prompt_text)) + "\n")
                else:
                    rej.write(dumps({
                        "qa_id": sample.qa_id,
                        "judge_score": sample.judge_score,
                        "format_valid": sample.trajectory.format_valid,
                        "diagnostics": list(sample.trajectory.diagnostics),
                        "rationale": sample.rationale,
                    }) + "\n")
            for qa_id, reason in result.failures:
                rej.write(dumps({"qa_id": qa_id, "failure": reason}) + "\n")
        manifest.update(
            sft_candidates=len(sft_records),
            retained=len(result.retained),
            rejected=len(result.samples) - len(result.retained),
            failures=len(result.failures),
        )
        if result.failures and code == EXIT_OK:
            code = EXIT_TRANSPORT
    manifest["config"] = dict(sorted(s.resolved.items()))
    (out_dir / "distill_manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return code


# --- argument parsing ---------------------------------------------------------

def _episode_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--videos", help="video manifest (JSON Lines)")
    p.add_argument("--k-initial", type=int, help="frames in the initial context (default 8)")
    p.add_argument("--k-per-call", type=int, help="frames returned per tool call (default 8)")
    p.add_argument("--max-tool-calls", type=int, help="tool-call budget per episode (default 6)")
    p.add_argument("--system-prompt", help="file replacing the bundled system prompt")


def _policy_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--script", help="scripted turns: JSON list, or mapping of question id to list")
    p.add_argument("--endpoint", help=f"chat-completions base URL (env {ENV_ENDPOINT})")
    p.add_argument("--model", help=f"model id (env {ENV_MODEL}); key read from {ENV_API_KEY}")
    p.add_argument("--temperature", type=float, help="sampling temperature (default 0.0)")
    p.add_argument("--max-tokens", type=int, help="max tokens per turn (default 2048)")
    p.add_argument("--max-retries", type=int, help="retries per request (default 4)")
    p.add_argument("--timeout", type=float, help="per-request timeout in seconds (default 120)")


def _judge_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--judge-endpoint", help=f"judge chat-completions base URL (env {ENV_JUDGE_ENDPOINT})")
    p.add_argument("--judge-model", help=f"judge model id (env {ENV_JUDGE_MODEL})")
    p.add_argument("--judge-scores", help="offline judge: JSON mapping question text to score")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vidagent", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON file of settings (flags win over it)")
        p.add_argument("--seed", type=int, help="seed recorded in outputs (default 0)")
        p.add_argument("--jobs", type=int, help="parallel episodes/requests (default 1)")
        p.add_argument("--out", help="output path (default stdout)")

    p = sub.add_parser("rollout", help="run episodes over a QA manifest")
    common(p)
    p.add_argument("--qa", help="QA manifest (JSON Lines)")
    p.add_argument("--group-size", type=int, help=f"rollouts per question (default 1; GRPO uses {DEFAULT_GROUP_SIZE})")
    _episode_flags(p)
    _policy_flags(p)

    p = sub.add_parser("score", help="gated reward for every trajectory in a log")
    common(p)
    p.add_argument("--log", help="trajectory log from rollout")
    p.add_argument("--scorer", choices=["auto", "exact", "normalized", "judge"])
    p.add_argument("--acc-gate-threshold", type=float)
    p.add_argument("--tool-success-coeff", type=float)
    p.add_argument("--curiosity-bonus", type=float)
    p.add_argument("--format-penalty", type=float)
    p.add_argument("--max-retries", type=int)
    p.add_argument("--timeout", type=float)
    _judge_flags(p)

    p = sub.add_parser("advantages", help="group advantages and clipped objective per prompt")
    common(p)
    p.add_argument("--rewards", help="reward report from score")
    p.add_argument("--clip-epsilon", type=float)
    p.add_argument("--kl-coeff", type=float)
    p.add_argument("--std-floor", type=float)
    p.add_argument("--backend", choices=kernels.available(), help="kernel backend (default from VIDAGENT_NO_NUMBA)")

    p = sub.add_parser("distill", help="templated QA, video-level splits, judge-filtered CoT")
    common(p)
    p.add_argument("--sources", help="JSON list of source adapters")
    p.add_argument("--templates", help="template registry JSON (default bundled)")
    p.add_argument("--qa", help="existing QA manifest to include")
    p.add_argument("--ratios", type=float, nargs=3, metavar=("SFT", "RL", "TEST"))
    p.add_argument("--overlap", action="append", metavar="A,B", help="datasets whose videos may coincide")
    p.add_argument("--equivalence", help="JSON mapping video_id to canonical video id")
    p.add_argument("--threshold", type=int, help=f"judge retention threshold (default {DEFAULT_JUDGE_THRESHOLD})")
    p.add_argument("--attempts", type=int, help="teacher generations per record (default 1)")
    p.add_argument("--out-dir", help="output directory")
    p.add_argument("--skip-cot", action="store_true", default=None, help="stop after the split plan")
    _episode_flags(p)
    _policy_flags(p)
    _judge_flags(p)

    p = sub.add_parser("stats", help="frame, tool-use and format statistics of a log")
    common(p)
    p.add_argument("--log", help="trajectory log")
    p.add_argument("--rewards", help="optional reward report for the histogram")
    return parser


COMMANDS = {
    "rollout": cmd_rollout,
    "score": cmd_score,
    "advantages": cmd_advantages,
    "distill": cmd_distill,
    "stats": cmd_stats,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](Settings(args))
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
