"""Gated tool-use reward.

    R = g_fmt * (acc + r_tool) + p_format
    r_tool = 0.5*acc if tool used and acc >= 0.5; 0.03 if tool used otherwise; else 0
    p_format = -0.05 * (1 - g_fmt)

Arithmetic runs in :class:`decimal.Decimal` on the shortest repr of each
float, so decimal inputs give decimal outputs (0.8 + 0.4 is 1.2, not
1.2000000000000002).
"""

from __future__ import annotations

import re
import string
from dataclasses import asdict, dataclass
from decimal import Decimal
from typing import Any, Protocol

from vidagent.policy import JudgeUnavailable
from vidagent.protocol import Trajectory, validate_trajectory


@dataclass(frozen=True)
class AccuracyScore:
    value: float
    scorer_id: str = "given"

    def __post_init__(self) -> None:
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"accuracy {self.value} outside [0, 1]")


@dataclass(frozen=True)
class RewardConfig:
    acc_gate_threshold: float = 0.5
    tool_success_coeff: float = 0.5
    curiosity_bonus: float = 0.03
    format_penalty: float = 0.05

    def __post_init__(self) -> None:
        if min(self.tool_success_coeff, self.curiosity_bonus, self.format_penalty) < 0:
            raise ValueError("reward constants must be non-negative")
        if not 0 < self.acc_gate_threshold <= 1:
            raise ValueError("acc_gate_threshold must be in (0, 1]")


@dataclass(frozen=True)
class RewardBreakdown:
    acc: float
    g_tool: int
    g_acc: int
    g_fmt: int
    r_tool: float
    p_format: float
    total: float

    def to_json(self) -> dict[str, Any]:
        return asdict(self)


def _dec(x: float) -> Decimal:
    return Decimal(repr(float(x)))


def gated_reward(acc: float, g_tool: int, g_acc: int, g_fmt: int, cfg: RewardConfig | None = None) -> RewardBreakdown:
    """Reward from explicit gate values.

    Gates are taken as given, including combinations compute_gates would
    never produce (g_acc=1 with acc below threshold).
    """
    cfg = cfg or RewardConfig()
    a = _dec(acc)
    if g_tool and g_acc:
        r_tool = _dec(cfg.tool_success_coeff) * a
    elif g_tool:
        r_tool = _dec(cfg.curiosity_bonus)
    else:
        r_tool = Decimal(0)
    p_format = -_dec(cfg.format_penalty) * (1 - g_fmt)
    total = g_fmt * (a + r_tool) + p_format
    return RewardBreakdown(
        acc=float(a),
        g_tool=int(g_tool),
        g_acc=int(g_acc),
        g_fmt=int(g_fmt),
        r_tool=float(r_tool),
        p_format=float(p_format) + 0.0,
        total=float(total),
    )


def compute_gates(traj: Trajectory, acc: AccuracyScore, cfg: RewardConfig | None = None) -> tuple[int, int, int]:
    cfg = cfg or RewardConfig()
    g_tool = int(traj.tool_calls >= 1)
    g_acc = int(_dec(acc.value) >= _dec(cfg.acc_gate_threshold))
    g_fmt = int(validate_trajectory(traj))
    return g_tool, g_acc, g_fmt


def compute_reward(traj: Trajectory, acc: AccuracyScore, cfg: RewardConfig | None = None) -> RewardBreakdown:
    g_tool, g_acc, g_fmt = compute_gates(traj, acc, cfg)
    return gated_reward(acc.value, g_tool, g_acc, g_fmt, cfg)


# --- answer scoring -------------------------------------------------------

_LETTER_PATTERNS = [
    re.compile(r"^\(?([A-Z])\)?[.:)]?$"),
    re.compile(r"^(?:THE\s+)?(?:ANSWER|OPTION|CHOICE)(?:\s+IS)?\s*[:\-]?\s*\(?([A-Z])\)?[.:)]?$"),
]


def normalize_choice(text: str) -> str | None:
    """Reduce a multiple-choice reply to its option letter.

    Accepted shapes (case-insensitive, surrounding whitespace ignored):
    ``B``, ``b)``, ``(B)``, ``B.``, ``B:``, ``Answer: B``, ``Option (b)``,
    ``The answer is B``. A leading letter followed by option text, as in
    ``B) lunge`` or ``B. lunge``, also counts. Anything else gives None.
    """
    t = " ".join(text.strip().upper().split())
    for pat in _LETTER_PATTERNS:
        m = pat.match(t)
        if m:
            return m.group(1)
    m = re.match(r"^\(?([A-Z])[.):]\s+\S", t)
    if m:
        return m.group(1)
    return None


_PUNCT = str.maketrans("", "", string.punctuation)


def normalize_text(text: str) -> str:
    return " ".join(text.casefold().translate(_PUNCT).split())


class Judge(Protocol):
    def score(self, question: str, reference: str, candidate: str, rubric: str | None = None) -> Any: ...


@dataclass(frozen=True)
class GroundTruth:
    answer: str
    answer_format: str = "multiple_choice"
    question: str = ""


def exact_match(answer: str, reference: str) -> float:
    ref_letter = normalize_choice(reference)
    got = normalize_choice(answer)
    if ref_letter is not None:
        return float(got == ref_letter)
    return float(normalize_text(answer) == normalize_text(reference))


def score_answer(
    answer: str | None,
    reference: GroundTruth,
    scorer: str = "auto",
    judge: Judge | None = None,
) -> AccuracyScore:
    """Accuracy of a final answer in [0, 1].

    ``scorer`` is ``exact`` (option letters), ``normalized`` (case and
    punctuation insensitive string equality), ``judge`` (0-100 judge score
    divided by 100) or ``auto`` (exact for multiple choice, judge otherwise).
    A missing answer scores 0 without consulting anything.
    """
    if scorer == "auto":
        scorer = "exact" if reference.answer_format == "multiple_choice" else "judge"
    if answer is None:
        return AccuracyScore(0.0, scorer)
    if scorer == "exact":
        return AccuracyScore(exact_match(answer, reference.answer), "exact")
    if scorer == "normalized":
        return AccuracyScore(float(normalize_text(answer) == normalize_text(reference.answer)), "normalized")
    if scorer == "judge":
        if judge is None:
            raise JudgeUnavailable("judge scorer selected but no judge configured")
        verdict = judge.score(reference.question, reference.answer, answer)
        return AccuracyScore(float(Decimal(verdict.score) / 100), "judge")
    raise ValueError(f"unknown scorer {scorer!r}")
