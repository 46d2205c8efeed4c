"""Group-relative advantages and the clipped GRPO objective.

Only evaluates numbers over supplied rewards and probability ratios; the
weight update belongs to whatever trainer consumes these values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from vidagent import kernels

DEFAULT_GROUP_SIZE = 8


class GroupTooSmall(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


class EmptyInput(ValueError):
    pass


@dataclass(frozen=True)
class GrpoConfig:
    clip_epsilon: float = 0.2
    kl_coeff: float = 0.01
    std_floor: float = 1e-6

    def __post_init__(self) -> None:
        if not 0 < self.clip_epsilon < 1:
            raise ValueError("clip_epsilon must be in (0, 1)")
        if self.kl_coeff < 0 or self.std_floor <= 0:
            raise ValueError("kl_coeff must be >= 0 and std_floor > 0")


@dataclass(frozen=True)
class RolloutGroup:
    prompt_id: str
    rewards: tuple[float, ...]
    ratios: tuple[float, ...]
    kl_to_ref: float = 0.0

    def __post_init__(self) -> None:
        if len(self.rewards) < 2:
            raise GroupTooSmall(f"group {self.prompt_id!r} has {len(self.rewards)} rollouts")
        if len(self.ratios) != len(self.rewards):
            raise DimensionMismatch(f"{len(self.rewards)} rewards vs {len(self.ratios)} ratios")
        if not all(r > 0 for r in self.ratios):
            raise ValueError("probability ratios must be positive")
        if self.kl_to_ref < 0:
            raise ValueError("KL must be non-negative")


@dataclass(frozen=True)
class AdvantageSet:
    advantages: tuple[float, ...]
    mean_r: float
    std_r: float

    @property
    def degenerate(self) -> bool:
        return self.std_r == 0.0 or not any(self.advantages)


def compute_advantages(rewards: Sequence[float], cfg: GrpoConfig | None = None, backend: str | None = None) -> AdvantageSet:
    """A_i = (r_i - mean) / max(population std, std_floor)."""
    cfg = cfg or GrpoConfig()
    if len(rewards) < 2:
        raise GroupTooSmall(f"need at least 2 rewards, got {len(rewards)}")
    k = kernels.get(backend)
    adv, means, stds = k.group_advantages(np.asarray(rewards, dtype=np.float64), np.array([0, len(rewards)]), cfg.std_floor)
    return AdvantageSet(tuple(float(a) for a in adv), float(means[0]), float(stds[0]))


def compute_advantages_batch(
    groups: Sequence[Sequence[float]], cfg: GrpoConfig | None = None, backend: str | None = None
) -> list[AdvantageSet]:
    """Advantages for many groups in one kernel call."""
    cfg = cfg or GrpoConfig()
    for g in groups:
        if len(g) < 2:
            raise GroupTooSmall(f"need at least 2 rewards, got {len(g)}")
    if not groups:
        return []
    offsets = np.concatenate([[0], np.cumsum([len(g) for g in groups])])
    flat = np.concatenate([np.asarray(g, dtype=np.float64) for g in groups])
    adv, means, stds = kernels.get(backend).group_advantages(flat, offsets, cfg.std_floor)
    return [
        AdvantageSet(tuple(adv[offsets[i]:offsets[i + 1]].tolist()), float(means[i]), float(stds[i]))
        for i in range(len(groups))
    ]


def surrogate_terms(ratios: Sequence[float], advantages: Sequence[float], eps: float) -> list[float]:
    """Per-rollout min(rho*A, clip(rho, 1-eps, 1+eps)*A), no averaging."""
    if len(ratios) != len(advantages):
        raise DimensionMismatch(f"{len(ratios)} ratios vs {len(advantages)} advantages")
    out = []
    for rho, a in zip(ratios, advantages):
        clipped = min(max(rho, 1.0 - eps), 1.0 + eps)
        out.append(min(rho * a, clipped * a))
    return out


def objective_value(
    group: RolloutGroup,
    advantages: AdvantageSet,
    cfg: GrpoConfig | None = None,
    kl: float | None = None,
    backend: str | None = None,
) -> float:
    """Mean clipped surrogate minus kl_coeff * KL.

    ``kl`` overrides ``group.kl_to_ref`` when given.
    """
    cfg = cfg or GrpoConfig()
    if len(advantages.advantages) != len(group.ratios):
        raise DimensionMismatch(
            f"{len(group.ratios)} ratios vs {len(advantages.advantages)} advantages"
        )
    surr = kernels.get(backend).clipped_surrogate(
        np.asarray(group.ratios, dtype=np.float64),
        np.asarray(advantages.advantages, dtype=np.float64),
        np.array([0, len(group.ratios)]),
        cfg.clip_epsilon,
    )
    kl_value = group.kl_to_ref if kl is None else kl
    return float(surr[0]) - cfg.kl_coeff * kl_value


def kl_estimate(logp_theta: Sequence[float], logp_ref: Sequence[float], backend: str | None = None) -> float:
    """Token-mean of exp(d) - d - 1 with d = logp_ref - logp_theta.

    Non-negative for every input and zero when the two sequences match.
    """
    if len(logp_theta) != len(logp_ref):
        raise DimensionMismatch(f"{len(logp_theta)} vs {len(logp_ref)} log-probs")
    if len(logp_theta) == 0:
        raise EmptyInput("no tokens")
    value = kernels.get(backend).kl_k3(np.asarray(logp_theta, dtype=np.float64), np.asarray(logp_ref, dtype=np.float64))
    if math.isnan(value):
        raise ValueError("log-probabilities must be finite")
    return max(value, 0.0)
