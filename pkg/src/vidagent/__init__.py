"""Agentic video reasoning loop: a frame-extraction tool protocol, episode
environment, gated tool-use reward, GRPO advantages, and CoT distillation."""

from vidagent.environment import (
    EpisodeConfig,
    EpisodeRecord,
    FrameSet,
    VideoHandle,
    extract_frames,
    initial_context,
    run_episode,
)
from vidagent.grpo import (
    AdvantageSet,
    GrpoConfig,
    RolloutGroup,
    compute_advantages,
    kl_estimate,
    objective_value,
)
from vidagent.policy import (
    JudgeVerdict,
    ReplayPolicy,
    ScriptedPolicy,
    judge_score,
    remote_policy,
    scripted_policy,
)
from vidagent.protocol import (
    FrameExtraction,
    FrameInterval,
    OutputAnswer,
    Step,
    Thought,
    Trajectory,
    parse_turn,
    serialize_turn,
    validate_trajectory,
)
from vidagent.reward import (
    AccuracyScore,
    RewardBreakdown,
    RewardConfig,
    compute_gates,
    compute_reward,
    score_answer,
)

__version__ = "0.1.0"
