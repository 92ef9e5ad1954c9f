"""Multi-turn rollouts with execution feedback.

A conversation context is the task readout, then alternating response /
feedback blocks, then the generation marker. Feedback is the interpreter
output for the previous turn: the rendered element readout on success, or
the error code. Group rollout strategies differ in what a group of G
samples shares (nothing, or one online first turn) and in what scalar
reward each member is assigned for advantage computation.

Every random draw comes from a generator derived by hashing the master
seed with the task id, group member, step, and turn, so replays are
bit-identical no matter how work is batched or threaded.
"""

from __future__ import annotations

import dataclasses
import hashlib
import random
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import chartlang, policy, rewards
from .chartlang import (
    EOT, FB_ERR, FB_OK, GEN, TASK_OPEN,
    ElementSet, ExecError, elements_to_json, extract_code_block,
    serialize_elements,
)
from .data import Task
from .policy import MAX_CONTEXT, MAX_TURN_TOKENS, PolicyParams
from .rewards import (
    RewardBreakdown, RewardWeights, TrajRewardParams,
    composite_reward, format_reward, heuristic_judge, rule_reward,
    trajectory_reward,
)

STRATEGIES = ("full", "shared", "single", "turnwise")
MAX_TURNS = 5


def derive_rng(*parts) -> np.random.Generator:
    """Independent Philox stream keyed by hashing the parts."""
    key = "|".join(str(p) for p in parts)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return np.random.Generator(np.random.Philox(
        key=int.from_bytes(digest[:16], "little")))


def derive_pyrandom(*parts) -> random.Random:
    key = "|".join(str(p) for p in parts)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return random.Random(int.from_bytes(digest[:8], "little"))


class HeuristicJudge:
    """Local rubric grader with the RemoteJudge scoring interface."""

    fallback_count = 0

    def score(self, pred: ElementSet | ExecError, ref: ElementSet) -> float:
        return heuristic_judge(pred, ref)[1]


DEFAULT_JUDGE = HeuristicJudge()


@dataclass(frozen=True)
class Feedback:
    kind: str  # "rendered" or "error"
    tokens: tuple[str, ...]


@dataclass
class Turn:
    response: list[str]
    code: Optional[list[str]]
    result: ElementSet | ExecError
    rewards: RewardBreakdown


@dataclass
class Trajectory:
    task: Task
    turns: list[Turn]
    feedbacks: list[Feedback]
    scalar_reward: float = 0.0


@dataclass
class GroupRollout:
    task: Task
    strategy: str
    trajectories: list[Trajectory]
    shared_first: Optional[Turn] = None


@dataclass(frozen=True)
class SamplingConfig:
    temperature: float = 1.0
    max_turn_tokens: int = MAX_TURN_TOKENS


def strip_eot(response: Sequence[str]) -> list[str]:
    toks = list(response)
    if toks and toks[-1] == EOT:
        toks.pop()
    return toks


def feedback_for(result: ElementSet | ExecError) -> Feedback:
    if isinstance(result, ExecError):
        return Feedback("error", (FB_ERR, result.code))
    return Feedback("rendered", (FB_OK, *serialize_elements(result)))


def build_feedback(turn: Turn) -> Feedback:
    return feedback_for(turn.result)


def build_context(task: Task,
                  history: Sequence[tuple[Sequence[str], Sequence[str]]]
                  ) -> list[str]:
    """Task block, then (response, feedback) pairs, then the generation
    marker. When the result would exceed the policy context limit, whole
    pairs are dropped oldest first; the task block is never dropped."""
    task_block = [TASK_OPEN] + serialize_elements(task.elements)
    pairs = [strip_eot(resp) + list(fb) for resp, fb in history]
    while pairs and len(task_block) + sum(map(len, pairs)) + 1 > MAX_CONTEXT:
        pairs.pop(0)
    flat = [tok for pair in pairs for tok in pair]
    return task_block + flat + [GEN]


def score_response(response: Sequence[str], task: Task,
                   weights: RewardWeights, judge=None,
                   want_rule: Optional[bool] = None,
                   want_judge: Optional[bool] = None) -> Turn:
    """Extract, run, and score one response. A missing code block counts
    as a parse failure. Rule and judge components are only computed when
    their weight is nonzero (or explicitly requested); skipped components
    are recorded as 0.0 and contribute nothing to the composite."""
    response = list(response)
    code = extract_code_block(response)
    if code is None:
        result: ElementSet | ExecError = ExecError.parse_error(0)
    else:
        parsed = chartlang.parse(code)
        if isinstance(parsed, ExecError):
            result = parsed
        else:
            result = chartlang.execute(parsed)

    fmt = format_reward(response)
    if want_rule is None:
        want_rule = weights.alpha > 0
    if want_judge is None:
        want_judge = weights.beta > 0

    if want_rule:
        rs = rule_reward(result, task.elements)
    else:
        rs = rewards.RuleScores(0.0, 0.0, 0.0, 0.0, 0.0)
    judge_val = 0.0
    if want_judge:
        judge_val = (judge or DEFAULT_JUDGE).score(result, task.elements)

    composite = composite_reward(fmt, rs.rule, judge_val, weights)
    breakdown = RewardBreakdown(fmt, rs.text, rs.type, rs.color, rs.layout,
                                rs.rule, judge_val, composite)
    return Turn(response, code, result, breakdown)


def _score_batch(responses, task, weights, judge, want_rule, want_judge):
    return [score_response(r, task, weights, judge, want_rule, want_judge)
            for r in responses]


def rollout_full(params: PolicyParams, task: Task, group_size: int,
                 weights: RewardWeights, traj_params: TrajRewardParams,
                 sampling: SamplingConfig, master_seed: int, step: int,
                 judge=None) -> GroupRollout:
    """G independent two-turn trajectories; member reward is the full
    trajectory reward."""
    ctx1 = build_context(task, [])
    rngs1 = [derive_rng(master_seed, task.task_id, m, step, 1)
             for m in range(group_size)]
    responses1 = policy.sample_batch(params, [ctx1] * group_size,
                                     sampling.temperature,
                                     sampling.max_turn_tokens, rngs1)
    turns1 = _score_batch(responses1, task, weights, judge, None, None)
    feedbacks = [build_feedback(t) for t in turns1]
    ctx2s = [build_context(task, [(t.response, fb.tokens)])
             for t, fb in zip(turns1, feedbacks)]
    rngs2 = [derive_rng(master_seed, task.task_id, m, step, 2)
             for m in range(group_size)]
    responses2 = policy.sample_batch(params, ctx2s, sampling.temperature,
                                     sampling.max_turn_tokens, rngs2)
    turns2 = _score_batch(responses2, task, weights, judge, None, None)

    trajectories = []
    for t1, fb, t2 in zip(turns1, feedbacks, turns2):
        scalar = trajectory_reward(t1.rewards.composite, t2.rewards.composite,
                                   traj_params)
        trajectories.append(Trajectory(task, [t1, t2], [fb], scalar))
    return GroupRollout(task, "full", trajectories)


def rollout_shared(params: PolicyParams, task: Task, group_size: int,
                   weights: RewardWeights, sampling: SamplingConfig,
                   master_seed: int, step: int, judge=None,
                   forced_first_response: Optional[Sequence[str]] = None
                   ) -> GroupRollout:
    """One first turn sampled online and shared verbatim by all members
    as context; only second turns vary. Member reward is the second-turn
    composite. forced_first_response substitutes the sampled first turn
    (used to pin down error-feedback behavior in tests)."""
    ctx1 = build_context(task, [])
    if forced_first_response is not None:
        response1 = list(forced_first_response)
    else:
        rng1 = derive_rng(master_seed, task.task_id, "shared", step, 1)
        response1 = policy.sample(params, ctx1, sampling.temperature,
                                  sampling.max_turn_tokens, rng1)
    turn1 = score_response(response1, task, weights, judge)
    fb = build_feedback(turn1)
    ctx2 = build_context(task, [(turn1.response, fb.tokens)])
    rngs2 = [derive_rng(master_seed, task.task_id, m, step, 2)
             for m in range(group_size)]
    responses2 = policy.sample_batch(params, [ctx2] * group_size,
                                     sampling.temperature,
                                     sampling.max_turn_tokens, rngs2)
    turns2 = _score_batch(responses2, task, weights, judge, None, None)

    trajectories = [
        Trajectory(task, [turn1, t2], [fb], t2.rewards.composite)
        for t2 in turns2
    ]
    return GroupRollout(task, "shared", trajectories, shared_first=turn1)


def rollout_single(params: PolicyParams, task: Task, group_size: int,
                   weights: RewardWeights, sampling: SamplingConfig,
                   master_seed: int, step: int, judge=None) -> GroupRollout:
    """G one-turn trajectories; member reward is the first-turn composite."""
    ctx1 = build_context(task, [])
    rngs = [derive_rng(master_seed, task.task_id, m, step, 1)
            for m in range(group_size)]
    responses = policy.sample_batch(params, [ctx1] * group_size,
                                    sampling.temperature,
                                    sampling.max_turn_tokens, rngs)
    turns = _score_batch(responses, task, weights, judge, None, None)
    trajectories = [Trajectory(task, [t], [], t.rewards.composite)
                    for t in turns]
    return GroupRollout(task, "single", trajectories)


def rollout_turnwise(params: PolicyParams, tasks: Sequence[Task],
                     group_size: int, weights: RewardWeights,
                     sampling: SamplingConfig, master_seed: int, step: int,
                     mix: float = 0.5, judge=None) -> list[GroupRollout]:
    """Per-task seeded coin: probability mix of a single-turn group,
    otherwise a shared-first-turn group."""
    if not 0.0 <= mix <= 1.0:
        raise ValueError("mix must be within [0, 1]")
    threshold = int(mix * 1_000_000_000)
    groups = []
    for task in tasks:
        coin = derive_pyrandom(master_seed, task.task_id, step, "mix")
        if coin.randrange(1_000_000_000) < threshold:
            groups.append(rollout_single(params, task, group_size, weights,
                                         sampling, master_seed, step, judge))
        else:
            groups.append(rollout_shared(params, task, group_size, weights,
                                         sampling, master_seed, step, judge))
    return groups


def infer_multi(params: PolicyParams, task: Task, turns: int,
                weights: RewardWeights, sampling: SamplingConfig,
                master_seed: int = 0, judge=None,
                want_judge: bool = True) -> Trajectory:
    """Chain up to MAX_TURNS inference turns, feeding each turn the
    interpreter feedback for the previous one."""
    if not 1 <= turns <= MAX_TURNS:
        raise ValueError(f"turns must be within 1..{MAX_TURNS}")
    history: list[tuple[Sequence[str], Sequence[str]]] = []
    turn_list: list[Turn] = []
    feedbacks: list[Feedback] = []
    for t in range(1, turns + 1):
        ctx = build_context(task, history)
        rng = None
        if sampling.temperature > 0:
            rng = derive_rng(master_seed, task.task_id, "infer", 0, t)
        response = policy.sample(params, ctx, sampling.temperature,
                                 sampling.max_turn_tokens, rng)
        turn = score_response(response, task, weights, judge, want_rule=True,
                              want_judge=want_judge)
        turn_list.append(turn)
        if t < turns:
            fb = build_feedback(turn)
            feedbacks.append(fb)
            history.append((turn.response, fb.tokens))
    return Trajectory(task, turn_list, feedbacks)


def result_to_json(result: ElementSet | ExecError) -> dict:
    if isinstance(result, ExecError):
        return {"error": result.code, "message": result.message}
    return elements_to_json(result)


def trajectory_to_json(traj: Trajectory, strategy: str, master_seed: int,
                       step: int = 0) -> dict:
    return {
        "task_id": traj.task.task_id,
        "strategy": strategy,
        "turns": [
            {
                "response": turn.response,
                "code": turn.code,
                "exec": result_to_json(turn.result),
                "rewards": dataclasses.asdict(turn.rewards),
            }
            for turn in traj.turns
        ],
        "feedbacks": [list(fb.tokens) for fb in traj.feedbacks],
        "seed": {"master": master_seed, "step": step},
    }
