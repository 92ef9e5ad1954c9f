"""Held-out evaluation of multi-turn self-correction behavior.

Every task is rolled out with infer_multi and summarized per turn
(execution rate, mean rule/judge/format/composite) plus between-turn
self-correction diagnostics computed on turns one and two: average rule
improvement on the subset where both turns execute, strict improved and
degraded percentages over the full set, their judge-score variants with a
minimum-shift threshold, and the repeated-code rate. Single-turn
evaluation leaves the between-turn fields as None.
"""

from __future__ import annotations

import dataclasses
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import policy, rollout
from .chartlang import ElementSet
from .data import Task
from .policy import PolicyParams
from .rewards import RewardWeights
from .rollout import SamplingConfig, Trajectory


@dataclass
class EvalConfig:
    turns: int = 2
    temperature: float = 0.0
    alpha: float = 0.8
    beta: float = 0.1
    judge_threshold: float = 0.1
    repeated_exact: bool = False
    threads: int = 1
    master_seed: int = 0
    max_turn_tokens: int = policy.MAX_TURN_TOKENS


@dataclass
class EvalReport:
    turns: int
    n_tasks: int
    exec_rate: list[float]
    mean_rule: list[float]
    mean_judge: list[float]
    mean_format: list[float]
    mean_composite: list[float]
    avg_improvement_both_exec: Optional[float]
    pct_improved: Optional[float]
    pct_degraded: Optional[float]
    pct_improved_judge: Optional[float]
    pct_degraded_judge: Optional[float]
    repeated_code_rate: Optional[float]


def evaluate(params: PolicyParams, tasks: Sequence[Task], cfg: EvalConfig,
             judge=None, traj_log_path: Optional[str | Path] = None
             ) -> EvalReport:
    """Roll out every task and aggregate. Rule and judge scores are
    always computed here regardless of the reward weights. Trajectories
    are optionally written as line-delimited JSON in task order."""
    weights = RewardWeights(cfg.alpha, cfg.beta)
    sampling = SamplingConfig(cfg.temperature, cfg.max_turn_tokens)

    def one(task: Task) -> Trajectory:
        return rollout.infer_multi(params, task, cfg.turns, weights, sampling,
                                   cfg.master_seed, judge)

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            trajectories = list(pool.map(one, tasks))
    else:
        trajectories = [one(task) for task in tasks]

    if traj_log_path is not None:
        with open(traj_log_path, "w", encoding="utf-8") as fh:
            for traj in trajectories:
                record = rollout.trajectory_to_json(traj, "infer",
                                                    cfg.master_seed)
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    return summarize(trajectories, cfg)


def summarize(trajectories: Sequence[Trajectory], cfg: EvalConfig) -> EvalReport:
    from .grpo import repeated_code

    n = len(trajectories)
    turns = cfg.turns
    exec_rate, mean_rule, mean_judge, mean_format, mean_composite = (
        [], [], [], [], [])
    for t in range(turns):
        execs = [1.0 if isinstance(tr.turns[t].result, ElementSet) else 0.0
                 for tr in trajectories]
        exec_rate.append(float(np.mean(execs)) if execs else 0.0)
        mean_rule.append(_mean([tr.turns[t].rewards.rule for tr in trajectories]))
        mean_judge.append(_mean([tr.turns[t].rewards.judge for tr in trajectories]))
        mean_format.append(_mean([tr.turns[t].rewards.format for tr in trajectories]))
        mean_composite.append(_mean([tr.turns[t].rewards.composite
                                     for tr in trajectories]))

    if turns < 2 or n == 0:
        return EvalReport(turns, n, exec_rate, mean_rule, mean_judge,
                          mean_format, mean_composite, None, None, None,
                          None, None, None)

    deltas_both_exec = []
    improved = degraded = 0
    judge_improved = judge_degraded = 0
    repeats = 0
    for tr in trajectories:
        first, second = tr.turns[0], tr.turns[1]
        if (isinstance(first.result, ElementSet)
                and isinstance(second.result, ElementSet)):
            deltas_both_exec.append(second.rewards.rule - first.rewards.rule)
        if second.rewards.rule > first.rewards.rule:
            improved += 1
        elif second.rewards.rule < first.rewards.rule:
            degraded += 1
        if second.rewards.judge - first.rewards.judge >= cfg.judge_threshold:
            judge_improved += 1
        elif first.rewards.judge - second.rewards.judge >= cfg.judge_threshold:
            judge_degraded += 1
        if repeated_code(tr, exact=cfg.repeated_exact):
            repeats += 1

    return EvalReport(
        turns, n, exec_rate, mean_rule, mean_judge, mean_format,
        mean_composite,
        avg_improvement_both_exec=(
            float(np.mean(deltas_both_exec)) if deltas_both_exec else None),
        pct_improved=improved / n,
        pct_degraded=degraded / n,
        pct_improved_judge=judge_improved / n,
        pct_degraded_judge=judge_degraded / n,
        repeated_code_rate=repeats / n,
    )


def _mean(xs) -> float:
    return float(np.mean(xs)) if len(xs) else 0.0


def report_to_dict(report: EvalReport) -> dict:
    return dataclasses.asdict(report)


def report_to_table(report: EvalReport) -> str:
    """Flat tab-separated rendering: one row per turn, then one row per
    between-turn diagnostic."""
    lines = ["turn\texec_rate\tmean_rule\tmean_judge\tmean_format\tmean_composite"]
    for t in range(report.turns):
        lines.append("\t".join([
            str(t + 1),
            repr(report.exec_rate[t]),
            repr(report.mean_rule[t]),
            repr(report.mean_judge[t]),
            repr(report.mean_format[t]),
            repr(report.mean_composite[t]),
        ]))
    lines.append("metric\tvalue")
    for name in ("avg_improvement_both_exec", "pct_improved", "pct_degraded",
                 "pct_improved_judge", "pct_degraded_judge",
                 "repeated_code_rate"):
        value = getattr(report, name)
        lines.append(f"{name}\t{'absent' if value is None else repr(value)}")
    lines.append(f"n_tasks\t{report.n_tasks}")
    return "\n".join(lines) + "\n"
