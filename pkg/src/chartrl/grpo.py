"""Group-relative policy optimization over chart rollouts.

Advantages are group-standardized rewards (population std, zeroed for
degenerate groups). Each strategy has its own gradient accumulator over
the sampled point: full-trajectory differentiates both turns, shared
first turn only the second, single-turn only the first. Log-probabilities
are token-mean per turn. The buffers hold +dJ/dtheta and the Adam step
ascends. One update per batch of rollouts, strictly on-policy; there is
no KL term or ratio clipping (kl_coeff exists in the config as a reserved
hook and must stay 0).
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import chartlang, policy, rollout
from .data import Task
from .policy import PolicyParams
from .rewards import RemoteJudge, RewardWeights, TrajRewardParams
from .rollout import GroupRollout, SamplingConfig, Trajectory, build_context

ADV_EPS = 1e-6
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class ConfigError(ValueError):
    """Invalid configuration; carries the offending key."""

    def __init__(self, key: str, message: str):
        super().__init__(f"config key '{key}': {message}")
        self.key = key


class NumericAbort(RuntimeError):
    """Non-finite loss or gradient; diagnostics name the offending group."""


def advantages(rewards: Sequence[float], eps: float = ADV_EPS) -> np.ndarray:
    """Group-standardized advantages (R - mean) / std with population
    std. Groups whose std falls below eps (all-identical rewards) get
    all-zero advantages instead of a blow-up."""
    r = np.asarray(rewards, dtype=np.float64)
    mu = r.mean()
    sigma = math.sqrt(float(((r - mu) ** 2).mean()))
    if sigma < eps:
        return np.zeros_like(r)
    return (r - mu) / sigma


def _turn_context(traj: Trajectory, turn_index: int) -> list[str]:
    history = [(traj.turns[k].response, traj.feedbacks[k].tokens)
               for k in range(turn_index)]
    return build_context(traj.task, history)


def grad_full(group: GroupRollout, params: PolicyParams) -> np.ndarray:
    """Sum over members of A_i times the gradient of both turns'
    token-mean log-probabilities."""
    buf = policy.grad_buffer(params)
    adv = advantages([t.scalar_reward for t in group.trajectories])
    for traj, a in zip(group.trajectories, adv):
        for k, turn in enumerate(traj.turns):
            ctx = _turn_context(traj, k)
            policy.grad_logprob(params, ctx, turn.response,
                                float(a) / len(turn.response), buf)
    return buf


def grad_shared(group: GroupRollout, params: PolicyParams) -> np.ndarray:
    """Sum over members of A_i times the gradient of the second turn
    only; the shared first turn is conditioning context and receives no
    gradient."""
    buf = policy.grad_buffer(params)
    adv = advantages([t.scalar_reward for t in group.trajectories])
    for traj, a in zip(group.trajectories, adv):
        ctx = _turn_context(traj, 1)
        policy.grad_logprob(params, ctx, traj.turns[1].response,
                            float(a) / len(traj.turns[1].response), buf)
    return buf


def grad_single(group: GroupRollout, params: PolicyParams) -> np.ndarray:
    buf = policy.grad_buffer(params)
    adv = advantages([t.scalar_reward for t in group.trajectories])
    for traj, a in zip(group.trajectories, adv):
        ctx = _turn_context(traj, 0)
        policy.grad_logprob(params, ctx, traj.turns[0].response,
                            float(a) / len(traj.turns[0].response), buf)
    return buf


_GRAD_BY_STRATEGY = {"full": grad_full, "shared": grad_shared,
                     "single": grad_single}


def grad_for(group: GroupRollout, params: PolicyParams) -> np.ndarray:
    return _GRAD_BY_STRATEGY[group.strategy](group, params)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @staticmethod
    def for_params(params: PolicyParams) -> "AdamState":
        return AdamState(np.zeros_like(params.flat), np.zeros_like(params.flat))


def opt_step(params: PolicyParams, buffer: np.ndarray, state: AdamState,
             lr: float) -> PolicyParams:
    """Bias-corrected Adam ascent along the buffer. Rejects non-finite
    gradients. Returns a fresh parameter snapshot."""
    if not np.all(np.isfinite(buffer)):
        raise NumericAbort("non-finite gradient buffer in optimizer step")
    state.t += 1
    state.m = ADAM_BETA1 * state.m + (1.0 - ADAM_BETA1) * buffer
    state.v = ADAM_BETA2 * state.v + (1.0 - ADAM_BETA2) * buffer * buffer
    m_hat = state.m / (1.0 - ADAM_BETA1 ** state.t)
    v_hat = state.v / (1.0 - ADAM_BETA2 ** state.t)
    new_flat = params.flat + lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return dataclasses.replace(params, flat=new_flat)


@dataclass
class StageConfig:
    strategy: str
    epochs: int = 1
    gamma: float = 0.0
    eta: float = 0.0
    mix: float = 0.5


def default_stages() -> list[StageConfig]:
    """The two-stage recipe: shared-first-turn, then full-trajectory with
    discount and boost off."""
    return [StageConfig("shared", epochs=1),
            StageConfig("full", epochs=1, gamma=0.0, eta=0.0)]


@dataclass
class TrainConfig:
    stages: list[StageConfig] = field(default_factory=default_stages)
    group_size: int = 8
    batch_size: int = 32
    lr: float = 1e-3
    alpha: float = 0.8
    beta: float = 0.0
    temperature: float = 1.0
    max_turn_tokens: int = policy.MAX_TURN_TOKENS
    seed: int = 0
    threads: int = 1
    eval_every: int = 0
    eval_turns: int = 2
    judge_url: Optional[str] = None
    judge_timeout_ms: int = 2000
    kl_coeff: float = 0.0


def validate_config(config: TrainConfig) -> TrainConfig:
    if not config.stages:
        raise ConfigError("stages", "at least one stage is required")
    for i, stage in enumerate(config.stages):
        if stage.strategy not in rollout.STRATEGIES:
            raise ConfigError(f"stages[{i}].strategy",
                              f"must be one of {rollout.STRATEGIES}")
        if stage.epochs < 1:
            raise ConfigError(f"stages[{i}].epochs", "must be >= 1")
        for name in ("gamma", "eta"):
            val = getattr(stage, name)
            if not (math.isfinite(val) and val >= 0.0):
                raise ConfigError(f"stages[{i}].{name}",
                                  "must be finite and >= 0")
        if not 0.0 <= stage.mix <= 1.0:
            raise ConfigError(f"stages[{i}].mix", "must be within [0, 1]")
    if config.group_size < 2:
        raise ConfigError("group_size", "must be >= 2")
    if config.batch_size < 1:
        raise ConfigError("batch_size", "must be >= 1")
    if not (math.isfinite(config.lr) and config.lr > 0):
        raise ConfigError("lr", "must be finite and > 0")
    try:
        RewardWeights(config.alpha, config.beta)
    except ValueError as exc:
        raise ConfigError("alpha/beta", str(exc)) from exc
    if config.temperature < 0:
        raise ConfigError("temperature", "must be >= 0")
    if not 1 <= config.max_turn_tokens <= policy.MAX_TURN_TOKENS:
        raise ConfigError("max_turn_tokens",
                          f"must be within 1..{policy.MAX_TURN_TOKENS}")
    if config.threads < 1:
        raise ConfigError("threads", "must be >= 1")
    if config.eval_every < 0:
        raise ConfigError("eval_every", "must be >= 0")
    if not 1 <= config.eval_turns <= rollout.MAX_TURNS:
        raise ConfigError("eval_turns", f"must be within 1..{rollout.MAX_TURNS}")
    if config.judge_timeout_ms < 1:
        raise ConfigError("judge_timeout_ms", "must be >= 1")
    if config.kl_coeff != 0.0:
        raise ConfigError("kl_coeff", "reserved hook, only 0.0 is supported")
    return config


_CONFIG_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}
_STAGE_KEYS = {f.name for f in dataclasses.fields(StageConfig)}


def config_from_dict(obj: dict, overrides: Optional[dict] = None) -> TrainConfig:
    """Build a TrainConfig from plain dicts (config file contents plus
    command-line overrides). Unknown keys are config errors."""
    merged = dict(obj)
    if overrides:
        merged.update({k: v for k, v in overrides.items() if v is not None})
    unknown = set(merged) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown key")
    stages_raw = merged.pop("stages", None)
    stages = []
    if stages_raw is not None:
        if not isinstance(stages_raw, list):
            raise ConfigError("stages", "must be a list of stage objects")
        for i, stage_obj in enumerate(stages_raw):
            if not isinstance(stage_obj, dict):
                raise ConfigError(f"stages[{i}]", "must be an object")
            bad = set(stage_obj) - _STAGE_KEYS
            if bad:
                raise ConfigError(f"stages[{i}].{sorted(bad)[0]}", "unknown key")
            if "strategy" not in stage_obj:
                raise ConfigError(f"stages[{i}].strategy", "required")
            try:
                stages.append(StageConfig(**stage_obj))
            except TypeError as exc:
                raise ConfigError(f"stages[{i}]", str(exc)) from exc
    try:
        config = TrainConfig(stages=stages or default_stages(), **merged)
    except TypeError as exc:
        raise ConfigError("stages", str(exc)) from exc
    return validate_config(config)


def load_config(path: str | Path, overrides: Optional[dict] = None) -> TrainConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError("<file>", f"{path} must hold a JSON object")
    return config_from_dict(obj, overrides)


def config_to_dict(config: TrainConfig) -> dict:
    out = dataclasses.asdict(config)
    out["stages"] = [dataclasses.asdict(s) for s in config.stages]
    return out


def write_config_echo(config_obj: dict, out_dir: str | Path) -> None:
    path = Path(out_dir) / "config_echo.json"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(config_obj, sort_keys=True, indent=2) + "\n")


def _canonical_code(code: Optional[list[str]]) -> Optional[tuple[str, ...]]:
    if code is None:
        return None
    parsed = chartlang.parse(code)
    if isinstance(parsed, chartlang.ExecError):
        return None
    return tuple(chartlang.canonicalize(parsed))


def repeated_code(traj: Trajectory, exact: bool = False) -> bool:
    """True when the final turn's program is the first turn's program
    again: canonical-form equality by default, raw token equality in
    exact mode. Missing or unparseable code on either side is never a
    repeat."""
    if len(traj.turns) < 2:
        return False
    first, last = traj.turns[0].code, traj.turns[-1].code
    if exact:
        return first is not None and last is not None and first == last
    c1, c2 = _canonical_code(first), _canonical_code(last)
    return c1 is not None and c1 == c2


def _block_len(response: list[str], open_tok: str, close_tok: str) -> int:
    try:
        i = response.index(open_tok)
        j = response.index(close_tok, i + 1)
    except ValueError:
        return 0
    return j - i - 1


def step_metrics(step: int, stage: int, groups: list[GroupRollout]) -> dict:
    """Trajectory-weighted means over everything sampled this step.
    mean_r1/mean_r2 are first/final-turn composites (equal for one-turn
    trajectories)."""
    r1s, r2s, fmts, rules, judges = [], [], [], [], []
    think_lens, code_lens = [], []
    two_turn = 0
    repeats = 0
    for group in groups:
        for traj in group.trajectories:
            r1s.append(traj.turns[0].rewards.composite)
            r2s.append(traj.turns[-1].rewards.composite)
            for turn in traj.turns:
                fmts.append(turn.rewards.format)
                rules.append(turn.rewards.rule)
                judges.append(turn.rewards.judge)
                think_lens.append(_block_len(turn.response,
                                             chartlang.THINK_OPEN,
                                             chartlang.THINK_CLOSE))
                code_lens.append(len(turn.code) if turn.code is not None else 0)
            if len(traj.turns) >= 2:
                two_turn += 1
                if repeated_code(traj):
                    repeats += 1

    def mean(xs):
        return float(np.mean(xs)) if xs else 0.0

    return {
        "step": step,
        "stage": stage,
        "mean_r1": mean(r1s),
        "mean_r2": mean(r2s),
        "mean_format": mean(fmts),
        "mean_rule": mean(rules),
        "mean_judge": mean(judges),
        "mean_think_len": mean(think_lens),
        "mean_code_len": mean(code_lens),
        "repeated_code_rate": (repeats / two_turn) if two_turn else 0.0,
    }


def _chunks(items: list, size: int):
    for i in range(0, len(items), size):
        yield items[i:i + size]


def rollout_batch(params: PolicyParams, tasks: Sequence[Task],
                  stage: StageConfig, config: TrainConfig,
                  weights: RewardWeights, step: int, judge=None,
                  pool=None) -> list[GroupRollout]:
    """Roll out one batch of task groups, optionally fanned out over a
    thread pool. Results are ordered by task position regardless of
    completion order, and every random draw comes from per-(task, member,
    step, turn) streams, so the thread count never changes the output."""
    sampling = SamplingConfig(config.temperature, config.max_turn_tokens)
    traj_params = TrajRewardParams(stage.gamma, stage.eta)

    if stage.strategy == "turnwise":
        return rollout.rollout_turnwise(params, tasks, config.group_size,
                                        weights, sampling, config.seed, step,
                                        stage.mix, judge)

    def one(task: Task) -> GroupRollout:
        if stage.strategy == "full":
            return rollout.rollout_full(params, task, config.group_size,
                                        weights, traj_params, sampling,
                                        config.seed, step, judge)
        if stage.strategy == "shared":
            return rollout.rollout_shared(params, task, config.group_size,
                                          weights, sampling, config.seed,
                                          step, judge)
        return rollout.rollout_single(params, task, config.group_size,
                                      weights, sampling, config.seed, step,
                                      judge)

    if pool is None:
        return [one(task) for task in tasks]
    return list(pool.map(one, tasks))


def train(config: TrainConfig, params: PolicyParams,
          train_tasks: Sequence[Task], eval_tasks: Sequence[Task] = (),
          out_dir: str | Path = "run", judge=None) -> PolicyParams:
    """Run the staged schedule and leave metrics.jsonl, per-stage
    checkpoints, final.ckpt, and a config echo in out_dir.

    Metrics lines are fully determined by (config, initial params, task
    corpus); reruns and different thread counts produce byte-identical
    logs.
    """
    from concurrent.futures import ThreadPoolExecutor

    from . import evaluation

    validate_config(config)
    out_path = Path(out_dir)
    out_path.mkdir(parents=True, exist_ok=True)
    write_config_echo(config_to_dict(config), out_path)

    weights = RewardWeights(config.alpha, config.beta)
    if judge is None and config.judge_url:
        judge = RemoteJudge(config.judge_url, config.judge_timeout_ms)

    state = AdamState.for_params(params)
    step = 0
    pool = None
    if config.threads > 1:
        pool = ThreadPoolExecutor(max_workers=config.threads)
    try:
        with open(out_path / "metrics.jsonl", "w", encoding="utf-8") as mfh, \
                open(out_path / "heldout.jsonl", "w", encoding="utf-8") as hfh:
            for stage_num, stage in enumerate(config.stages, start=1):
                for epoch in range(stage.epochs):
                    order = list(train_tasks)
                    rollout.derive_pyrandom(config.seed, "order", stage_num,
                                            epoch).shuffle(order)
                    for batch in _chunks(order, config.batch_size):
                        groups = rollout_batch(params, batch, stage, config,
                                               weights, step, judge, pool)
                        buf = policy.grad_buffer(params)
                        for group in groups:
                            part = grad_for(group, params)
                            if not np.all(np.isfinite(part)):
                                raise NumericAbort(
                                    f"non-finite gradient at step {step} in "
                                    f"group for task {group.task.task_id}")
                            buf += part
                        buf /= config.group_size * len(batch)
                        params = opt_step(params, buf, state, config.lr)
                        mfh.write(json.dumps(step_metrics(step, stage_num,
                                                          groups),
                                             sort_keys=True) + "\n")
                        step += 1
                        if (config.eval_every and eval_tasks
                                and step % config.eval_every == 0):
                            report = evaluation.evaluate(
                                params, eval_tasks,
                                evaluation.EvalConfig(
                                    turns=config.eval_turns,
                                    alpha=config.alpha, beta=config.beta,
                                    threads=config.threads,
                                    max_turn_tokens=config.max_turn_tokens),
                                judge=judge)
                            line = {"step": step}
                            line.update(evaluation.report_to_dict(report))
                            hfh.write(json.dumps(line, sort_keys=True) + "\n")
                policy.save_params(params, out_path / f"stage{stage_num}.ckpt")
    finally:
        if pool is not None:
            pool.shutdown()
    policy.save_params(params, out_path / "final.ckpt")
    return params
