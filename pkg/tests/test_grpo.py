"""Group-relative policy optimization: advantages, gradients, training."""

import json

import numpy as np
import pytest

from chartrl import data, grpo, policy, rollout
from chartrl.chartlang import (
    CODE_CLOSE, CODE_OPEN, EOT, THINK_CLOSE, THINK_OPEN,
)
from chartrl.grpo import AdamState, ConfigError, StageConfig, TrainConfig
from chartrl.rewards import RewardBreakdown, RewardWeights, TrajRewardParams
from chartrl.rollout import GroupRollout, SamplingConfig, Trajectory, Turn

WEIGHTS = RewardWeights(0.8, 0.1)
SAMPLING = SamplingConfig(temperature=1.0, max_turn_tokens=24)


# ---------------------------------------------------------------------------
# advantages
# ---------------------------------------------------------------------------


def test_advantages_standardize_within_the_group():
    assert np.allclose(grpo.advantages([0.0, 1.0]), [-1.0, 1.0], atol=1e-15)
    adv = grpo.advantages([1.0, 2.0, 3.0, 4.0])
    assert adv.mean() == pytest.approx(0.0, abs=1e-15)
    assert np.sqrt((adv ** 2).mean()) == pytest.approx(1.0, abs=1e-12)


def test_advantages_are_shift_and_scale_invariant():
    rng = np.random.default_rng(0)
    for _ in range(50):
        r = rng.random(8)
        base = grpo.advantages(r)
        assert np.allclose(grpo.advantages(r + 17.3), base, atol=1e-9)
        assert np.allclose(grpo.advantages(r * 1000.0), base, atol=1e-9)


def test_degenerate_groups_get_zero_advantages():
    assert np.array_equal(grpo.advantages([0.7] * 8), np.zeros(8))
    # Spread below the epsilon floor collapses to zero too.
    assert np.array_equal(grpo.advantages([0.5, 0.5 + 1e-9]), np.zeros(2))


# ---------------------------------------------------------------------------
# strategy gradients
# ---------------------------------------------------------------------------


def _turn_loss(params, traj, turn_index):
    ctx = grpo._turn_context(traj, turn_index)
    resp = traj.turns[turn_index].response
    return policy.logprob(params, ctx, resp)[1] / len(resp)


def test_full_gradient_matches_finite_differences():
    params = policy.init_params(1)
    task = data.gen_reference(0, "easy")
    group = rollout.rollout_full(params, task, 3, WEIGHTS,
                                 TrajRewardParams(0.5, 0.1), SAMPLING,
                                 master_seed=2, step=0)
    buf = grpo.grad_full(group, params)
    adv = grpo.advantages([t.scalar_reward for t in group.trajectories])

    def objective(p):
        return sum(float(a) * (_turn_loss(p, traj, 0) + _turn_loss(p, traj, 1))
                   for traj, a in zip(group.trajectories, adv))

    h = 1e-5
    rng = np.random.default_rng(3)
    for i in rng.choice(params.flat.size, size=30, replace=False):
        up, down = params.flat.copy(), params.flat.copy()
        up[i] += h
        down[i] -= h
        fd = (objective(grpo.dataclasses.replace(params, flat=up))
              - objective(grpo.dataclasses.replace(params, flat=down))) / (2 * h)
        if abs(fd) > 1e-8:
            assert abs(buf[i] - fd) / abs(fd) < 1e-4, i
        else:
            assert abs(buf[i] - fd) < 1e-6, i


def test_shared_gradient_touches_only_second_turns():
    params = policy.init_params(1)
    task = data.gen_reference(1, "easy")
    group = rollout.rollout_shared(params, task, 3, WEIGHTS, SAMPLING,
                                   master_seed=2, step=0)
    buf = grpo.grad_shared(group, params)

    adv = grpo.advantages([t.scalar_reward for t in group.trajectories])
    oracle = policy.grad_buffer(params)
    for traj, a in zip(group.trajectories, adv):
        ctx = grpo._turn_context(traj, 1)
        policy.grad_logprob(params, ctx, traj.turns[1].response,
                            float(a) / len(traj.turns[1].response), oracle)
    assert np.array_equal(buf, oracle)


def test_single_gradient_covers_the_only_turn():
    params = policy.init_params(1)
    task = data.gen_reference(2, "easy")
    group = rollout.rollout_single(params, task, 3, WEIGHTS, SAMPLING,
                                   master_seed=2, step=0)
    buf = grpo.grad_single(group, params)

    adv = grpo.advantages([t.scalar_reward for t in group.trajectories])
    oracle = policy.grad_buffer(params)
    for traj, a in zip(group.trajectories, adv):
        ctx = grpo._turn_context(traj, 0)
        policy.grad_logprob(params, ctx, traj.turns[0].response,
                            float(a) / len(traj.turns[0].response), oracle)
    assert np.array_equal(buf, oracle)
    assert grpo.grad_for(group, params) is not None


def test_degenerate_group_gradient_is_zero():
    params = policy.init_params(1)
    task = data.gen_reference(3, "easy")
    group = rollout.rollout_single(params, task, 3, WEIGHTS, SAMPLING,
                                   master_seed=2, step=0)
    for traj in group.trajectories:
        traj.scalar_reward = 0.25
    assert not np.any(grpo.grad_single(group, params))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def test_opt_step_climbs_a_quadratic():
    params = policy.zero_params()
    target = np.full_like(params.flat, 0.01)
    state = AdamState.for_params(params)
    for _ in range(400):
        buf = 2.0 * (target - params.flat)  # ascent direction of -|x-t|^2
        params = grpo.opt_step(params, buf, state, lr=1e-3)
    assert np.max(np.abs(params.flat - target)) < 1e-4
    assert state.t == 400


def test_opt_step_with_zero_gradient_is_a_no_op_on_params():
    params = policy.init_params(4)
    state = AdamState.for_params(params)
    stepped = grpo.opt_step(params, np.zeros_like(params.flat), state, lr=0.1)
    assert np.array_equal(stepped.flat, params.flat)


def test_opt_step_rejects_non_finite_gradients():
    params = policy.zero_params()
    state = AdamState.for_params(params)
    bad = np.zeros_like(params.flat)
    bad[0] = np.nan
    with pytest.raises(grpo.NumericAbort):
        grpo.opt_step(params, bad, state, lr=0.1)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _breakdown(composite, fmt=1.0, rule=0.5):
    return RewardBreakdown(fmt, 0.0, 0.0, 0.0, 0.0, rule, 0.0, composite)


def _turn(composite, code, think_len=2):
    response = ([THINK_OPEN] + ["LAYOUT"] * think_len + [THINK_CLOSE,
                CODE_OPEN] + code + [CODE_CLOSE, EOT])
    return Turn(response, code, None, _breakdown(composite))


_CODE_A = ["LAYOUT", "1", "1", "SUBPLOT", "0", "TYPE", "bar", "COLOR", "red",
           "DATA", "1.0", "END"]
_CODE_B = ["LAYOUT", "1", "1", "SUBPLOT", "0", "TYPE", "line", "COLOR", "red",
           "DATA", "1.0", "END"]


def test_repeated_code_uses_canonical_equality():
    task = data.gen_reference(0, "easy")
    repeat = Trajectory(task, [_turn(0.1, _CODE_A), _turn(0.2, list(_CODE_A))], [])
    assert grpo.repeated_code(repeat)
    assert grpo.repeated_code(repeat, exact=True)

    changed = Trajectory(task, [_turn(0.1, _CODE_A), _turn(0.2, _CODE_B)], [])
    assert not grpo.repeated_code(changed)

    one_turn = Trajectory(task, [_turn(0.1, _CODE_A)], [])
    assert not grpo.repeated_code(one_turn)

    broken = Trajectory(task, [Turn([EOT], None, None, _breakdown(0.0)),
                               _turn(0.2, _CODE_A)], [])
    assert not grpo.repeated_code(broken)


def test_repeated_code_exact_mode_sees_token_order():
    # Same program with subplots listed in a different order: a repeat in
    # canonical form, not in exact token form.
    task = data.gen_reference(0, "easy")
    code1 = ["LAYOUT", "1", "2",
             "SUBPLOT", "1", "TYPE", "bar", "COLOR", "red", "DATA", "1.0", "END",
             "SUBPLOT", "0", "TYPE", "bar", "COLOR", "red", "DATA", "1.0", "END"]
    code2 = ["LAYOUT", "1", "2",
             "SUBPLOT", "0", "TYPE", "bar", "COLOR", "red", "DATA", "1.0", "END",
             "SUBPLOT", "1", "TYPE", "bar", "COLOR", "red", "DATA", "1.0", "END"]
    traj = Trajectory(task, [_turn(0.1, code1), _turn(0.2, code2)], [])
    assert grpo.repeated_code(traj)
    assert not grpo.repeated_code(traj, exact=True)


def test_step_metrics_against_hand_counts():
    task = data.gen_reference(0, "easy")
    t1a = _turn(0.2, _CODE_A, think_len=1)
    t2a = _turn(0.6, list(_CODE_A), think_len=3)   # repeat
    t1b = _turn(0.4, _CODE_A, think_len=2)
    t2b = _turn(0.8, _CODE_B, think_len=2)
    group1 = GroupRollout(task, "full", [Trajectory(task, [t1a, t2a], []),
                                         Trajectory(task, [t1b, t2b], [])])
    single = Trajectory(task, [_turn(0.5, _CODE_B, think_len=4)], [])
    group2 = GroupRollout(task, "single", [single])

    m = grpo.step_metrics(3, 2, [group1, group2])
    assert m["step"] == 3 and m["stage"] == 2
    assert m["mean_r1"] == pytest.approx((0.2 + 0.4 + 0.5) / 3, abs=1e-12)
    assert m["mean_r2"] == pytest.approx((0.6 + 0.8 + 0.5) / 3, abs=1e-12)
    assert m["mean_format"] == 1.0
    assert m["mean_rule"] == pytest.approx(0.5, abs=1e-12)
    assert m["mean_think_len"] == pytest.approx((1 + 3 + 2 + 2 + 4) / 5, abs=1e-12)
    assert m["mean_code_len"] == pytest.approx(12.0, abs=1e-12)
    assert m["repeated_code_rate"] == 0.5


def test_step_metrics_on_nothing():
    assert grpo.step_metrics(0, 1, [])["mean_r1"] == 0.0
    assert grpo.step_metrics(0, 1, [])["repeated_code_rate"] == 0.0


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

BAD_CONFIGS = [
    (dict(stages=[]), "stages"),
    (dict(stages=[StageConfig("warp")]), "stages[0].strategy"),
    (dict(stages=[StageConfig("full", epochs=0)]), "stages[0].epochs"),
    (dict(stages=[StageConfig("full", gamma=-1.0)]), "stages[0].gamma"),
    (dict(stages=[StageConfig("full", eta=float("nan"))]), "stages[0].eta"),
    (dict(stages=[StageConfig("turnwise", mix=1.4)]), "stages[0].mix"),
    (dict(group_size=1), "group_size"),
    (dict(batch_size=0), "batch_size"),
    (dict(lr=0.0), "lr"),
    (dict(alpha=0.9, beta=0.2), "alpha/beta"),
    (dict(temperature=-0.5), "temperature"),
    (dict(max_turn_tokens=0), "max_turn_tokens"),
    (dict(max_turn_tokens=4096), "max_turn_tokens"),
    (dict(threads=0), "threads"),
    (dict(eval_every=-1), "eval_every"),
    (dict(eval_turns=9), "eval_turns"),
    (dict(judge_timeout_ms=0), "judge_timeout_ms"),
    (dict(kl_coeff=0.5), "kl_coeff"),
]


def test_validate_config_names_the_offending_key():
    for kwargs, key in BAD_CONFIGS:
        with pytest.raises(ConfigError) as err:
            grpo.validate_config(TrainConfig(**kwargs))
        assert err.value.key == key, kwargs
    assert grpo.validate_config(TrainConfig()) is not None


def test_config_from_dict_rejects_unknown_keys():
    with pytest.raises(ConfigError) as err:
        grpo.config_from_dict({"learning_rate": 1e-3})
    assert err.value.key == "learning_rate"

    with pytest.raises(ConfigError) as err:
        grpo.config_from_dict({"stages": [{"strategy": "full", "bogus": 1}]})
    assert err.value.key == "stages[0].bogus"

    with pytest.raises(ConfigError) as err:
        grpo.config_from_dict({"stages": [{"epochs": 2}]})
    assert err.value.key == "stages[0].strategy"

    with pytest.raises(ConfigError):
        grpo.config_from_dict({"stages": "full"})


def test_config_overrides_and_round_trip(tmp_path):
    cfg = grpo.config_from_dict({"lr": 5e-4}, overrides={"seed": 9,
                                                         "threads": None})
    assert cfg.lr == 5e-4
    assert cfg.seed == 9
    assert cfg.threads == 1  # None overrides are ignored

    path = tmp_path / "config.json"
    path.write_text(json.dumps(grpo.config_to_dict(cfg)))
    assert grpo.load_config(path) == cfg

    (tmp_path / "broken.json").write_text("{not json")
    with pytest.raises(ConfigError):
        grpo.load_config(tmp_path / "broken.json")


def test_default_stages_are_shared_then_full():
    stages = grpo.default_stages()
    assert [s.strategy for s in stages] == ["shared", "full"]
    assert stages[1].gamma == 0.0 and stages[1].eta == 0.0


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def test_micro_training_runs_are_byte_identical(tmp_path):
    tasks = data.gen_split(300, 4, "easy")
    config = TrainConfig(
        stages=[StageConfig("shared", epochs=1), StageConfig("full", epochs=1)],
        group_size=2, batch_size=2, lr=1e-3, alpha=0.8, beta=0.1,
        max_turn_tokens=24, seed=5)
    outputs = []
    for name in ("a", "b"):
        out = tmp_path / name
        grpo.train(config, policy.init_params(0), tasks, out_dir=out)
        assert (out / "config_echo.json").exists()
        assert (out / "stage1.ckpt").exists()
        assert (out / "stage2.ckpt").exists()
        outputs.append((
            (out / "metrics.jsonl").read_bytes(),
            (out / "final.ckpt").read_bytes(),
        ))
    assert outputs[0] == outputs[1]

    metrics = [json.loads(line) for line in
               outputs[0][0].decode().splitlines()]
    assert [m["step"] for m in metrics] == [0, 1, 2, 3]
    assert [m["stage"] for m in metrics] == [1, 1, 2, 2]
