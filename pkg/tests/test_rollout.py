"""Rollout machinery: contexts, scoring, group strategies, inference."""

import dataclasses
import json

import pytest

from chartrl import chartlang, data, policy, rollout
from chartrl.chartlang import (
    CODE_CLOSE, CODE_OPEN, EOT, FB_ERR, FB_OK, GEN, TASK_OPEN,
    THINK_CLOSE, THINK_OPEN, ElementSet, ExecError, serialize_elements,
)
from chartrl.coldstart import bc_response
from chartrl.rewards import RewardWeights, TrajRewardParams, trajectory_reward
from chartrl.rollout import SamplingConfig

WEIGHTS = RewardWeights(0.8, 0.1)
SAMPLING = SamplingConfig(temperature=1.0)


def _task(seed=0, difficulty="medium"):
    return data.gen_reference(seed, difficulty)


# ---------------------------------------------------------------------------
# seeded streams
# ---------------------------------------------------------------------------


def test_derived_streams_are_keyed_by_all_parts():
    a = rollout.derive_rng(3, "easy-1", 0, 10, 1).random(4).tolist()
    b = rollout.derive_rng(3, "easy-1", 0, 10, 1).random(4).tolist()
    assert a == b
    for parts in [(4, "easy-1", 0, 10, 1), (3, "easy-2", 0, 10, 1),
                  (3, "easy-1", 1, 10, 1), (3, "easy-1", 0, 11, 1),
                  (3, "easy-1", 0, 10, 2)]:
        assert rollout.derive_rng(*parts).random(4).tolist() != a

    x = rollout.derive_pyrandom("bc", 0, 5).random()
    assert x == rollout.derive_pyrandom("bc", 0, 5).random()
    assert x != rollout.derive_pyrandom("bc", 0, 6).random()


# ---------------------------------------------------------------------------
# context assembly
# ---------------------------------------------------------------------------


def test_context_is_task_block_plus_history():
    task = _task(3)
    bare = rollout.build_context(task, [])
    assert bare[0] == TASK_OPEN
    assert bare[-1] == GEN
    assert bare[1:-1] == serialize_elements(task.elements)

    resp = [THINK_OPEN, THINK_CLOSE, CODE_OPEN, "LAYOUT", "1", CODE_CLOSE, EOT]
    fb = (FB_ERR, "E_PARSE")
    ctx = rollout.build_context(task, [(resp, fb)])
    base = len(bare) - 1
    # The end-of-turn token is stripped from replayed responses.
    assert ctx[base:base + len(resp) - 1] == resp[:-1]
    assert ctx[base + len(resp) - 1:base + len(resp) + 1] == list(fb)
    assert ctx[-1] == GEN


def test_context_drops_whole_pairs_oldest_first():
    task = _task(3)
    task_len = len(rollout.build_context(task, [])) - 1
    filler = [THINK_OPEN] * 120
    pair_len = len(filler) + 2
    history = [(filler, (FB_ERR, f"E_{k}")) for k in range(5)]
    ctx = rollout.build_context(task, history)

    assert len(ctx) <= policy.MAX_CONTEXT
    assert ctx[:task_len] == rollout.build_context(task, [])[:-1]
    fits = (policy.MAX_CONTEXT - task_len - 1) // pair_len
    assert 0 < fits < 5
    kept = [tok for tok in ctx if tok.startswith("E_")]
    assert kept == [f"E_{k}" for k in range(5 - fits, 5)]


# ---------------------------------------------------------------------------
# response scoring
# ---------------------------------------------------------------------------


def test_score_response_on_a_faithful_answer():
    task = _task(7)
    turn = rollout.score_response(bc_response(task.program), task, WEIGHTS)
    assert turn.rewards.format == 1.0
    assert isinstance(turn.result, ElementSet)
    assert turn.result == task.elements
    assert turn.rewards.rule == 1.0
    assert turn.rewards.composite == pytest.approx(
        0.1 * 1.0 + 0.8 * 1.0 + 0.1 * turn.rewards.judge, abs=1e-12)


def test_score_response_without_code_is_a_parse_failure():
    task = _task(7)
    turn = rollout.score_response([THINK_OPEN, THINK_CLOSE, EOT], task, WEIGHTS)
    assert turn.code is None
    assert isinstance(turn.result, ExecError)
    assert turn.result.code == "E_PARSE"
    assert turn.rewards.rule == 0.0
    assert turn.rewards.composite == 0.0


def test_score_response_catches_runtime_errors():
    task = _task(7)
    bad = [THINK_OPEN, THINK_CLOSE, CODE_OPEN, "LAYOUT", "1", "1",
           "SUBPLOT", "5", "TYPE", "bar", "COLOR", "red",
           "DATA", "1.0", "END", CODE_CLOSE, EOT]
    turn = rollout.score_response(bad, task, WEIGHTS)
    assert isinstance(turn.result, ExecError)
    assert turn.result.code == "E_INDEX"
    assert turn.rewards.format == 1.0
    assert turn.rewards.composite == pytest.approx(0.1, abs=1e-12)


def test_score_response_skips_unweighted_components():
    task = _task(7)
    resp = bc_response(task.program)
    fmt_only = rollout.score_response(resp, task, RewardWeights(0.0, 0.0))
    assert fmt_only.rewards.rule == 0.0
    assert fmt_only.rewards.judge == 0.0
    assert fmt_only.rewards.composite == 1.0

    forced = rollout.score_response(resp, task, RewardWeights(0.0, 0.0),
                                    want_rule=True, want_judge=True)
    assert forced.rewards.rule == 1.0
    assert forced.rewards.judge == 1.0
    assert forced.rewards.composite == 1.0  # weights still gate the mix


def test_feedback_tokens_echo_the_interpreter():
    task = _task(9)
    good = rollout.score_response(bc_response(task.program), task, WEIGHTS)
    fb = rollout.build_feedback(good)
    assert fb.kind == "rendered"
    assert fb.tokens == (FB_OK, *serialize_elements(task.elements))

    bad = rollout.score_response([THINK_OPEN, THINK_CLOSE, EOT], task, WEIGHTS)
    fb = rollout.build_feedback(bad)
    assert fb.kind == "error"
    assert fb.tokens == (FB_ERR, "E_PARSE")


# ---------------------------------------------------------------------------
# group strategies
# ---------------------------------------------------------------------------


def test_full_rollouts_replay_bit_identically():
    params = policy.init_params(0)
    task = _task(11)
    tp = TrajRewardParams(gamma=0.5, eta=0.1)
    kwargs = dict(group_size=3, weights=WEIGHTS, traj_params=tp,
                  sampling=SAMPLING, master_seed=42, step=7)
    a = rollout.rollout_full(params, task, **kwargs)
    b = rollout.rollout_full(params, task, **kwargs)

    assert a.strategy == "full"
    assert len(a.trajectories) == 3
    for ta, tb in zip(a.trajectories, b.trajectories):
        assert [t.response for t in ta.turns] == [t.response for t in tb.turns]
        assert ta.scalar_reward == tb.scalar_reward
        assert len(ta.turns) == 2
        assert len(ta.feedbacks) == 1
        expected = trajectory_reward(ta.turns[0].rewards.composite,
                                     ta.turns[1].rewards.composite, tp)
        assert ta.scalar_reward == pytest.approx(expected, abs=1e-15)
        assert ta.feedbacks[0] == rollout.build_feedback(ta.turns[0])


def test_full_rollout_members_are_independent():
    params = policy.init_params(0)
    group = rollout.rollout_full(params, _task(11), 4, WEIGHTS,
                                 TrajRewardParams(), SAMPLING, 42, 0)
    firsts = [tuple(t.turns[0].response) for t in group.trajectories]
    assert len(set(firsts)) > 1


def test_shared_rollouts_pin_one_first_turn():
    params = policy.init_params(0)
    task = _task(13)
    group = rollout.rollout_shared(params, task, 4, WEIGHTS, SAMPLING,
                                   master_seed=1, step=0)
    assert group.strategy == "shared"
    assert group.shared_first is not None
    for traj in group.trajectories:
        assert traj.turns[0] is group.shared_first
        assert traj.scalar_reward == traj.turns[1].rewards.composite
        assert traj.feedbacks[0] == rollout.build_feedback(group.shared_first)
    seconds = [tuple(t.turns[1].response) for t in group.trajectories]
    assert len(set(seconds)) > 1


def test_shared_rollout_accepts_a_forced_first_turn():
    params = policy.init_params(0)
    task = _task(13)
    junk = [THINK_OPEN, THINK_CLOSE, CODE_OPEN, "LAYOUT", CODE_CLOSE, EOT]
    group = rollout.rollout_shared(params, task, 2, WEIGHTS, SAMPLING,
                                   master_seed=1, step=0,
                                   forced_first_response=junk)
    assert group.shared_first.response == junk
    assert isinstance(group.shared_first.result, ExecError)
    assert group.trajectories[0].feedbacks[0].kind == "error"


def test_single_rollouts_have_one_turn_and_no_feedback():
    params = policy.init_params(0)
    group = rollout.rollout_single(params, _task(17), 3, WEIGHTS, SAMPLING,
                                   master_seed=5, step=2)
    assert group.strategy == "single"
    for traj in group.trajectories:
        assert len(traj.turns) == 1
        assert traj.feedbacks == []
        assert traj.scalar_reward == traj.turns[0].rewards.composite


def test_turnwise_mix_extremes_and_blend():
    params = policy.init_params(0)
    tasks = [_task(s) for s in range(12)]

    all_single = rollout.rollout_turnwise(params, tasks, 2, WEIGHTS, SAMPLING,
                                          master_seed=3, step=0, mix=1.0)
    assert {g.strategy for g in all_single} == {"single"}

    all_shared = rollout.rollout_turnwise(params, tasks, 2, WEIGHTS, SAMPLING,
                                          master_seed=3, step=0, mix=0.0)
    assert {g.strategy for g in all_shared} == {"shared"}

    blend = rollout.rollout_turnwise(params, tasks, 2, WEIGHTS, SAMPLING,
                                     master_seed=3, step=0, mix=0.5)
    assert {g.strategy for g in blend} == {"single", "shared"}

    with pytest.raises(ValueError):
        rollout.rollout_turnwise(params, tasks, 2, WEIGHTS, SAMPLING,
                                 master_seed=3, step=0, mix=1.5)


# ---------------------------------------------------------------------------
# multi-turn inference
# ---------------------------------------------------------------------------


def test_infer_multi_chains_feedback():
    params = policy.init_params(0)
    task = _task(19)
    traj = rollout.infer_multi(params, task, 3, WEIGHTS, SAMPLING,
                               master_seed=8)
    assert len(traj.turns) == 3
    assert len(traj.feedbacks) == 2
    for turn, fb in zip(traj.turns, traj.feedbacks):
        assert fb == rollout.feedback_for(turn.result)

    again = rollout.infer_multi(params, task, 3, WEIGHTS, SAMPLING,
                                master_seed=8)
    assert [t.response for t in again.turns] == [t.response for t in traj.turns]

    for turns in (0, rollout.MAX_TURNS + 1):
        with pytest.raises(ValueError):
            rollout.infer_multi(params, task, turns, WEIGHTS, SAMPLING)


def test_trajectory_json_is_plain_data():
    params = policy.init_params(0)
    task = _task(19)
    traj = rollout.infer_multi(params, task, 2, WEIGHTS, SAMPLING,
                               master_seed=8)
    payload = rollout.trajectory_to_json(traj, "infer", master_seed=8, step=3)
    text = json.dumps(payload, sort_keys=True)
    back = json.loads(text)
    assert back["task_id"] == task.task_id
    assert back["strategy"] == "infer"
    assert len(back["turns"]) == 2
    assert len(back["feedbacks"]) == 1
    assert back["seed"] == {"master": 8, "step": 3}
    for turn_json, turn in zip(back["turns"], traj.turns):
        assert turn_json["response"] == turn.response
        assert turn_json["rewards"] == dataclasses.asdict(turn.rewards)
