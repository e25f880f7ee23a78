"""Reward kernel against a scalar oracle, registry structure/serialization,
term-by-term reward assembly, and termination conditions."""

import math

import numpy as np
import pytest

from planarhoi.rewards import (RewardInputs, RewardTerm, check_termination,
                               compute_rewards, default_registry, kernel,
                               registry_from_json, registry_to_json)
from planarhoi.sim import (ObjectState, RobotState, SimConfig,
                           hand_positions_world)


def scalar_kernel(x, x_ref, sigma):
    """Independent scalar-loop oracle for exp(-||x - x_ref||^2 / sigma)."""
    s = 0.0
    for a, b in zip(x, x_ref):
        s += (a - b) ** 2
    return math.exp(-s / sigma)


def test_kernel_matches_scalar_oracle():
    gen = np.random.default_rng(0)
    for _ in range(200):
        d = gen.integers(1, 6)
        x = gen.normal(size=d)
        r = gen.normal(size=d)
        sigma = float(gen.uniform(0.05, 30.0))
        got = kernel(x[None, :], r[None, :], sigma)[0]
        assert abs(got - scalar_kernel(x, r, sigma)) <= 1e-12


def test_kernel_bounds_and_identity():
    gen = np.random.default_rng(1)
    x = gen.normal(size=(100, 3))
    assert np.all(kernel(x, x, 0.5) == 1.0)
    vals = kernel(x, gen.normal(size=(100, 3)), 0.5)
    assert np.all((vals > 0) & (vals <= 1))
    with pytest.raises(ValueError):
        kernel(x, x, 0.0)


def test_registry_stage_structure():
    reg = {t.name: t for t in default_registry()}
    # object terms are stage-3 only; marker tracking starts at stage 2
    assert set(reg["object_position"].stages) == {3}
    assert set(reg["object_rotation"].stages) == {3}
    assert set(reg["marker_position"].stages) == {2, 3}
    assert set(reg["base_position"].stages) == {1, 2, 3}
    # stage-3 sharpening halves tracking bandwidths
    assert reg["base_position"].sigma(3) == reg["base_position"].sigma(2) / 2
    # penalties are negative
    for name in ("termination", "joint_torques", "action_rate",
                 "action_smoothness"):
        assert reg[name].kind == "penalty"
        for s in reg[name].stages:
            assert reg[name].weight(s) < 0
    assert reg["termination"].weight(1) == -10.0


def test_registry_rejects_bad_terms():
    with pytest.raises(ValueError):
        RewardTerm("x", "bonus", {1: 1.0})
    with pytest.raises(ValueError):
        RewardTerm("x", "kernel", {1: (1.0, 0.0)})


def test_registry_json_round_trip():
    reg = default_registry()
    again = registry_from_json(registry_to_json(reg))
    assert [t.name for t in again] == [t.name for t in reg]
    for a, b in zip(again, reg):
        assert a.kind == b.kind
        assert a.stages == b.stages


def _inputs(n=3, seed=0, with_obj=False):
    gen = np.random.default_rng(seed)
    cfg = SimConfig()
    robot = RobotState.default(n)
    robot.base_pos = robot.base_pos + gen.normal(0, 0.05, (n, 2))
    robot.joint_pos = gen.normal(0, 0.3, (n, 4))
    robot.joint_vel = gen.normal(0, 0.5, (n, 4))
    hands = hand_positions_world(robot, cfg).reshape(n, 4)
    kp = np.concatenate([robot.base_pos + gen.normal(0, 0.02, (n, 2)),
                         hands + gen.normal(0, 0.02, (n, 4))], axis=1)
    obj = None
    ref_obj_pos = None
    ref_obj_pitch = None
    if with_obj:
        obj = ObjectState.default(n)
        ref_obj_pos = obj.pos + gen.normal(0, 0.02, (n, 2))
        ref_obj_pitch = obj.pitch + gen.normal(0, 0.05, n)
    return cfg, RewardInputs(
        robot=robot,
        ref_base_pos=robot.base_pos + gen.normal(0, 0.03, (n, 2)),
        ref_base_pitch=gen.normal(0, 0.1, n),
        ref_joint_pos=gen.normal(0, 0.3, (n, 4)),
        ref_joint_vel=gen.normal(0, 0.5, (n, 4)),
        ref_keypoints=kp,
        torques=gen.normal(0, 10.0, (n, 4)),
        torque_limit=cfg.torque_limit,
        action=gen.normal(0, 0.5, (n, 7)),
        prev_action=gen.normal(0, 0.5, (n, 7)),
        prev_prev_action=gen.normal(0, 0.5, (n, 7)),
        terminated=np.array([False, True, False][:n]),
        obj=obj, ref_obj_pos=ref_obj_pos, ref_obj_pitch=ref_obj_pitch)


def test_compute_rewards_total_is_weighted_sum():
    cfg, inp = _inputs(with_obj=True)
    for stage in (1, 2, 3):
        br = compute_rewards(stage, inp, cfg)
        total = np.zeros(3)
        for name, w in br.weighted.items():
            total += w
        np.testing.assert_allclose(br.total, total, atol=1e-14)


def test_compute_rewards_stage_term_selection():
    cfg, inp = _inputs(with_obj=True)
    assert "marker_position" not in compute_rewards(1, inp, cfg).values
    assert "object_position" not in compute_rewards(2, inp, cfg).values
    br3 = compute_rewards(3, inp, cfg)
    assert {"marker_position", "object_position", "object_rotation"} <= \
        set(br3.values)


def test_compute_rewards_oracle_terms():
    cfg, inp = _inputs(with_obj=True)
    br = compute_rewards(3, inp, cfg)
    reg = {t.name: t for t in default_registry()}
    i = 0
    expected_base = kernel(inp.robot.base_pos[i:i + 1],
                           inp.ref_base_pos[i:i + 1],
                           reg["base_position"].sigma(3))[0]
    assert abs(br.values["base_position"][i] - expected_base) < 1e-14
    term = br.values["termination"]
    np.testing.assert_array_equal(term, inp.terminated.astype(float))
    exp_torque = np.mean((inp.torques[i] / cfg.torque_limit) ** 2)
    assert abs(br.values["joint_torques"][i] - exp_torque) < 1e-14
    exp_rate = np.mean((inp.action[i] - inp.prev_action[i]) ** 2)
    assert abs(br.values["action_rate"][i] - exp_rate) < 1e-14


def test_compute_rewards_requires_object_for_stage3():
    cfg, inp = _inputs(with_obj=False)
    with pytest.raises(ValueError):
        compute_rewards(3, inp, cfg)
    with pytest.raises(ValueError):
        compute_rewards(4, inp, cfg)


def test_check_termination_conditions():
    robot = RobotState.default(4)
    ref = robot.base_pos.copy()
    robot.base_pos[1, 1] = 0.2          # fallen below height floor
    robot.base_pitch[2] = 1.5           # over-pitched
    ref[3] = robot.base_pos[3] + [0.6, 0.0]   # tracking diverged
    done = check_termination(robot, ref)
    np.testing.assert_array_equal(done, [False, True, True, True])
    diverged = np.array([True, False, False, False])
    np.testing.assert_array_equal(check_termination(robot, ref, diverged),
                                  [True, True, True, True])
