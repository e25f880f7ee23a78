"""Reference clips: procedural generation, IK, windows, keypoints, noise."""

import numpy as np
import pytest

from planarhoi.motion import (FRAME_DIM, REFERENCE_FPS, TASK_TAGS,
                              WINDOW_HORIZON, WINDOW_STRIDE, Keypoints,
                              MotionClip, arm_ik, extract_keypoints,
                              generate_clip, inject_keypoint_noise,
                              keypoint_window, load_keypoints, save_keypoints,
                              window, window_indices)
from planarhoi.sim import SimConfig, hand_positions_base


@pytest.mark.parametrize("task", TASK_TAGS)
def test_generate_clip_shapes(task):
    clip = generate_clip(task, 3.0, seed=5)
    n = int(round(3.0 * REFERENCE_FPS)) + 1
    assert len(clip) == n
    assert clip.frames().shape == (n, FRAME_DIM)
    assert np.all(np.isfinite(clip.frames()))
    if task in ("carry", "push"):
        assert clip.object_track is not None
        assert len(clip.object_track) == n
    else:
        assert clip.object_track is None


def test_generate_clip_deterministic():
    a = generate_clip("walk", 3.0, seed=5)
    b = generate_clip("walk", 3.0, seed=5)
    np.testing.assert_array_equal(a.frames(), b.frames())
    c = generate_clip("walk", 3.0, seed=6)
    assert not np.array_equal(a.frames(), c.frames())


def test_generate_clip_rejects_bad_inputs():
    with pytest.raises(ValueError):
        generate_clip("fly", 3.0)
    with pytest.raises(ValueError):
        generate_clip("walk", 0.5)


def test_walk_speed_integrates_exactly():
    clip = generate_clip("walk", 3.0, params={"speed": 0.4}, seed=0)
    t = np.arange(len(clip)) / clip.fps
    np.testing.assert_allclose(clip.base_pos[:, 0], 0.4 * t, atol=1e-12)


def test_arm_ik_round_trip_through_fk():
    cfg = SimConfig()
    gen = np.random.default_rng(4)
    for side, hand in (("left", 0), ("right", 1)):
        off = -cfg.shoulder_offset if side == "left" else cfg.shoulder_offset
        for _ in range(50):
            # reachable target strictly inside the workspace annulus
            # keep the shoulder solution clear of the +-pi joint clamp
            ang = gen.uniform(-1.8, 1.8)
            rad = gen.uniform(0.3, 0.95) * sum(cfg.link_lengths)
            target = np.array([off + rad * np.sin(ang), -rad * np.cos(ang)])
            qs, qe = arm_ik(target, side, cfg)
            q = np.zeros((1, 4))
            q[0, 2 * hand:2 * hand + 2] = [qs, qe]
            fk = hand_positions_base(q, cfg)[0, hand]
            np.testing.assert_allclose(fk, target, atol=1e-6)


def test_arm_ik_unreachable_projected():
    cfg = SimConfig()
    qs, qe = arm_ik([5.0, -5.0], "left", cfg)
    q = np.zeros((1, 4))
    q[0, :2] = [qs, qe]
    fk = hand_positions_base(q, cfg)[0, 0]
    # projected near the workspace boundary
    reach = np.linalg.norm(fk - [-cfg.shoulder_offset, 0.0])
    assert abs(reach - sum(cfg.link_lengths)) < 0.01


def test_window_indices_hold_at_end():
    idx = window_indices(20, 12)
    expected = np.minimum(12 + WINDOW_STRIDE * np.arange(WINDOW_HORIZON), 19)
    np.testing.assert_array_equal(idx, expected)
    assert idx[-1] == 19
    with pytest.raises(ValueError):
        window_indices(20, -1)


def test_window_contents_match_frames(walk_clip):
    w = window(walk_clip, 7)
    frames = walk_clip.frames()
    for k in range(WINDOW_HORIZON):
        src = min(7 + k * WINDOW_STRIDE, len(walk_clip) - 1)
        np.testing.assert_array_equal(w[k], frames[src])


def test_keypoints_stacked_round_trip(walk_clip):
    kps = extract_keypoints(walk_clip)
    again = Keypoints.from_stacked(kps.stacked())
    np.testing.assert_array_equal(again.base, kps.base)
    np.testing.assert_array_equal(again.left_hand, kps.left_hand)
    np.testing.assert_array_equal(again.right_hand, kps.right_hand)
    kw = keypoint_window(kps, 3)
    assert kw.shape == (WINDOW_HORIZON, 6)


def test_keypoints_consistent_with_fk(walk_clip):
    cfg = SimConfig()
    kps = extract_keypoints(walk_clip, cfg)
    np.testing.assert_array_equal(kps.base, walk_clip.base_pos)
    # hands stay within arm reach of the shoulders
    reach = sum(cfg.link_lengths) + cfg.shoulder_offset + 1e-9
    d = np.linalg.norm(kps.left_hand - walk_clip.base_pos, axis=1)
    assert np.all(d <= reach)


def test_inject_keypoint_noise_stats_and_determinism():
    base = Keypoints(np.zeros((4000, 2)), np.zeros((4000, 2)),
                     np.zeros((4000, 2)))
    noisy = inject_keypoint_noise(base, 0.05, seed=3)
    again = inject_keypoint_noise(base, 0.05, seed=3)
    np.testing.assert_array_equal(noisy.stacked(), again.stacked())
    assert abs(noisy.stacked().std() - 0.05) < 0.002
    clean = inject_keypoint_noise(base, 0.0, seed=3)
    np.testing.assert_array_equal(clean.stacked(), base.stacked())
    with pytest.raises(ValueError):
        inject_keypoint_noise(base, -0.1)


def test_clip_json_round_trip(tmp_path, carry_clip):
    path = tmp_path / "clip.json"
    carry_clip.save(path)
    again = MotionClip.load(path)
    np.testing.assert_array_equal(again.frames(), carry_clip.frames())
    np.testing.assert_array_equal(again.object_track.pos,
                                  carry_clip.object_track.pos)
    assert again.task_tag == carry_clip.task_tag


def test_keypoints_json_round_trip(tmp_path, walk_clip):
    kps = extract_keypoints(walk_clip)
    path = tmp_path / "kp.json"
    save_keypoints(kps, walk_clip.fps, path)
    again, fps = load_keypoints(path)
    assert fps == walk_clip.fps
    np.testing.assert_array_equal(again.stacked(), kps.stacked())


def test_translated_shifts_everything(carry_clip):
    moved = carry_clip.translated([1.0, 0.5])
    np.testing.assert_allclose(moved.base_pos, carry_clip.base_pos + [1.0, 0.5])
    np.testing.assert_allclose(moved.object_track.pos,
                               carry_clip.object_track.pos + [1.0, 0.5])
    np.testing.assert_array_equal(moved.joint_pos, carry_clip.joint_pos)
