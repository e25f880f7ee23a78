"""Vectorized reference-tracking world shared by all three training stages.

Owns the batched simulator state, per-env reference clips, domain
randomization, termination/reset bookkeeping and reward evaluation. Trainers
drive it at 50 Hz (dense tracking) or 10 Hz (keypoint/object tracking) and read
back observations built here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rewards as rw
from .domain_rand import RandSpec, sample_robot, sample_object, schedule_pushes, \
    joint_injection_noise
from .motion import MotionClip, Keypoints, extract_keypoints, inject_keypoint_noise, \
    window_indices, WINDOW_HORIZON, WINDOW_STRIDE, FRAME_DIM
from .sim import Action, ObjectState, RobotState, SimConfig, observe, rot, \
    step_physics, ACTION_DIM, NUM_JOINTS

# env-unit action = offset + scale * tanh(u)
ACTION_OFFSET = np.array([0.0, 150.0, 0.0, 0.0, 0.0, 0.0, 0.0])
ACTION_SCALE = np.array([150.0, 150.0, 50.0, np.pi, np.pi, np.pi, np.pi])


def squash_action(u: np.ndarray) -> np.ndarray:
    return ACTION_OFFSET + ACTION_SCALE * np.tanh(u)


def normalize_action(a_env: np.ndarray) -> np.ndarray:
    return (a_env - ACTION_OFFSET) / ACTION_SCALE


def relativize_dense_window(win: np.ndarray) -> np.ndarray:
    """Express a dense window relative to its first frame's base pose, giving
    translation and heading invariance. win: (..., H, FRAME_DIM)."""
    out = np.array(win)
    p0 = out[..., 0:1, 0:2]
    th0 = out[..., 0:1, 2]
    c, s = np.cos(th0), np.sin(th0)
    def rot_inv(v):                    # rotate by -th0
        x, z = v[..., 0], v[..., 1]
        return np.stack([c * x + s * z, -s * x + c * z], axis=-1)
    out[..., 0:2] = rot_inv(out[..., 0:2] - p0)
    out[..., 2] = out[..., 2] - th0
    out[..., 11:13] = rot_inv(out[..., 11:13])
    return out


def points_in_base(points: np.ndarray, base_pos: np.ndarray,
                   base_pitch: np.ndarray) -> np.ndarray:
    """World points (N, ..., 2) into each env's base frame."""
    rel = points - base_pos.reshape(base_pos.shape[0], *([1] * (points.ndim - 2)), 2)
    c = np.cos(base_pitch).reshape(-1, *([1] * (points.ndim - 2)))
    s = np.sin(base_pitch).reshape(-1, *([1] * (points.ndim - 2)))
    x, z = rel[..., 0], rel[..., 1]
    return np.stack([c * x + s * z, -s * x + c * z], axis=-1)


@dataclass
class WorldConfig:
    stage: int = 1
    n_envs: int = 64
    episode_seconds: float = 6.0
    keypoint_noise_std: float = 0.0
    random_start: bool = True            # reference-state init at a random frame
    sequential_clips: bool = False       # env i -> clip i % n_clips (evaluation)
    term_base_error: float | None = None  # training-time tightening of the
    # base-error cutoff; None keeps the standard termination bound
    sim: SimConfig = field(default_factory=SimConfig)
    rand: RandSpec = field(default_factory=RandSpec.disabled)


class TrackingWorld:
    """N parallel episodes tracking reference clips with auto-reset."""

    def __init__(self, clips: list, config: WorldConfig, seed: int = 0):
        if not clips:
            raise ValueError("need at least one reference clip")
        self.clips = clips
        self.cfg = config
        self.sim = config.sim
        self.seed = seed
        self.n = config.n_envs
        n = self.n
        self.rng = np.random.default_rng([seed, 901])
        self.obs_rng = np.random.default_rng([seed, 902])

        self.frames = [c.frames() for c in clips]                    # dense (T,14)
        self.keypoints = [extract_keypoints(c).stacked() for c in clips]
        self.fps = clips[0].fps
        self.ctrl_dt = 1.0 / self.fps                                # 50 Hz

        # hold-padded reference arrays so window gathers are single fancy-index
        # operations: pad every clip with `margin` copies of its last frame
        margin = WINDOW_HORIZON * WINDOW_STRIDE
        tmax = max(len(c) for c in clips)
        n_clips = len(clips)
        self.clip_len = np.array([len(c) for c in clips])
        self._pad_len = tmax + margin
        self._frames_pad = np.zeros((n_clips, self._pad_len, FRAME_DIM))
        self._kp_pad = np.zeros((n_clips, self._pad_len, 6))
        self._obj_pad = np.zeros((n_clips, self._pad_len, 3))
        self._has_obj = np.zeros(n_clips, dtype=bool)
        for ci, clip in enumerate(clips):
            t_len = len(clip)
            self._frames_pad[ci, :t_len] = self.frames[ci]
            self._frames_pad[ci, t_len:] = self.frames[ci][-1]
            self._kp_pad[ci, :t_len] = self.keypoints[ci]
            self._kp_pad[ci, t_len:] = self.keypoints[ci][-1]
            if clip.object_track is not None:
                self._has_obj[ci] = True
                track = np.concatenate([clip.object_track.pos,
                                        clip.object_track.pitch[:, None]], axis=1)
                self._obj_pad[ci, :t_len] = track
                self._obj_pad[ci, t_len:] = track[-1]
        self._noisy_kp_pad = np.zeros((n, self._pad_len, 6))
        self._win_offsets = WINDOW_STRIDE * np.arange(WINDOW_HORIZON)

        self.robot = RobotState.default(n)
        self.obj = ObjectState.default(n, pos=(50.0, 0.15))
        self.clip_idx = np.zeros(n, dtype=int)
        self.frame_idx = np.zeros(n, dtype=int)
        self.steps_in_episode = np.zeros(n, dtype=int)
        self.episode_counter = np.zeros(n, dtype=int)
        self.max_steps = np.zeros(n, dtype=int)
        self.diverged = np.zeros(n, dtype=bool)
        self.last_terminated = np.zeros(n, dtype=bool)
        self.rand_values = [dict() for _ in range(n)]
        self.pushes = [[] for _ in range(n)]
        self.payload = np.zeros(n)
        self.kp_scale = np.ones(n)
        self.kd_scale = np.ones(n)
        self.act_offset = np.zeros((n, NUM_JOINTS))
        self.last_torque = np.zeros((n, NUM_JOINTS))
        self.norm_action = np.zeros((n, ACTION_DIM))
        self.prev_norm_action = np.zeros((n, ACTION_DIM))
        self.prev_prev_norm_action = np.zeros((n, ACTION_DIM))
        self.reset(np.arange(n))

    # ------------------------------------------------------------- resets
    def reset(self, ids: np.ndarray) -> None:
        if len(ids) == 0:
            return
        for i in ids:
            i = int(i)
            ep = int(self.episode_counter[i])
            rng = np.random.default_rng([self.seed, i, ep, 7])
            ci = i % len(self.clips) if self.cfg.sequential_clips \
                else int(rng.integers(len(self.clips)))
            clip = self.clips[ci]
            t_len = len(clip)
            horizon_steps = int(round(self.cfg.episode_seconds * self.fps))
            max_start = max(0, t_len - 1 - min(horizon_steps, t_len - 1))
            f0 = int(rng.integers(0, max_start + 1)) \
                if (max_start > 0 and self.cfg.random_start) else 0
            self.clip_idx[i] = ci
            self.frame_idx[i] = f0
            self.steps_in_episode[i] = 0
            self.max_steps[i] = min(horizon_steps, t_len - 1 - f0)

            fr = self.frames[ci][f0]
            self.robot.base_pos[i] = fr[0:2]
            self.robot.base_pitch[i] = fr[2]
            self.robot.joint_pos[i] = fr[3:7]
            self.robot.joint_vel[i] = fr[7:11]
            self.robot.base_lin_vel[i] = fr[11:13]
            self.robot.base_ang_vel[i] = fr[13]
            self.robot.prev_action[i] = 0.0
            self.norm_action[i] = 0.0
            self.prev_norm_action[i] = 0.0
            self.prev_prev_norm_action[i] = 0.0
            self.last_torque[i] = 0.0
            self.diverged[i] = False

            # reference keypoints with injected observation noise, per episode
            kps = Keypoints.from_stacked(self.keypoints[ci])
            if self.cfg.keypoint_noise_std > 0:
                kps = inject_keypoint_noise(
                    kps, self.cfg.keypoint_noise_std,
                    seed=int(np.random.default_rng([self.seed, i, ep, 8])
                             .integers(2 ** 31)))
            stacked = kps.stacked()
            self._noisy_kp_pad[i, :t_len] = stacked
            self._noisy_kp_pad[i, t_len:] = stacked[-1]

            rand = sample_robot(self.cfg.rand, self.seed, i, ep)
            self.rand_values[i] = rand.values
            v = rand.values
            self.payload[i] = v.get("base_payload", 0.0) + \
                (v.get("link_mass_scale", 1.0) - 1.0) * sum(self.sim.link_masses)
            self.kp_scale[i] = v.get("kp_scale", 1.0)
            self.kd_scale[i] = v.get("kd_scale", 1.0)
            self.act_offset[i] = v.get("actuation_offset", 0.0)
            self.pushes[i] = schedule_pushes(
                self.cfg.rand, self.cfg.episode_seconds, self.seed, i, ep) \
                if self.cfg.rand.enabled else []

            self._reset_object(i, clip, rng, ep)
            self.episode_counter[i] += 1

    def _reset_object(self, i: int, clip: MotionClip, rng, ep: int) -> None:
        if clip.object_track is None:
            # park an inert box far away so contacts never fire
            self.obj.pos[i] = (1000.0 + 10.0 * i, 0.15)
            self.obj.pitch[i] = 0.0
            self.obj.lin_vel[i] = 0.0
            self.obj.ang_vel[i] = 0.0
            return
        props = sample_object(self.cfg.rand, self.seed, i, ep)
        f0 = int(self.frame_idx[i])
        self.obj.pos[i] = clip.object_track.pos[f0]
        self.obj.pitch[i] = clip.object_track.pitch[f0]
        if self.cfg.rand.enabled:
            self.obj.pos[i] += props.get("init_pos_offset", (0.0, 0.0))
            self.obj.pitch[i] += props.get("init_rot_offset", 0.0)
        self.obj.lin_vel[i] = 0.0
        self.obj.ang_vel[i] = 0.0
        scale = props.get("scale", 1.0)
        self.obj.half_extents[i] = np.array([0.15, 0.15]) * scale
        self.obj.mass[i] = props.get("mass", 0.5)
        self.obj.friction[i] = max(props.get("friction", 0.6)
                                   - props.get("ground_friction_modifier", 0.0), 0.05)
        self.obj.restitution[i] = props.get("restitution", 0.0)
        self.obj.com_offset[i] = props.get("com_offset", (0.0, 0.0))
        # keep the box above ground after randomized scaling
        self.obj.pos[i, 1] = max(self.obj.pos[i, 1], self.obj.half_extents[i, 1])

    # ------------------------------------------------------------ stepping
    def step_50hz(self, a_env: np.ndarray) -> None:
        """Advance one PD period (0.02 s) with env-unit actions (N, 7)."""
        t_now = self.steps_in_episode * self.ctrl_dt
        ext_f = np.zeros((self.n, 2))
        ext_t = np.zeros(self.n)
        for i in range(self.n):
            for ev in self.pushes[i]:
                if ev.kind == "force" and ev.time <= t_now[i] < ev.time + ev.duration:
                    ext_f[i] += ev.force
                elif ev.kind == "impulse" and \
                        t_now[i] <= ev.time < t_now[i] + self.ctrl_dt:
                    self.robot.base_lin_vel[i] += ev.dv
                    self.robot.base_ang_vel[i] += ev.dw

        action = Action.from_flat(a_env)
        self.robot, self.obj, div = step_physics(
            self.robot, self.obj, action, self.sim,
            ext_force=ext_f, ext_torque=ext_t,
            kp_scale=self.kp_scale, kd_scale=self.kd_scale,
            actuation_offset=self.act_offset, payload=self.payload,
            last_torque_out=self.last_torque)
        self.diverged |= div
        self.prev_prev_norm_action = self.prev_norm_action
        self.prev_norm_action = self.norm_action
        self.norm_action = normalize_action(a_env)
        self.frame_idx = np.minimum(self.frame_idx + 1,
                                    self.clip_len[self.clip_idx] - 1)
        self.steps_in_episode += 1

    # ---------------------------------------------------------- references
    def _window_idx(self) -> np.ndarray:
        # hold padding makes out-of-range indices safe; clamp only per clip end
        idx = self.frame_idx[:, None] + self._win_offsets[None, :]
        return np.minimum(idx, self.clip_len[self.clip_idx, None] - 1
                          + WINDOW_HORIZON * WINDOW_STRIDE)

    def ref_frame(self) -> np.ndarray:
        """(N, FRAME_DIM) dense reference at the current frame."""
        return self._frames_pad[self.clip_idx, self.frame_idx]

    def ref_dense_window(self) -> np.ndarray:
        """(N, H, FRAME_DIM) future window, terminal hold."""
        return self._frames_pad[self.clip_idx[:, None], self._window_idx()]

    def ref_keypoint_window(self, noisy: bool = True) -> np.ndarray:
        """(N, H, 6) future keypoint window (world frame)."""
        idx = self._window_idx()
        if noisy:
            return self._noisy_kp_pad[np.arange(self.n)[:, None], idx]
        return self._kp_pad[self.clip_idx[:, None], idx]

    def ref_keypoints_now(self, noisy: bool = False) -> np.ndarray:
        if noisy:
            return self._noisy_kp_pad[np.arange(self.n), self.frame_idx]
        return self._kp_pad[self.clip_idx, self.frame_idx]

    def ref_object_window(self) -> np.ndarray:
        """(N, H, 3) future object pose window; zeros when no object track."""
        return self._obj_pad[self.clip_idx[:, None], self._window_idx()]

    def ref_object_now(self):
        track = self._obj_pad[self.clip_idx, self.frame_idx]
        return track[:, 0:2], track[:, 2], self._has_obj[self.clip_idx]

    # -------------------------------------------------------- observations
    def proprio(self) -> np.ndarray:
        obs = observe(self.robot, self.sim)
        noise = joint_injection_noise(self.cfg.rand, self.obs_rng,
                                      (self.n, NUM_JOINTS))
        obs[:, 0:NUM_JOINTS] = obs[:, 0:NUM_JOINTS] + noise
        return obs

    def encoder_window(self) -> np.ndarray:
        """(N, H*FRAME_DIM) relativized dense window for the motion encoder."""
        win = relativize_dense_window(self.ref_dense_window())
        return win.reshape(self.n, -1)

    def keypoint_window_base(self, noisy: bool = True) -> np.ndarray:
        """(N, H*6) reference keypoints expressed in the current base frame."""
        win = self.ref_keypoint_window(noisy)                     # (N, H, 6)
        pts = win.reshape(self.n, WINDOW_HORIZON, 3, 2)
        loc = points_in_base(pts, self.robot.base_pos, self.robot.base_pitch)
        return loc.reshape(self.n, -1)

    def object_window_base(self) -> np.ndarray:
        win = self.ref_object_window()
        loc = points_in_base(win[..., 0:2], self.robot.base_pos,
                             self.robot.base_pitch)
        pitch_rel = win[..., 2] - self.robot.base_pitch[:, None]
        return np.concatenate([loc, pitch_rel[..., None]], axis=-1) \
                 .reshape(self.n, -1)

    def object_state_base(self) -> np.ndarray:
        """(N, 6) current object pose/velocity relative to the base frame."""
        pos = points_in_base(self.obj.pos[:, None, :], self.robot.base_pos,
                             self.robot.base_pitch)[:, 0]
        pitch = self.obj.pitch - self.robot.base_pitch
        vel = points_in_base((self.obj.lin_vel - self.robot.base_lin_vel)[:, None, :]
                             + self.robot.base_pos[:, None, :],
                             self.robot.base_pos, self.robot.base_pitch)[:, 0]
        return np.concatenate([pos, pitch[:, None], vel,
                               self.obj.ang_vel[:, None]], axis=1)

    def critic_state(self) -> np.ndarray:
        """Privileged state: absolute base pose/velocities."""
        return np.concatenate([
            self.robot.base_pos, self.robot.base_pitch[:, None],
            self.robot.base_lin_vel, self.robot.base_ang_vel[:, None]], axis=1)

    # ----------------------------------------------------- reward/termination
    def reward_and_done(self):
        """Stage rewards at the current state plus termination handling.

        Returns (reward (N,), done (N,), breakdown). Does NOT reset; callers
        reset after reading observations.
        """
        fr = self.ref_frame()
        ref_kp = self.ref_keypoints_now(noisy=False)
        terminated = rw.check_termination(self.robot, fr[:, 0:2], self.diverged,
                                          base_error_limit=self.cfg.term_base_error)
        ref_obj_pos, ref_obj_pitch, has_obj = self.ref_object_now()
        inputs = rw.RewardInputs(
            robot=self.robot,
            ref_base_pos=fr[:, 0:2], ref_base_pitch=fr[:, 2],
            ref_joint_pos=fr[:, 3:7], ref_joint_vel=fr[:, 7:11],
            ref_keypoints=ref_kp,
            torques=self.last_torque, torque_limit=self.sim.torque_limit,
            action=self.norm_action, prev_action=self.prev_norm_action,
            prev_prev_action=self.prev_prev_norm_action,
            terminated=terminated,
            obj=self.obj if self.cfg.stage == 3 else None,
            ref_obj_pos=ref_obj_pos if self.cfg.stage == 3 else None,
            ref_obj_pitch=ref_obj_pitch if self.cfg.stage == 3 else None,
        )
        breakdown = rw.compute_rewards(self.cfg.stage, inputs, self.sim)
        timeout = self.steps_in_episode >= self.max_steps
        done = terminated | timeout
        self.last_terminated = terminated
        return breakdown.total, done, breakdown
