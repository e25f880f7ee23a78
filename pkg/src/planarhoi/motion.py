"""Procedural reference motions: generation, keypoint extraction, windows, noise.

Clips are stored as dense arrays at a fixed 50 Hz rate. Velocities are always
recomputed as finite differences of the generated positions so every clip is
kinematically consistent by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .sim import SimConfig, hand_positions_base, rot

REFERENCE_FPS = 50.0
NOMINAL_BASE_HEIGHT = 0.8
TASK_TAGS = ("walk", "reach", "carry", "push")

# shared lookahead: 10 samples at 10 Hz (stride 5 at 50 Hz) = 1.0 s
WINDOW_HORIZON = 10
WINDOW_STRIDE = 5

# per-frame layout of the dense reference vector fed to the encoder
FRAME_DIM = 2 + 1 + 4 + 4 + 2 + 1  # 14


@dataclass
class Keypoints:
    """Sparse reference: base and both hand positions per frame, world frame."""

    base: np.ndarray        # (T, 2)
    left_hand: np.ndarray   # (T, 2)
    right_hand: np.ndarray  # (T, 2)

    def __len__(self):
        return self.base.shape[0]

    def stacked(self) -> np.ndarray:
        """(T, 6) layout [base, left, right]."""
        return np.concatenate([self.base, self.left_hand, self.right_hand], axis=1)

    @staticmethod
    def from_stacked(arr: np.ndarray) -> "Keypoints":
        return Keypoints(arr[:, 0:2].copy(), arr[:, 2:4].copy(), arr[:, 4:6].copy())

    def copy(self) -> "Keypoints":
        return Keypoints(self.base.copy(), self.left_hand.copy(), self.right_hand.copy())


@dataclass
class ObjectTrack:
    pos: np.ndarray     # (T, 2)
    pitch: np.ndarray   # (T,)

    def __len__(self):
        return self.pos.shape[0]


@dataclass
class MotionClip:
    fps: float
    task_tag: str
    base_pos: np.ndarray        # (T, 2)
    base_pitch: np.ndarray      # (T,)
    joint_pos: np.ndarray       # (T, 4)
    joint_vel: np.ndarray       # (T, 4)
    base_lin_vel: np.ndarray    # (T, 2)
    base_ang_vel: np.ndarray    # (T,)
    object_track: ObjectTrack | None = None

    def __post_init__(self):
        if self.base_pos.shape[0] < 2:
            raise ValueError("a clip needs at least two frames")
        if self.task_tag not in TASK_TAGS:
            raise ValueError(f"unknown task_tag {self.task_tag!r}")

    def __len__(self):
        return self.base_pos.shape[0]

    def frames(self) -> np.ndarray:
        """(T, FRAME_DIM) dense per-frame vectors
        [base_pos, base_pitch, joint_pos, joint_vel, base_lin_vel, base_ang_vel]."""
        return np.concatenate([
            self.base_pos, self.base_pitch[:, None], self.joint_pos,
            self.joint_vel, self.base_lin_vel, self.base_ang_vel[:, None],
        ], axis=1)

    def translated(self, offset) -> "MotionClip":
        off = np.asarray(offset, dtype=float)
        obj = None
        if self.object_track is not None:
            obj = ObjectTrack(self.object_track.pos + off, self.object_track.pitch.copy())
        return MotionClip(self.fps, self.task_tag, self.base_pos + off,
                          self.base_pitch.copy(), self.joint_pos.copy(),
                          self.joint_vel.copy(), self.base_lin_vel.copy(),
                          self.base_ang_vel.copy(), obj)

    def to_json_dict(self) -> dict:
        d = {
            "fps": self.fps,
            "task_tag": self.task_tag,
            "frames": [
                {
                    "base_pos": self.base_pos[t].tolist(),
                    "base_pitch": float(self.base_pitch[t]),
                    "joint_pos": self.joint_pos[t].tolist(),
                    "joint_vel": self.joint_vel[t].tolist(),
                    "base_lin_vel": self.base_lin_vel[t].tolist(),
                    "base_ang_vel": float(self.base_ang_vel[t]),
                }
                for t in range(len(self))
            ],
        }
        if self.object_track is not None:
            d["object"] = [
                {"pos": self.object_track.pos[t].tolist(),
                 "pitch": float(self.object_track.pitch[t])}
                for t in range(len(self))
            ]
        return d

    @staticmethod
    def from_json_dict(d: dict) -> "MotionClip":
        fr = d["frames"]
        obj = None
        if d.get("object"):
            obj = ObjectTrack(np.array([o["pos"] for o in d["object"]], dtype=float),
                              np.array([o["pitch"] for o in d["object"]], dtype=float))
        return MotionClip(
            fps=float(d["fps"]),
            task_tag=d["task_tag"],
            base_pos=np.array([f["base_pos"] for f in fr], dtype=float),
            base_pitch=np.array([f["base_pitch"] for f in fr], dtype=float),
            joint_pos=np.array([f["joint_pos"] for f in fr], dtype=float),
            joint_vel=np.array([f["joint_vel"] for f in fr], dtype=float),
            base_lin_vel=np.array([f["base_lin_vel"] for f in fr], dtype=float),
            base_ang_vel=np.array([f["base_ang_vel"] for f in fr], dtype=float),
            object_track=obj,
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh)

    @staticmethod
    def load(path) -> "MotionClip":
        with open(path) as fh:
            return MotionClip.from_json_dict(json.load(fh))


def arm_ik(target, side: str, cfg: SimConfig):
    """Closed-form 2-link IK: base-frame target -> (shoulder, elbow) angles.

    Unreachable targets are projected onto the workspace boundary.
    """
    l1, l2 = cfg.link_lengths
    off = cfg.shoulder_offset if side == "right" else -cfg.shoulder_offset
    p = np.asarray(target, dtype=float) - np.array([off, 0.0])
    d = np.linalg.norm(p)
    d = np.clip(d, 1e-6, (l1 + l2) * 0.999)
    phi = np.arctan2(p[0], -p[1])            # angle from straight-down
    alpha = np.arccos(np.clip(d / (l1 + l2), -1.0, 1.0))
    qs = phi - alpha
    qe = 2.0 * alpha
    return float(np.clip(qs, -np.pi, np.pi)), float(np.clip(qe, -np.pi, np.pi))


def _smoothstep(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _waypoint_profile(times: np.ndarray, knot_times: np.ndarray,
                      knot_values: np.ndarray) -> np.ndarray:
    """Piecewise-smoothstep interpolation through (knot_times, knot_values)."""
    out = np.empty(times.shape + knot_values.shape[1:])
    idx = np.clip(np.searchsorted(knot_times, times, side="right") - 1, 0,
                  len(knot_times) - 2)
    t0 = knot_times[idx]
    t1 = knot_times[idx + 1]
    frac = _smoothstep((times - t0) / np.maximum(t1 - t0, 1e-9))
    v0 = knot_values[idx]
    v1 = knot_values[idx + 1]
    out[...] = v0 + (v1 - v0) * (frac.reshape(frac.shape + (1,) * (knot_values.ndim - 1)))
    return out


def _finite_diff(x: np.ndarray, dt: float) -> np.ndarray:
    return np.gradient(x, dt, axis=0)


def generate_clip(task_tag: str, duration: float, params: dict | None = None,
                  seed: int = 0, cfg: SimConfig | None = None) -> MotionClip:
    """Deterministic procedural clip at 50 Hz for one of the four task tags."""
    if task_tag not in TASK_TAGS:
        raise ValueError(f"unknown task_tag {task_tag!r}")
    if not (2.0 <= duration <= 30.0):
        raise ValueError("duration must lie in [2, 30] s")
    params = dict(params or {})
    cfg = cfg or SimConfig()
    rng = np.random.default_rng(seed)
    fps = REFERENCE_FPS
    # inclusive endpoint so the clip spans exactly `duration` seconds
    t = np.arange(int(round(duration * fps)) + 1) / fps
    n = len(t)
    dt = 1.0 / fps

    base_pos = np.zeros((n, 2))
    base_pos[:, 1] = NOMINAL_BASE_HEIGHT
    base_pitch = np.zeros(n)
    joint_pos = np.zeros((n, 4))
    object_track = None

    if task_tag == "walk":
        speed = params.get("speed", float(rng.uniform(-0.5, 0.5)))
        bob_amp = params.get("bob_amp", 0.03)
        bob_freq = params.get("bob_freq", 1.5)
        swing_amp = params.get("swing_amp", 0.3 * min(1.0, abs(speed) / 0.3))
        base_pos[:, 0] = speed * t           # exact commanded-speed integral
        base_pos[:, 1] += bob_amp * np.sin(2 * np.pi * bob_freq * t) * (abs(speed) > 1e-9)
        swing = swing_amp * np.sin(2 * np.pi * bob_freq * t)
        joint_pos[:, 0] = swing
        joint_pos[:, 2] = -swing
        elbow_amp = params.get("elbow_amp", 0.1)
        joint_pos[:, 1] = 0.15 + elbow_amp * np.sin(2 * np.pi * bob_freq * t + 0.5)
        joint_pos[:, 3] = 0.15 - elbow_amp * np.sin(2 * np.pi * bob_freq * t + 0.5)

    elif task_tag == "reach":
        n_targets = params.get("n_targets", max(2, int(duration / 2)))
        amp = params.get("amplitude", 0.35)
        knot_times = np.linspace(0.0, t[-1], n_targets + 1)
        knots = np.zeros((n_targets + 1, 4))
        for k in range(1, n_targets + 1):
            for arm, side in ((0, "left"), (1, "right")):
                sx = -1.0 if side == "left" else 1.0
                home = np.array([sx * cfg.shoulder_offset, -sum(cfg.link_lengths)])
                tgt = home + rng.uniform(-amp, amp, 2) * np.array([1.0, 1.0])
                tgt[1] = np.clip(tgt[1], -0.58, 0.1)
                qs, qe = arm_ik(tgt, side, cfg)
                knots[k, 2 * arm:2 * arm + 2] = (qs, qe)
        joint_pos = _waypoint_profile(t, knot_times, knots)

    elif task_tag in ("carry", "push"):
        speed = params.get("speed", float(rng.uniform(0.1, 0.4)))
        half = np.asarray(params.get("box_half_extents", (0.15, 0.15)), dtype=float)
        base_pos[:, 0] = speed * t
        if task_tag == "carry":
            lift = params.get("lift_height", 0.55)
            settle = _smoothstep(t / 1.0)
            box_height = half[1] + settle * (lift - half[1])
            box_x = base_pos[:, 0] + params.get("box_reach", 0.42)
            obj_pos = np.stack([box_x, box_height], axis=1)
            grab = (np.array([-half[0], 0.0]), np.array([half[0], 0.0]))
        else:
            box_x = base_pos[:, 0] + params.get("box_reach", 0.5)
            obj_pos = np.stack([box_x, np.full(n, half[1])], axis=1)
            grab = (np.array([-half[0], 0.05]), np.array([-half[0], -0.05]))
        obj_pitch = np.zeros(n)
        object_track = ObjectTrack(obj_pos, obj_pitch)
        for i in range(n):
            if task_tag == "carry":
                lh = obj_pos[i] + np.array([-half[0], 0.0])
                rh = obj_pos[i] + np.array([half[0], 0.0])
            else:
                lh = obj_pos[i] + grab[0]
                rh = obj_pos[i] + grab[1]
            for arm, side, tgt in ((0, "left", lh), (1, "right", rh)):
                local = tgt - base_pos[i]
                qs, qe = arm_ik(local, side, cfg)
                joint_pos[i, 2 * arm:2 * arm + 2] = (qs, qe)

    base_lin_vel = _finite_diff(base_pos, dt)
    base_ang_vel = _finite_diff(base_pitch, dt)
    joint_vel = _finite_diff(joint_pos, dt)
    return MotionClip(fps, task_tag, base_pos, base_pitch, joint_pos, joint_vel,
                      base_lin_vel, base_ang_vel, object_track)


def extract_keypoints(clip: MotionClip, cfg: SimConfig | None = None) -> Keypoints:
    """World-frame base and hand-tip positions per frame via forward kinematics."""
    cfg = cfg or SimConfig()
    tips = hand_positions_base(clip.joint_pos, cfg)
    r = rot(clip.base_pitch)
    tips_w = clip.base_pos[:, None, :] + np.einsum("nij,naj->nai", r, tips)
    return Keypoints(clip.base_pos.copy(), tips_w[:, 0], tips_w[:, 1])


def inject_keypoint_noise(kps: Keypoints, std: float, seed: int = 0) -> Keypoints:
    """I.i.d. zero-mean Gaussian noise per axis per frame, deterministic per seed."""
    if std < 0:
        raise ValueError("std must be >= 0")
    if std == 0:
        return kps.copy()
    rng = np.random.default_rng(seed)
    arr = kps.stacked()
    return Keypoints.from_stacked(arr + rng.normal(0.0, std, arr.shape))


def window_indices(length: int, t: int, horizon: int = WINDOW_HORIZON,
                   stride: int = WINDOW_STRIDE) -> np.ndarray:
    """Frame indices {t, t+stride, ...}, clamped to the final frame."""
    if length < 1:
        raise ValueError("empty clip")
    if t < 0:
        raise ValueError("t must be >= 0")
    return np.minimum(t + stride * np.arange(horizon), length - 1)


def window(clip: MotionClip, t: int, horizon: int = WINDOW_HORIZON,
           stride: int = WINDOW_STRIDE) -> np.ndarray:
    """(horizon, FRAME_DIM) dense window with terminal hold past the clip end."""
    idx = window_indices(len(clip), t, horizon, stride)
    return clip.frames()[idx]


def keypoint_window(kps: Keypoints, t: int, horizon: int = WINDOW_HORIZON,
                    stride: int = WINDOW_STRIDE) -> np.ndarray:
    """(horizon, 6) keypoint window with terminal hold."""
    idx = window_indices(len(kps), t, horizon, stride)
    return kps.stacked()[idx]


def save_keypoints(kps: Keypoints, fps: float, path) -> None:
    d = {"fps": fps, "frames": [
        {"base": kps.base[t].tolist(), "left_hand": kps.left_hand[t].tolist(),
         "right_hand": kps.right_hand[t].tolist()} for t in range(len(kps))]}
    with open(path, "w") as fh:
        json.dump(d, fh)


def load_keypoints(path) -> tuple[Keypoints, float]:
    with open(path) as fh:
        d = json.load(fh)
    fr = d["frames"]
    kps = Keypoints(np.array([f["base"] for f in fr], dtype=float),
                    np.array([f["left_hand"] for f in fr], dtype=float),
                    np.array([f["right_hand"] for f in fr], dtype=float))
    return kps, float(d["fps"])
