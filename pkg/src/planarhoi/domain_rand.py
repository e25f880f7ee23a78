"""Domain randomization: per-episode robot/object property draws and push events.

All draws are uniform within their configured ranges and are pure functions of
(global seed, env index, episode counter), so environments never share streams.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Range:
    kind: str        # "multiplicative" | "additive" | "absolute"
    lo: float
    hi: float

    def __post_init__(self):
        if self.lo > self.hi:
            raise ValueError("range lo must be <= hi")
        if self.kind not in ("multiplicative", "additive", "absolute"):
            raise ValueError(f"bad range kind {self.kind!r}")


@dataclass(frozen=True)
class PushSpec:
    interval: tuple = (1.0, 5.0)          # s between events
    dv_x: float = 0.5                     # m/s impulse caps
    dv_z: float = 0.2
    dw: float = 0.8                       # rad/s
    force: float = 20.0                   # N sustained-force cap
    duration: tuple = (0.1, 0.2)          # s
    enabled: bool = True


def default_robot_ranges() -> dict:
    return {
        "link_mass_scale": Range("multiplicative", 0.8, 1.2),
        "com_offset": Range("additive", -0.1, 0.1),
        "base_payload": Range("absolute", -0.1, 0.2),
        "link_restitution": Range("absolute", 0.0, 0.5),
        "link_friction": Range("absolute", 0.3, 1.5),
        "joint_friction": Range("absolute", 0.5, 2.0),
        "joint_damping_scale": Range("multiplicative", 0.3, 1.5),
        "joint_armature_scale": Range("multiplicative", 1.0, 1.05),
        "kp_scale": Range("multiplicative", 0.9, 1.1),
        "kd_scale": Range("multiplicative", 0.9, 1.1),
        "joint_injection_noise": Range("additive", -0.01, 0.01),
        "actuation_offset": Range("additive", -0.01, 0.01),
    }


def default_object_ranges() -> dict:
    return {
        "mass": Range("absolute", 0.05, 1.5),
        "com_offset": Range("additive", -0.05, 0.05),
        "friction": Range("absolute", 0.1, 1.2),
        # planar boxes do not roll; this modifier lowers effective ground friction
        "ground_friction_modifier": Range("absolute", 0.0, 0.1),
        "restitution": Range("absolute", 0.0, 0.2),
        "scale": Range("multiplicative", 0.8, 1.1),
        "init_pos_offset": Range("additive", 0.0, 0.1),
        "init_rot_offset": Range("additive", 0.0, np.deg2rad(5.0)),
    }


@dataclass
class RandSpec:
    robot: dict = field(default_factory=default_robot_ranges)
    object: dict = field(default_factory=default_object_ranges)
    push: PushSpec = field(default_factory=PushSpec)
    enabled: bool = True

    @staticmethod
    def disabled() -> "RandSpec":
        return RandSpec(robot={}, object={}, push=PushSpec(enabled=False), enabled=False)

    def to_json_dict(self) -> dict:
        return {
            "enabled": self.enabled,
            "robot": {k: [v.kind, v.lo, v.hi] for k, v in self.robot.items()},
            "object": {k: [v.kind, v.lo, v.hi] for k, v in self.object.items()},
            "push": {
                "interval": list(self.push.interval), "dv_x": self.push.dv_x,
                "dv_z": self.push.dv_z, "dw": self.push.dw,
                "force": self.push.force, "duration": list(self.push.duration),
                "enabled": self.push.enabled,
            },
        }

    @staticmethod
    def from_json_dict(d: dict) -> "RandSpec":
        p = d.get("push", {})
        return RandSpec(
            robot={k: Range(*v) for k, v in d.get("robot", {}).items()},
            object={k: Range(*v) for k, v in d.get("object", {}).items()},
            push=PushSpec(
                interval=tuple(p.get("interval", (1.0, 5.0))),
                dv_x=p.get("dv_x", 0.5), dv_z=p.get("dv_z", 0.2),
                dw=p.get("dw", 0.8), force=p.get("force", 20.0),
                duration=tuple(p.get("duration", (0.1, 0.2))),
                enabled=p.get("enabled", True)),
            enabled=d.get("enabled", True))


@dataclass
class EnvRandState:
    env_id: int
    episode: int
    values: dict                  # name -> realized value


def _rng(seed: int, env_id: int, episode: int, salt: int) -> np.random.Generator:
    return np.random.default_rng([seed, env_id, episode, salt])


def _neutral(r: Range) -> float:
    return 1.0 if r.kind == "multiplicative" else 0.0


def sample_robot(spec: RandSpec, seed: int, env_id: int, episode: int = 0) -> EnvRandState:
    """One uniform draw per robot parameter; identical inputs give identical draws."""
    rng = _rng(seed, env_id, episode, salt=1)
    values = {}
    for name, r in spec.robot.items():
        values[name] = float(rng.uniform(r.lo, r.hi)) if spec.enabled else _neutral(r)
    return EnvRandState(env_id, episode, values)


def joint_injection_noise(spec: RandSpec, rng: np.random.Generator, shape) -> np.ndarray:
    """Observation-time joint noise, re-drawn every observation."""
    r = spec.robot.get("joint_injection_noise")
    if r is None or not spec.enabled:
        return np.zeros(shape)
    return rng.uniform(r.lo, r.hi, shape)


def sample_object(spec: RandSpec, seed: int, env_id: int, episode: int = 0) -> dict:
    """Stage-3 object property draw, range-contained by construction."""
    rng = _rng(seed, env_id, episode, salt=2)
    values = {}
    for name, r in spec.object.items():
        if not spec.enabled:
            values[name] = _neutral(r) if name not in ("mass", "friction", "scale") else \
                {"mass": 0.5, "friction": 0.6, "scale": 1.0}[name]
            continue
        if name in ("com_offset", "init_pos_offset"):
            # 2-vector with magnitude inside the configured cap
            cap = max(abs(r.lo), abs(r.hi))
            ang = rng.uniform(0.0, 2 * np.pi)
            mag = cap * np.sqrt(rng.uniform(0.0, 1.0))
            values[name] = (float(mag * np.cos(ang)), float(mag * np.sin(ang)))
        elif name == "init_rot_offset":
            cap = max(abs(r.lo), abs(r.hi))
            values[name] = float(rng.uniform(-cap, cap))
        else:
            values[name] = float(rng.uniform(r.lo, r.hi))
    return values


@dataclass(frozen=True)
class PushEvent:
    time: float                  # s from episode start
    kind: str                    # "impulse" | "force"
    dv: tuple = (0.0, 0.0)       # m/s (impulse)
    dw: float = 0.0              # rad/s (impulse)
    force: tuple = (0.0, 0.0)    # N (sustained)
    duration: float = 0.0        # s (sustained)


def schedule_pushes(spec: RandSpec, episode_length: float, seed: int,
                    env_id: int, episode: int = 0) -> list[PushEvent]:
    if episode_length <= 0:
        raise ValueError("episode length must be positive")
    p = spec.push
    if not (spec.enabled and p.enabled):
        return []
    rng = _rng(seed, env_id, episode, salt=3)
    events = []
    t = float(rng.uniform(*p.interval))
    while t < episode_length:
        if rng.uniform() < 0.5:
            events.append(PushEvent(
                time=t, kind="impulse",
                dv=(float(rng.uniform(-p.dv_x, p.dv_x)),
                    float(rng.uniform(-p.dv_z, p.dv_z))),
                dw=float(rng.uniform(-p.dw, p.dw))))
        else:
            ang = rng.uniform(0.0, 2 * np.pi)
            mag = rng.uniform(0.0, p.force)
            events.append(PushEvent(
                time=t, kind="force",
                force=(float(mag * np.cos(ang)), float(mag * np.sin(ang))),
                duration=float(rng.uniform(*p.duration))))
        t += float(rng.uniform(*p.interval))
    return events
