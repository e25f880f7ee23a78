"""Exponential-kernel tracking rewards, penalties, and episode termination.

The registry is the single source of truth for which terms exist at each
training stage and with which (weight, sigma). There are deliberately no
contact-specific rewards, force curricula, or state-initialization machinery
anywhere in this registry.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .sim import RobotState, ObjectState, SimConfig, hand_positions_world

TERMINATION_BASE_HEIGHT = 0.3
TERMINATION_PITCH = 1.0
TERMINATION_BASE_ERROR = 0.5


@dataclass(frozen=True)
class RewardTerm:
    name: str
    kind: str                    # "kernel" or "penalty"
    stages: dict                 # stage -> weight (penalty) or (weight, sigma)

    def __post_init__(self):
        if self.kind not in ("kernel", "penalty"):
            raise ValueError(f"bad reward kind {self.kind!r}")
        if self.kind == "kernel":
            for stage, (w, sigma) in self.stages.items():
                if sigma <= 0:
                    raise ValueError(f"{self.name}: sigma must be > 0 (stage {stage})")

    def weight(self, stage: int) -> float:
        v = self.stages[stage]
        return v[0] if self.kind == "kernel" else v

    def sigma(self, stage: int) -> float:
        return self.stages[stage][1]


def default_registry() -> list[RewardTerm]:
    """Tracking terms with stage-2 -> stage-3 bandwidth sharpening, plus the
    shared penalties. Marker-rotation and feet-height rows do not exist in this
    planar embodiment."""
    return [
        RewardTerm("base_position", "kernel", {1: (4.0, 0.2), 2: (4.0, 0.2), 3: (4.0, 0.1)}),
        RewardTerm("base_rotation", "kernel", {1: (2.0, 1.2), 2: (2.0, 1.2), 3: (2.0, 0.6)}),
        RewardTerm("marker_position", "kernel", {2: (8.0, 0.2), 3: (4.0, 0.1)}),
        RewardTerm("joint_position", "kernel", {1: (4.0, 20.0), 2: (4.0, 20.0), 3: (4.0, 10.0)}),
        RewardTerm("joint_velocity", "kernel", {1: (2.0, 50.0), 2: (2.0, 50.0), 3: (2.0, 30.0)}),
        RewardTerm("object_position", "kernel", {3: (12.0, 0.1)}),
        RewardTerm("object_rotation", "kernel", {3: (3.0, 1.0)}),
        RewardTerm("termination", "penalty", {1: -10.0, 2: -10.0, 3: -10.0}),
        RewardTerm("joint_torques", "penalty", {1: -2.0, 2: -2.0, 3: -2.0}),
        RewardTerm("action_rate", "penalty", {1: -2.0, 2: -2.0, 3: -2.0}),
        RewardTerm("action_smoothness", "penalty", {1: -2.0, 2: -2.0, 3: -2.0}),
    ]


def registry_to_json(terms: list[RewardTerm]) -> list[dict]:
    return [{"name": t.name, "kind": t.kind,
             "stages": {str(s): list(v) if t.kind == "kernel" else v
                        for s, v in t.stages.items()}} for t in terms]


def registry_from_json(items: list[dict]) -> list[RewardTerm]:
    out = []
    for it in items:
        stages = {int(s): tuple(v) if it["kind"] == "kernel" else v
                  for s, v in it["stages"].items()}
        out.append(RewardTerm(it["name"], it["kind"], stages))
    return out


def kernel(x: np.ndarray, x_ref: np.ndarray, sigma: float) -> np.ndarray:
    """exp(-||x - x_ref||^2 / sigma); norm over the trailing axis."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    x = np.asarray(x, dtype=float)
    x_ref = np.asarray(x_ref, dtype=float)
    err2 = np.sum((x - x_ref) ** 2, axis=-1)
    return np.exp(-err2 / sigma)


@dataclass
class RewardBreakdown:
    values: dict                  # name -> unweighted per-env values (N,)
    weighted: dict                # name -> weighted per-env values (N,)
    total: np.ndarray             # (N,)


@dataclass
class RewardInputs:
    """Everything the registry terms consume for one control step, batched."""

    robot: RobotState
    ref_base_pos: np.ndarray          # (N, 2)
    ref_base_pitch: np.ndarray        # (N,)
    ref_joint_pos: np.ndarray         # (N, 4)
    ref_joint_vel: np.ndarray         # (N, 4)
    ref_keypoints: np.ndarray | None  # (N, 6) [base, lh, rh], world
    torques: np.ndarray               # (N, 4) applied PD torques
    torque_limit: float
    action: np.ndarray                # (N, A) normalized actions in [-1, 1]
    prev_action: np.ndarray           # (N, A)
    prev_prev_action: np.ndarray      # (N, A)
    terminated: np.ndarray            # (N,) bool
    obj: ObjectState | None = None
    ref_obj_pos: np.ndarray | None = None    # (N, 2)
    ref_obj_pitch: np.ndarray | None = None  # (N,)


def compute_rewards(stage: int, inputs: RewardInputs, cfg: SimConfig,
                    registry: list[RewardTerm] | None = None) -> RewardBreakdown:
    if stage not in (1, 2, 3):
        raise ValueError("stage must be 1, 2 or 3")
    registry = registry if registry is not None else default_registry()
    robot = inputs.robot
    n = robot.base_pos.shape[0]
    values: dict[str, np.ndarray] = {}
    weighted: dict[str, np.ndarray] = {}
    total = np.zeros(n)

    hands_w = None
    for term in registry:
        if stage not in term.stages:
            continue
        name = term.name
        if name == "base_position":
            v = kernel(robot.base_pos, inputs.ref_base_pos, term.sigma(stage))
        elif name == "base_rotation":
            v = kernel(robot.base_pitch[:, None], inputs.ref_base_pitch[:, None],
                       term.sigma(stage))
        elif name == "marker_position":
            if inputs.ref_keypoints is None:
                raise ValueError("marker_position requires reference keypoints")
            if hands_w is None:
                hands_w = hand_positions_world(robot, cfg).reshape(n, 4)
            # both hands pooled into one squared norm
            v = kernel(hands_w, inputs.ref_keypoints[:, 2:6], term.sigma(stage))
        elif name == "joint_position":
            v = kernel(robot.joint_pos, inputs.ref_joint_pos, term.sigma(stage))
        elif name == "joint_velocity":
            v = kernel(robot.joint_vel, inputs.ref_joint_vel, term.sigma(stage))
        elif name == "object_position":
            if inputs.obj is None or inputs.ref_obj_pos is None:
                raise ValueError("stage-3 rewards require an object reference")
            v = kernel(inputs.obj.pos, inputs.ref_obj_pos, term.sigma(stage))
        elif name == "object_rotation":
            if inputs.obj is None or inputs.ref_obj_pitch is None:
                raise ValueError("stage-3 rewards require an object reference")
            v = kernel(inputs.obj.pitch[:, None], inputs.ref_obj_pitch[:, None],
                       term.sigma(stage))
        elif name == "termination":
            v = inputs.terminated.astype(float)
        elif name == "joint_torques":
            v = np.mean((inputs.torques / inputs.torque_limit) ** 2, axis=1)
        elif name == "action_rate":
            v = np.mean((inputs.action - inputs.prev_action) ** 2, axis=1)
        elif name == "action_smoothness":
            v = np.mean((inputs.action - 2 * inputs.prev_action
                         + inputs.prev_prev_action) ** 2, axis=1)
        else:
            raise ValueError(f"unknown reward term {name!r}")
        values[name] = v
        weighted[name] = term.weight(stage) * v
        total = total + weighted[name]

    return RewardBreakdown(values, weighted, total)


def check_termination(robot: RobotState, ref_base_pos: np.ndarray,
                      diverged: np.ndarray | None = None,
                      base_error_limit: float | None = None) -> np.ndarray:
    """Episode-ending conditions; base keypoint error uses a strict inequality."""
    err = np.linalg.norm(robot.base_pos - ref_base_pos, axis=1)
    limit = TERMINATION_BASE_ERROR if base_error_limit is None else base_error_limit
    done = ((robot.base_pos[:, 1] < TERMINATION_BASE_HEIGHT)
            | (np.abs(robot.base_pitch) > TERMINATION_PITCH)
            | (err > limit))
    if diverged is not None:
        done = done | diverged
    return done
