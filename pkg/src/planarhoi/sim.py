"""Planar rigid-body simulator: floating torso with two 2-link arms, one box, ground.

All state containers are batched structure-of-arrays (leading axis = environment
index) so that many environments step together with plain numpy. Everything is
float64 and free of hidden state, which makes trajectories bitwise reproducible.

Conventions: world frame is (x right, z up), pitch is the counterclockwise
rotation in the x-z plane, gravity points along -z. The zero pose has both arms
hanging straight down from shoulders offset +-0.15 m along the base x axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

NUM_JOINTS = 4          # L-shoulder, L-elbow, R-shoulder, R-elbow
ACTION_DIM = 7          # (f_x, f_z, tau) + 4 joint targets
JOINT_LIMIT = np.pi
DIVERGENCE_LIMIT = 1.0e6


@dataclass
class SimConfig:
    physics_dt: float = 0.004
    pd_decimation: int = 5
    highlevel_decimation: int = 5
    gravity: float = 9.81
    kp: float = 40.0
    kd: float = 2.0
    torque_limit: float = 25.0
    fx_limit: float = 150.0
    fz_range: tuple = (0.0, 300.0)
    base_torque_limit: float = 50.0
    contact_stiffness: float = 5000.0
    contact_damping: float = 50.0
    link_lengths: tuple = (0.3, 0.3)
    link_masses: tuple = (0.5, 0.5, 0.5, 0.5)
    base_mass: float = 10.0
    base_inertia: float = 0.8
    shoulder_offset: float = 0.15
    ground_friction: float = 0.8

    def __post_init__(self):
        if self.physics_dt <= 0:
            raise ValueError("physics_dt must be positive")
        if self.pd_decimation < 1 or self.highlevel_decimation < 1:
            raise ValueError("decimations must be >= 1")
        if min(self.torque_limit, self.fx_limit, self.base_torque_limit) <= 0:
            raise ValueError("actuation limits must be positive")

    @property
    def total_mass(self) -> float:
        return self.base_mass + sum(self.link_masses)

    # effective joint inertias about (shoulder, elbow), symmetric per arm
    @property
    def joint_inertias(self) -> np.ndarray:
        l1, l2 = self.link_lengths
        m1, m2 = self.link_masses[0], self.link_masses[1]
        i_sh = m1 * (l1 / 2) ** 2 + m2 * (l1 + l2 / 2) ** 2 + 0.01
        i_el = m2 * (l2 / 2) ** 2 + 0.01
        return np.array([i_sh, i_el, i_sh, i_el])


@dataclass
class RobotState:
    """Batched robot state; every field carries a leading environment axis."""

    base_pos: np.ndarray        # (N, 2)
    base_pitch: np.ndarray      # (N,)
    base_lin_vel: np.ndarray    # (N, 2)
    base_ang_vel: np.ndarray    # (N,)
    joint_pos: np.ndarray       # (N, 4)
    joint_vel: np.ndarray       # (N, 4)
    prev_action: np.ndarray     # (N, 7)

    @staticmethod
    def default(n: int = 1, base_height: float = 0.8) -> "RobotState":
        return RobotState(
            base_pos=np.tile([0.0, base_height], (n, 1)),
            base_pitch=np.zeros(n),
            base_lin_vel=np.zeros((n, 2)),
            base_ang_vel=np.zeros(n),
            joint_pos=np.zeros((n, NUM_JOINTS)),
            joint_vel=np.zeros((n, NUM_JOINTS)),
            prev_action=np.zeros((n, ACTION_DIM)),
        )

    def copy(self) -> "RobotState":
        return RobotState(*(np.array(getattr(self, f)) for f in _ROBOT_FIELDS))

    def validate(self) -> None:
        for f in _ROBOT_FIELDS:
            if not np.all(np.isfinite(getattr(self, f))):
                raise ValueError(f"non-finite robot state field {f!r}")
        if np.any(np.abs(self.joint_pos) > JOINT_LIMIT + 1e-12):
            raise ValueError("joint_pos outside [-pi, pi]")


_ROBOT_FIELDS = ["base_pos", "base_pitch", "base_lin_vel", "base_ang_vel",
                 "joint_pos", "joint_vel", "prev_action"]


@dataclass
class ObjectState:
    pos: np.ndarray             # (N, 2)
    pitch: np.ndarray           # (N,)
    lin_vel: np.ndarray         # (N, 2)
    ang_vel: np.ndarray         # (N,)
    half_extents: np.ndarray    # (N, 2)
    mass: np.ndarray            # (N,)
    friction: np.ndarray        # (N,)
    restitution: np.ndarray     # (N,)
    com_offset: np.ndarray      # (N, 2)

    @staticmethod
    def default(n: int = 1, pos=(0.6, 0.15), half_extents=(0.15, 0.15),
                mass: float = 0.5, friction: float = 0.6) -> "ObjectState":
        return ObjectState(
            pos=np.tile(np.asarray(pos, dtype=float), (n, 1)),
            pitch=np.zeros(n),
            lin_vel=np.zeros((n, 2)),
            ang_vel=np.zeros(n),
            half_extents=np.tile(np.asarray(half_extents, dtype=float), (n, 1)),
            mass=np.full(n, float(mass)),
            friction=np.full(n, float(friction)),
            restitution=np.zeros(n),
            com_offset=np.zeros((n, 2)),
        )

    def copy(self) -> "ObjectState":
        return ObjectState(*(np.array(getattr(self, f)) for f in _OBJECT_FIELDS))

    def validate(self) -> None:
        for f in _OBJECT_FIELDS:
            if not np.all(np.isfinite(getattr(self, f))):
                raise ValueError(f"non-finite object state field {f!r}")
        if np.any(self.mass <= 0) or np.any(self.half_extents <= 0):
            raise ValueError("object mass and half_extents must be positive")
        if np.any(self.friction < 0) or np.any((self.restitution < 0) | (self.restitution > 1)):
            raise ValueError("friction must be >= 0 and restitution in [0, 1]")

    @property
    def inertia(self) -> np.ndarray:
        hx, hz = self.half_extents[:, 0], self.half_extents[:, 1]
        return self.mass * ((2 * hx) ** 2 + (2 * hz) ** 2) / 12.0


_OBJECT_FIELDS = ["pos", "pitch", "lin_vel", "ang_vel", "half_extents",
                  "mass", "friction", "restitution", "com_offset"]


@dataclass
class Action:
    """Base wrench (f_x, f_z, tau) plus four joint position targets, batched."""

    base_wrench: np.ndarray     # (N, 3)
    joint_targets: np.ndarray   # (N, 4)

    @staticmethod
    def zeros(n: int = 1) -> "Action":
        return Action(np.zeros((n, 3)), np.zeros((n, NUM_JOINTS)))

    @staticmethod
    def from_flat(a: np.ndarray) -> "Action":
        a = np.atleast_2d(np.asarray(a, dtype=float))
        return Action(a[:, :3].copy(), a[:, 3:3 + NUM_JOINTS].copy())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.base_wrench, self.joint_targets], axis=1)

    def clamped(self, cfg: SimConfig) -> "Action":
        w = np.array(self.base_wrench)
        w[:, 0] = np.clip(w[:, 0], -cfg.fx_limit, cfg.fx_limit)
        w[:, 1] = np.clip(w[:, 1], cfg.fz_range[0], cfg.fz_range[1])
        w[:, 2] = np.clip(w[:, 2], -cfg.base_torque_limit, cfg.base_torque_limit)
        q = np.clip(self.joint_targets, -JOINT_LIMIT, JOINT_LIMIT)
        return Action(w, q)


def cross2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Scalar z-component of the planar cross product, broadcasting over (..., 2)."""
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def rot(pitch: np.ndarray) -> np.ndarray:
    """(N, 2, 2) rotation matrices mapping base-frame vectors to world."""
    c, s = np.cos(pitch), np.sin(pitch)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


def projected_gravity(pitch: np.ndarray) -> np.ndarray:
    """Unit gravity direction expressed in the base frame, (N, 2)."""
    return np.stack([-np.sin(pitch), -np.cos(pitch)], axis=-1)


def _arm_points_base(joint_pos: np.ndarray, cfg: SimConfig):
    """Shoulder/elbow/tip positions in the base frame for both arms.

    Returns (shoulders, elbows, tips), each (N, 2, 2): [:, arm, xy],
    arm 0 = left (shoulder at -offset), arm 1 = right (+offset).
    """
    l1, l2 = cfg.link_lengths
    n = joint_pos.shape[0]
    off = cfg.shoulder_offset
    shoulders = np.broadcast_to(np.array([[-off, 0.0], [off, 0.0]]), (n, 2, 2))
    qs = joint_pos[:, [0, 2]]
    qe = qs + joint_pos[:, [1, 3]]
    d1 = np.stack([np.sin(qs), -np.cos(qs)], -1)
    d2 = np.stack([np.sin(qe), -np.cos(qe)], -1)
    elbows = shoulders + l1 * d1
    tips = elbows + l2 * d2
    return shoulders, elbows, tips


def hand_positions_base(joint_pos: np.ndarray, cfg: SimConfig) -> np.ndarray:
    """Hand-tip positions in the base frame, (N, 2, 2) [:, left/right, xy]."""
    return _arm_points_base(joint_pos, cfg)[2]


def hand_positions_world(state: RobotState, cfg: SimConfig) -> np.ndarray:
    tips = hand_positions_base(state.joint_pos, cfg)
    r = rot(state.base_pitch)
    return state.base_pos[:, None, :] + np.einsum("nij,naj->nai", r, tips)


def hand_jacobians(state: RobotState, cfg: SimConfig) -> np.ndarray:
    """World-frame Jacobian of each hand tip w.r.t. its two joints, (N, 2, 2, 2).

    Indexing: [:, arm, xy, joint (shoulder, elbow)].
    """
    l1, l2 = cfg.link_lengths
    qs = state.joint_pos[:, [0, 2]]
    qe = qs + state.joint_pos[:, [1, 3]]
    # d/dq of (sin, -cos) is (cos, sin)
    g1 = np.stack([np.cos(qs), np.sin(qs)], -1)
    g2 = np.stack([np.cos(qe), np.sin(qe)], -1)
    j_sh = l1 * g1 + l2 * g2
    j_el = l2 * g2
    jac_base = np.stack([j_sh, j_el], -1)
    r = rot(state.base_pitch)
    return np.einsum("nij,najk->naik", r, jac_base)


def hand_velocities_world(state: RobotState, cfg: SimConfig) -> np.ndarray:
    tips_w = hand_positions_world(state, cfg)
    rel = tips_w - state.base_pos[:, None, :]
    spin = np.stack([-rel[..., 1], rel[..., 0]], -1) * state.base_ang_vel[:, None, None]
    jac = hand_jacobians(state, cfg)
    qdot = np.stack([state.joint_vel[:, [0, 1]], state.joint_vel[:, [2, 3]]], 1)
    arm_vel = np.einsum("naij,naj->nai", jac, qdot)
    return state.base_lin_vel[:, None, :] + spin + arm_vel


def pd_torque(state: RobotState, targets: np.ndarray, kp: float, kd: float,
              limit: float = 25.0) -> np.ndarray:
    """PD torque law tau = kp*(target - q) - kd*qdot, clamped to +-limit."""
    targets = np.asarray(targets, dtype=float)
    if not (np.all(np.isfinite(targets)) and np.all(np.isfinite(state.joint_pos))
            and np.all(np.isfinite(state.joint_vel))):
        raise ValueError("pd_torque requires finite joint state and targets")
    tau = kp * (targets - state.joint_pos) - kd * state.joint_vel
    return np.clip(tau, -limit, limit)


@dataclass
class ContactWrench:
    """One resolved contact: force on the object (or ground reaction) plus
    bookkeeping of where it acts."""

    kind: str                   # "hand_box", "box_ground", "hand_ground"
    env: int
    arm: int                    # hand index for hand contacts, corner index otherwise
    point: np.ndarray           # world contact point (2,)
    force: np.ndarray           # world force (2,) acting on the named body


def _point_box_penetration(p_local: np.ndarray, half: np.ndarray):
    """Depth and outward normal (box frame) for points inside a box; depth <= 0
    means no contact. p_local (..., 2), half (..., 2)."""
    dist = half - np.abs(p_local)          # (..., 2) positive inside
    inside = np.all(dist > 0, axis=-1)
    axis = np.argmin(dist, axis=-1)
    depth = np.where(inside, np.take_along_axis(dist, axis[..., None], -1)[..., 0], 0.0)
    sign = np.sign(np.take_along_axis(p_local, axis[..., None], -1)[..., 0])
    sign = np.where(sign == 0, 1.0, sign)
    normal = np.zeros(p_local.shape)
    np.put_along_axis(normal, axis[..., None], sign[..., None], -1)
    return depth, normal, inside


def contact_forces(robot: RobotState, obj: ObjectState, cfg: SimConfig):
    """Penalty contact wrenches for hand/box, box/ground and hand/ground pairs.

    Returns (wrenches, robot_force, robot_torque, joint_torque, obj_force,
    obj_torque) where the array outputs are batched accumulations ready for
    integration and `wrenches` is a flat list for inspection.
    """
    robot.validate()
    obj.validate()
    n = robot.base_pos.shape[0]
    k, c = cfg.contact_stiffness, cfg.contact_damping

    robot_force = np.zeros((n, 2))
    robot_torque = np.zeros(n)
    joint_torque = np.zeros((n, NUM_JOINTS))
    obj_force = np.zeros((n, 2))
    obj_torque = np.zeros(n)
    wrenches: list[ContactWrench] = []

    tips_w = hand_positions_world(robot, cfg)
    tip_vel = hand_velocities_world(robot, cfg)
    jac = hand_jacobians(robot, cfg)
    r_obj = rot(obj.pitch)

    # hand tips vs box faces
    rel = tips_w - obj.pos[:, None, :]
    p_local = np.einsum("nji,naj->nai", r_obj, rel)          # R^T * rel
    depth, n_local, inside = _point_box_penetration(p_local, obj.half_extents[:, None, :])
    n_world = np.einsum("nij,naj->nai", r_obj, n_local)
    box_pt_vel = obj.lin_vel[:, None, :] + np.stack(
        [-rel[..., 1], rel[..., 0]], -1) * obj.ang_vel[:, None, None]
    rel_vel = tip_vel - box_pt_vel
    v_n = np.einsum("nai,nai->na", rel_vel, n_world)
    # normal points outward through the nearest face; the hand is pushed along
    # +normal and the box receives the reaction along -normal
    f_n = np.where(inside, k * depth + c * np.maximum(0.0, -v_n) * (1.0 - obj.restitution[:, None]), 0.0)
    f_n = np.maximum(f_n, 0.0)
    t_world = np.stack([-n_world[..., 1], n_world[..., 0]], -1)
    v_t = np.einsum("nai,nai->na", rel_vel, t_world)
    f_t = np.clip(c * v_t, -obj.friction[:, None] * f_n, obj.friction[:, None] * f_n)
    f_hand_contact = f_n[..., None] * n_world - f_t[..., None] * t_world
    f_hand_contact = np.where(inside[..., None], f_hand_contact, 0.0)
    f_box = -f_hand_contact

    obj_force += f_box.sum(axis=1)
    obj_torque += cross2(rel, f_box).sum(axis=1)
    robot_force += f_hand_contact.sum(axis=1)
    rel_tip = tips_w - robot.base_pos[:, None, :]
    robot_torque += cross2(rel_tip, f_hand_contact).sum(axis=1)
    jt = np.einsum("naij,nai->naj", jac, f_hand_contact)     # J^T f per arm
    joint_torque[:, 0:2] += jt[:, 0]
    joint_torque[:, 2:4] += jt[:, 1]

    for env, arm in zip(*np.nonzero(inside)):
        wrenches.append(ContactWrench("hand_box", int(env), int(arm),
                                      tips_w[env, arm].copy(), f_box[env, arm].copy()))

    # box corners vs ground (z = 0)
    signs = np.array([[1, 1], [1, -1], [-1, 1], [-1, -1]], dtype=float)
    corners_local = signs[None, :, :] * obj.half_extents[:, None, :]
    corners_rel = np.einsum("nij,ncj->nci", r_obj, corners_local)
    corners_w = obj.pos[:, None, :] + corners_rel
    pen = -corners_w[..., 1]
    touching = pen > 0
    corner_vel = obj.lin_vel[:, None, :] + np.stack(
        [-corners_rel[..., 1], corners_rel[..., 0]], -1) * obj.ang_vel[:, None, None]
    vz = corner_vel[..., 1]
    fn_g = np.where(touching, k * pen + c * np.maximum(0.0, -vz) * (1.0 - obj.restitution[:, None]), 0.0)
    fn_g = np.maximum(fn_g, 0.0)
    mu_g = np.minimum(obj.friction, cfg.ground_friction)[:, None]
    ft_g = np.clip(-c * corner_vel[..., 0], -mu_g * fn_g, mu_g * fn_g)
    f_ground = np.stack([ft_g, fn_g], -1)
    f_ground = np.where(touching[..., None], f_ground, 0.0)
    obj_force += f_ground.sum(axis=1)
    obj_torque += cross2(corners_rel, f_ground).sum(axis=1)
    for env, corner in zip(*np.nonzero(touching)):
        wrenches.append(ContactWrench("box_ground", int(env), int(corner),
                                      corners_w[env, corner].copy(),
                                      f_ground[env, corner].copy()))

    # hand tips vs ground
    pen_h = -tips_w[..., 1]
    touch_h = pen_h > 0
    fn_h = np.maximum(np.where(touch_h, k * pen_h + c * np.maximum(0.0, -tip_vel[..., 1]), 0.0), 0.0)
    ft_h = np.clip(-c * tip_vel[..., 0], -cfg.ground_friction * fn_h, cfg.ground_friction * fn_h)
    f_hand = np.where(touch_h[..., None], np.stack([ft_h, fn_h], -1), 0.0)
    robot_force += f_hand.sum(axis=1)
    robot_torque += cross2(rel_tip, f_hand).sum(axis=1)
    jt_h = np.einsum("naij,nai->naj", jac, f_hand)
    joint_torque[:, 0:2] += jt_h[:, 0]
    joint_torque[:, 2:4] += jt_h[:, 1]
    for env, arm in zip(*np.nonzero(touch_h)):
        wrenches.append(ContactWrench("hand_ground", int(env), int(arm),
                                      tips_w[env, arm].copy(), f_hand[env, arm].copy()))

    return wrenches, robot_force, robot_torque, joint_torque, obj_force, obj_torque


def _gravity_joint_torque(robot: RobotState, cfg: SimConfig) -> np.ndarray:
    """Torque of link weights about each joint, world-frame lever arms."""
    l1, l2 = cfg.link_lengths
    m1, m2 = cfg.link_masses[0], cfg.link_masses[1]
    shoulders, elbows, tips = _arm_points_base(robot.joint_pos, cfg)
    r = rot(robot.base_pitch)
    sh_w = np.einsum("nij,naj->nai", r, shoulders)
    el_w = np.einsum("nij,naj->nai", r, elbows)
    tp_w = np.einsum("nij,naj->nai", r, tips)
    com1 = (sh_w + el_w) / 2
    com2 = (el_w + tp_w) / 2
    g = cfg.gravity
    # cross(r, (0, -mg)) = -r_x * m g
    tau_sh = -(com1[..., 0] - sh_w[..., 0]) * m1 * g - (com2[..., 0] - sh_w[..., 0]) * m2 * g
    tau_el = -(com2[..., 0] - el_w[..., 0]) * m2 * g
    out = np.zeros((robot.base_pos.shape[0], NUM_JOINTS))
    out[:, 0], out[:, 1] = tau_sh[:, 0], tau_el[:, 0]
    out[:, 2], out[:, 3] = tau_sh[:, 1], tau_el[:, 1]
    return out


def _gravity_base_torque(robot: RobotState, cfg: SimConfig) -> np.ndarray:
    """Pitch torque of the hanging arms' weight about the base origin."""
    m1, m2 = cfg.link_masses[0], cfg.link_masses[1]
    shoulders, elbows, tips = _arm_points_base(robot.joint_pos, cfg)
    r = rot(robot.base_pitch)
    sh_w = np.einsum("nij,naj->nai", r, shoulders)
    el_w = np.einsum("nij,naj->nai", r, elbows)
    tp_w = np.einsum("nij,naj->nai", r, tips)
    com1 = (sh_w + el_w) / 2
    com2 = (el_w + tp_w) / 2
    g = cfg.gravity
    return (-(com1[..., 0] * m1 + com2[..., 0] * m2) * g).sum(axis=1)


def step_physics(robot: RobotState, obj: ObjectState, action: Action,
                 cfg: SimConfig, ext_force: np.ndarray | None = None,
                 ext_torque: np.ndarray | None = None,
                 n_steps: int | None = None,
                 gravity_enabled: bool = True,
                 kp_scale: np.ndarray | None = None,
                 kd_scale: np.ndarray | None = None,
                 actuation_offset: np.ndarray | None = None,
                 payload: np.ndarray | None = None,
                 last_torque_out: np.ndarray | None = None):
    """Advance one PD period (pd_decimation physics substeps) of semi-implicit
    Euler. The PD torque is computed once from the state at entry and held,
    matching the 250 Hz physics / 50 Hz PD hierarchy.

    Returns (robot', obj', diverged_mask). Inputs are not mutated.
    """
    robot = robot.copy()
    obj = obj.copy()
    n = robot.base_pos.shape[0]
    if n_steps is None:
        n_steps = cfg.pd_decimation
    dt = cfg.physics_dt
    act = action.clamped(cfg)
    g = cfg.gravity if gravity_enabled else 0.0

    kp = cfg.kp * (np.asarray(kp_scale).reshape(-1, 1) if kp_scale is not None else 1.0)
    kd = cfg.kd * (np.asarray(kd_scale).reshape(-1, 1) if kd_scale is not None else 1.0)
    targets = act.joint_targets
    if actuation_offset is not None:
        targets = targets + actuation_offset
    tau_pd = np.clip(kp * (targets - robot.joint_pos) - kd * robot.joint_vel,
                     -cfg.torque_limit, cfg.torque_limit)
    if last_torque_out is not None:
        last_torque_out[...] = tau_pd

    mass = np.full(n, cfg.total_mass)
    if payload is not None:
        mass = mass + payload
    inertias = cfg.joint_inertias

    for _ in range(n_steps):
        (_, rf, rtq, jtq, of, otq) = contact_forces(robot, obj, cfg)

        base_force = act.base_wrench[:, :2] + rf
        base_force = base_force + np.stack([np.zeros(n), -mass * g], -1)
        if ext_force is not None:
            base_force = base_force + ext_force
        base_torque = act.base_wrench[:, 2] + rtq
        if gravity_enabled:
            base_torque = base_torque + _gravity_base_torque(robot, cfg)
        if ext_torque is not None:
            base_torque = base_torque + ext_torque

        robot.base_lin_vel = robot.base_lin_vel + dt * base_force / mass[:, None]
        robot.base_ang_vel = robot.base_ang_vel + dt * base_torque / cfg.base_inertia
        robot.base_pos = robot.base_pos + dt * robot.base_lin_vel
        robot.base_pitch = robot.base_pitch + dt * robot.base_ang_vel

        tau_joint = tau_pd + jtq
        if gravity_enabled:
            tau_joint = tau_joint + _gravity_joint_torque(robot, cfg)
        robot.joint_vel = robot.joint_vel + dt * tau_joint / inertias[None, :]
        robot.joint_pos = robot.joint_pos + dt * robot.joint_vel
        over = robot.joint_pos > JOINT_LIMIT
        under = robot.joint_pos < -JOINT_LIMIT
        robot.joint_pos = np.clip(robot.joint_pos, -JOINT_LIMIT, JOINT_LIMIT)
        robot.joint_vel = np.where(over | under, 0.0, robot.joint_vel)

        obj_grav = np.stack([np.zeros(n), -obj.mass * g], -1)
        obj.lin_vel = obj.lin_vel + dt * (of + obj_grav) / obj.mass[:, None]
        # com offset makes gravity exert a pitch torque about the geometric center
        r_off = np.einsum("nij,nj->ni", rot(obj.pitch), obj.com_offset)
        otq = otq + cross2(r_off, obj_grav)
        obj.ang_vel = obj.ang_vel + dt * otq / obj.inertia
        obj.pos = obj.pos + dt * obj.lin_vel
        obj.pitch = obj.pitch + dt * obj.ang_vel

    diverged = np.zeros(n, dtype=bool)
    for f in _ROBOT_FIELDS[:-1]:
        v = np.atleast_2d(np.abs(getattr(robot, f)).T).T.reshape(n, -1)
        diverged |= np.any(~np.isfinite(v) | (v > DIVERGENCE_LIMIT), axis=1)
    for f in ["pos", "pitch", "lin_vel", "ang_vel"]:
        v = np.atleast_2d(np.abs(getattr(obj, f)).T).T.reshape(n, -1)
        diverged |= np.any(~np.isfinite(v) | (v > DIVERGENCE_LIMIT), axis=1)
    robot.prev_action = act.flat()
    return robot, obj, diverged


def observe(robot: RobotState, cfg: SimConfig) -> np.ndarray:
    """Proprioceptive observation [q, qdot, omega, psi, hand tips (base frame),
    prev_action], shape (N, 22). Contains no absolute base position/velocity."""
    tips = hand_positions_base(robot.joint_pos, cfg).reshape(robot.base_pos.shape[0], 4)
    return np.concatenate([
        robot.joint_pos,
        robot.joint_vel,
        robot.base_ang_vel[:, None],
        projected_gravity(robot.base_pitch),
        tips,
        robot.prev_action,
    ], axis=1)


PROPRIO_DIM = NUM_JOINTS * 2 + 1 + 2 + 4 + ACTION_DIM  # 22
