"""Evaluation: success criterion, tracking-error/naturalness metrics, and the
batch episode runner.

Evaluation episodes run in a perturbed physics configuration (contact
stiffness +20 %, physics step halved) so the numbers measure transfer rather
than engine memorization. Success requires every relevant per-step error to
stay below the threshold at every step AND no termination.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .adaptor import AdaptorPolicy, load_adaptor
from .bfm import BfmPolicy, load_bfm
from .envs import TrackingWorld, WorldConfig
from .motion import MotionClip
from .sim import SimConfig, hand_positions_world
from .stack import ControlStack
from .tracker import TrackerPolicy, load_tracker

SUCCESS_THRESHOLD = 0.2        # m, all relevant errors at all times

CSV_COLUMNS = ["task", "method", "SR", "E_obj", "E_obj_f", "E_hands",
               "E_hands_f", "E_base", "E_base_f", "E_mpjae", "A_rate",
               "A_smooth", "episodes"]


def perturbed_sim_config(base: SimConfig | None = None) -> SimConfig:
    """Sim2sim stand-in: stiffer contacts on a finer integration grid, same
    50 Hz PD rate."""
    base = base or SimConfig()
    return replace(base,
                   physics_dt=base.physics_dt / 2.0,
                   pd_decimation=base.pd_decimation * 2,
                   contact_stiffness=base.contact_stiffness * 1.2)


@dataclass
class EpisodeRecord:
    """One evaluation episode sampled at 50 Hz; arrays share a leading T axis."""

    base_pos: np.ndarray                 # (T, 2)
    hands: np.ndarray                    # (T, 2, 2) world [left, right]
    joint_pos: np.ndarray                # (T, 4)
    actions: np.ndarray                  # (T, A) normalized actions
    ref_base_pos: np.ndarray             # (T, 2)
    ref_hands: np.ndarray                # (T, 2, 2)
    ref_joint_pos: np.ndarray | None     # (T, 4) dense reference if available
    terminated: bool = False
    obj_pos: np.ndarray | None = None    # (T, 2)
    ref_obj_pos: np.ndarray | None = None

    def __post_init__(self):
        t = self.base_pos.shape[0]
        for name in ("hands", "joint_pos", "actions", "ref_base_pos",
                     "ref_hands", "ref_joint_pos", "obj_pos", "ref_obj_pos"):
            arr = getattr(self, name)
            if arr is not None and arr.shape[0] != t:
                raise ValueError(f"episode field {name} misaligned: "
                                 f"{arr.shape[0]} != {t}")

    @property
    def has_object(self) -> bool:
        return self.obj_pos is not None and self.ref_obj_pos is not None


def _base_errors(ep: EpisodeRecord) -> np.ndarray:
    return np.linalg.norm(ep.base_pos - ep.ref_base_pos, axis=1)


def _hand_errors(ep: EpisodeRecord) -> np.ndarray:
    """(T, 2) per-hand distances."""
    return np.linalg.norm(ep.hands - ep.ref_hands, axis=2)


def _obj_errors(ep: EpisodeRecord) -> np.ndarray:
    return np.linalg.norm(ep.obj_pos - ep.ref_obj_pos, axis=1)


def success(ep: EpisodeRecord, threshold: float = SUCCESS_THRESHOLD) -> bool:
    """True iff every relevant error stays under the threshold at every step
    and the episode never terminated. Object error is relevant only for
    episodes carrying an object reference."""
    if ep.terminated:
        return False
    errs = [_base_errors(ep), _hand_errors(ep).ravel()]
    if ep.has_object:
        errs.append(_obj_errors(ep))
    return bool(all(np.all(e < threshold) for e in errs))


def tracking_errors(ep: EpisodeRecord) -> dict:
    """Time-mean and final-frame Euclidean errors, in cm. Hands are averaged
    across both hands before time-averaging."""
    hand = _hand_errors(ep).mean(axis=1)
    base = _base_errors(ep)
    out = {
        "E_hands": float(hand.mean() * 100.0),
        "E_hands_f": float(hand[-1] * 100.0),
        "E_base": float(base.mean() * 100.0),
        "E_base_f": float(base[-1] * 100.0),
        "E_obj": float("nan"), "E_obj_f": float("nan"),
    }
    if ep.has_object:
        obj = _obj_errors(ep)
        out["E_obj"] = float(obj.mean() * 100.0)
        out["E_obj_f"] = float(obj[-1] * 100.0)
    return out


def naturalness(ep: EpisodeRecord) -> dict:
    """Joint-angle error against the dense reference plus first/second action
    difference magnitudes (per-step norms, averaged)."""
    out = {}
    if ep.ref_joint_pos is not None:
        out["E_mpjae"] = float(np.abs(ep.joint_pos - ep.ref_joint_pos).mean())
    else:
        out["E_mpjae"] = float("nan")
    a = ep.actions
    if a.shape[0] >= 2:
        out["A_rate"] = float(np.linalg.norm(np.diff(a, axis=0), axis=1).mean())
    else:
        out["A_rate"] = 0.0
    if a.shape[0] >= 3:
        second = a[2:] - 2.0 * a[1:-1] + a[:-2]
        out["A_smooth"] = float(np.linalg.norm(second, axis=1).mean())
    else:
        out["A_smooth"] = 0.0
    return out


@dataclass
class MetricsReport:
    task: str
    method: str
    episodes: int
    sr: float | None                 # None when no episodes were run
    means: dict = field(default_factory=dict)

    def row(self) -> dict:
        row = {"task": self.task, "method": self.method,
               "SR": "" if self.sr is None else f"{self.sr:.6f}",
               "episodes": self.episodes}
        for k in ("E_obj", "E_obj_f", "E_hands", "E_hands_f", "E_base",
                  "E_base_f", "E_mpjae", "A_rate", "A_smooth"):
            v = self.means.get(k, float("nan"))
            row[k] = "" if np.isnan(v) else f"{v:.6f}"
        return row


class EvalRefusal(RuntimeError):
    """Raised for checkpoint/task mismatches (e.g. object task, no adaptor)."""


def run_episodes(clips: list, stack_builder, n_episodes: int, seed: int,
                 episode_seconds: float = 8.0,
                 sim_config: SimConfig | None = None,
                 replay_path=None) -> list[EpisodeRecord]:
    """Roll each of `n_episodes` environments once through its clip with the
    deterministic policy stack; returns one EpisodeRecord per episode."""
    if n_episodes <= 0:
        return []
    wc = WorldConfig(stage=1, n_envs=n_episodes,
                     episode_seconds=episode_seconds,
                     random_start=False, sequential_clips=True)
    if sim_config is not None:
        wc.sim = sim_config
    world = TrackingWorld(clips, wc, seed=seed)
    stack = stack_builder(n_episodes)
    n = n_episodes

    frames = {k: [] for k in ("base_pos", "hands", "joint_pos", "actions",
                              "ref_base", "ref_hands", "ref_joint",
                              "obj", "ref_obj")}
    term_flags = np.zeros(n, dtype=bool)
    done_at = np.full(n, -1, dtype=int)
    step_count = [0]

    def recorder(w: TrackingWorld) -> None:
        fr = w.ref_frame()
        kp = w.ref_keypoints_now(noisy=False)
        ref_obj, _, _ = w.ref_object_now()
        frames["base_pos"].append(w.robot.base_pos.copy())
        frames["hands"].append(hand_positions_world(w.robot, w.sim))
        frames["joint_pos"].append(w.robot.joint_pos.copy())
        frames["actions"].append(w.norm_action.copy())
        frames["ref_base"].append(fr[:, 0:2])
        frames["ref_hands"].append(kp[:, 2:6].reshape(n, 2, 2))
        frames["ref_joint"].append(fr[:, 3:7])
        frames["obj"].append(w.obj.pos.copy())
        frames["ref_obj"].append(ref_obj)
        step_count[0] += 1

    replay_fh = open(replay_path, "w") if replay_path else None
    max_macro = int(np.ceil(episode_seconds * world.fps
                            / world.sim.highlevel_decimation)) + 2
    try:
        for macro in range(max_macro):
            res = stack.step_10hz(world, recorder=recorder)
            newly = (done_at < 0) & res.done
            done_at[newly] = step_count[0]
            term_flags |= res.terminated & newly
            if replay_fh is not None:
                for i in range(n):
                    rec = {"macro_step": macro, "env": i,
                           "robot": {
                               "base_pos": world.robot.base_pos[i].tolist(),
                               "base_pitch": float(world.robot.base_pitch[i]),
                               "base_lin_vel": world.robot.base_lin_vel[i].tolist(),
                               "base_ang_vel": float(world.robot.base_ang_vel[i]),
                               "joint_pos": world.robot.joint_pos[i].tolist(),
                               "joint_vel": world.robot.joint_vel[i].tolist()},
                           "object": {
                               "pos": world.obj.pos[i].tolist(),
                               "pitch": float(world.obj.pitch[i]),
                               "lin_vel": world.obj.lin_vel[i].tolist(),
                               "ang_vel": float(world.obj.ang_vel[i])},
                           "done": bool(done_at[i] >= 0)}
                    replay_fh.write(json.dumps(rec) + "\n")
            if np.all(done_at >= 0):
                break
    finally:
        if replay_fh is not None:
            replay_fh.close()

    stacked = {k: np.stack(v) for k, v in frames.items()}      # (T, N, ...)
    episodes = []
    for i in range(n):
        t_end = done_at[i] if done_at[i] >= 0 else step_count[0]
        sl = slice(0, max(t_end, 1))
        clip = clips[i % len(clips)]
        has_obj = clip.object_track is not None
        episodes.append(EpisodeRecord(
            base_pos=stacked["base_pos"][sl, i],
            hands=stacked["hands"][sl, i],
            joint_pos=stacked["joint_pos"][sl, i],
            actions=stacked["actions"][sl, i],
            ref_base_pos=stacked["ref_base"][sl, i],
            ref_hands=stacked["ref_hands"][sl, i],
            ref_joint_pos=stacked["ref_joint"][sl, i],
            terminated=bool(term_flags[i]),
            obj_pos=stacked["obj"][sl, i] if has_obj else None,
            ref_obj_pos=stacked["ref_obj"][sl, i] if has_obj else None,
        ))
    return episodes


def summarize(episodes: list, task: str, method: str,
              threshold: float = SUCCESS_THRESHOLD) -> MetricsReport:
    if not episodes:
        return MetricsReport(task=task, method=method, episodes=0, sr=None)
    rows = []
    for ep in episodes:
        m = {}
        m.update(tracking_errors(ep))
        m.update(naturalness(ep))
        m["success"] = float(success(ep, threshold))
        rows.append(m)
    keys = [k for k in rows[0] if k != "success"]
    means = {}
    for k in keys:
        vals = np.asarray([r[k] for r in rows], dtype=float)
        means[k] = float(np.nanmean(vals)) if np.any(np.isfinite(vals)) \
            else float("nan")
    sr = float(np.mean([r["success"] for r in rows]))
    return MetricsReport(task=task, method=method, episodes=len(episodes),
                         sr=sr, means=means)


def run_eval(bfm_path, clips: list, tracker_path=None, adaptor_path=None,
             n_episodes: int = 8, seed: int = 0, episode_seconds: float = 8.0,
             force_no_adaptor: bool = False, perturbed: bool = True,
             out_csv=None, replay_path=None,
             task: str | None = None) -> MetricsReport:
    """Batch evaluation of a checkpointed stack on `clips`.

    Object clips require an adaptor checkpoint unless force_no_adaptor is set
    (the degradation baseline). Fixed seed -> byte-identical CSV.
    """
    has_object = any(c.object_track is not None for c in clips)
    if has_object and adaptor_path is None and not force_no_adaptor:
        raise EvalRefusal(
            "object-interaction clips need an adaptor checkpoint "
            "(pass force_no_adaptor=True to evaluate the bare tracker)")

    bfm, _ = load_bfm(bfm_path)
    trk = load_tracker(tracker_path)[0] if tracker_path else None
    ada = load_adaptor(adaptor_path)[0] \
        if (adaptor_path and not force_no_adaptor) else None

    def builder(n):
        return ControlStack(bfm, tracker=trk, adaptor=ada, n_envs=n,
                            noisy_keypoints=False)

    sim_cfg = perturbed_sim_config() if perturbed else None
    episodes = run_episodes(clips, builder, n_episodes, seed,
                            episode_seconds=episode_seconds,
                            sim_config=sim_cfg, replay_path=replay_path)
    if task is None:
        task = "+".join(sorted({c.task_tag for c in clips}))
    method = "full" if ada is not None else \
        ("no-adaptor" if trk is not None else "bfm-only")
    report = summarize(episodes, task=task, method=method)
    if out_csv is not None:
        write_metrics_csv(out_csv, [report])
    return report


def write_metrics_csv(path, reports: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for rep in reports:
            writer.writerow(rep.row())
