"""Command-line entry point: one command, subcommands for data generation,
the three training stages, trajectory extraction, synthetic tracks,
evaluation, and replay.

Exit codes: 0 success; 2 configuration/schema errors; 3 missing upstream
checkpoint; 1 anything else. Failures emit one machine-readable JSON object on
stderr. The I2R_SEED environment variable overrides any configured seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .adaptor import train_adaptor
from .bfm import train_bfm
from .config import ConfigError, RunConfig
from .envs import WorldConfig
from .evaluate import EvalRefusal, run_eval, write_metrics_csv
from .motion import MotionClip, extract_keypoints, generate_clip, save_keypoints
from .pipeline import (FilterParams, NoiseModel, PipelineError, PointTrackSet,
                       extract_references, synth_tracks)
from .tracker import train_tracker

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_MISSING_CHECKPOINT = 3

DEFAULT_TASK_SEEDS = {"walk": 11, "reach": 12, "carry": 13, "push": 14}


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": {"kind": kind,
                                           "message": message}}) + "\n")
    return code


def _resolve_seed(args, config: RunConfig | None) -> int:
    env = os.environ.get("I2R_SEED")
    if env is not None:
        return int(env)
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    return config.seed if config is not None else 0


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        return RunConfig.load(args.config)
    return RunConfig()


def _default_clips(tasks, seed_offset: int = 0) -> list:
    clips = []
    for task in tasks:
        clips.append(generate_clip(
            task, 6.0, seed=DEFAULT_TASK_SEEDS[task] + seed_offset))
    return clips


def _dataset_clips(config: RunConfig, out_dir: str, tasks=None) -> list:
    """Clips from the config's dataset paths (resolved against out_dir), or
    deterministic procedural defaults when the dataset is empty."""
    if config.dataset:
        clips = []
        for rel in config.dataset:
            path = rel if os.path.isabs(rel) else os.path.join(out_dir, rel)
            clips.append(MotionClip.load(path))
    else:
        clips = _default_clips(tasks or ("walk", "reach"))
    if tasks is not None:
        filtered = [c for c in clips if c.task_tag in tasks]
        if filtered:
            clips = filtered
    return clips


def _checkpoint_or_exit(path: str, what: str):
    if not (os.path.exists(path + ".npz") and os.path.exists(path + ".json")):
        raise FileNotFoundError(f"{what} checkpoint missing at {path}")


def cmd_gen_data(args) -> int:
    config = _load_config(args)
    seed = _resolve_seed(args, config)
    out = args.out or config.out_dir
    data_dir = os.path.join(out, "data")
    os.makedirs(data_dir, exist_ok=True)
    tasks = args.tasks.split(",") if args.tasks else list(DEFAULT_TASK_SEEDS)
    written = []
    for task in tasks:
        clip = generate_clip(task, args.duration,
                             seed=DEFAULT_TASK_SEEDS[task] + seed)
        clip_path = os.path.join(data_dir, f"{task}.json")
        clip.save(clip_path)
        kp_path = os.path.join(data_dir, f"{task}_keypoints.json")
        save_keypoints(extract_keypoints(clip), clip.fps, kp_path)
        written.extend([clip_path, kp_path])
    print(json.dumps({"written": written}))
    return EXIT_OK


def _world_config(config: RunConfig, stage: int, train_cfg) -> WorldConfig:
    return WorldConfig(stage=stage, n_envs=train_cfg.n_envs,
                       episode_seconds=train_cfg.episode_seconds,
                       keypoint_noise_std=getattr(train_cfg,
                                                  "keypoint_noise_std", 0.0),
                       sim=config.sim, rand=config.rand)


def cmd_train_bfm(args) -> int:
    config = _load_config(args)
    seed = _resolve_seed(args, config)
    out = args.out or config.out_dir
    stage_dir = os.path.join(out, "bfm")
    clips = _dataset_clips(config, out)
    init = None
    if args.resume and os.path.exists(os.path.join(stage_dir, "bfm.npz")):
        init = os.path.join(stage_dir, "bfm")
    train_bfm(clips, config.bfm, seed, stage_dir,
              world_config=_world_config(config, 1, config.bfm),
              init_path=init)
    print(json.dumps({"checkpoint": os.path.join(stage_dir, "bfm")}))
    return EXIT_OK


def cmd_train_tracker(args) -> int:
    config = _load_config(args)
    seed = _resolve_seed(args, config)
    out = args.out or config.out_dir
    bfm_path = args.bfm or os.path.join(out, "bfm", "bfm")
    _checkpoint_or_exit(bfm_path, "stage-1")
    stage_dir = os.path.join(out, "tracker")
    clips = _dataset_clips(config, out, tasks=("walk", "reach"))
    init = None
    if args.resume and os.path.exists(os.path.join(stage_dir, "tracker.npz")):
        init = os.path.join(stage_dir, "tracker")
    train_tracker(bfm_path, clips, config.tracker, seed, stage_dir,
                  world_config=_world_config(config, 2, config.tracker),
                  init_path=init)
    print(json.dumps({"checkpoint": os.path.join(stage_dir, "tracker")}))
    return EXIT_OK


def cmd_train_adaptor(args) -> int:
    config = _load_config(args)
    seed = _resolve_seed(args, config)
    out = args.out or config.out_dir
    bfm_path = args.bfm or os.path.join(out, "bfm", "bfm")
    tracker_path = args.tracker or os.path.join(out, "tracker", "tracker")
    _checkpoint_or_exit(bfm_path, "stage-1")
    _checkpoint_or_exit(tracker_path, "stage-2")
    stage_dir = os.path.join(out, "adaptor")
    if config.dataset:
        clips = [c for c in _dataset_clips(config, out)
                 if c.object_track is not None]
    else:
        clips = _default_clips(("carry", "push"))
    if not clips:
        raise ConfigError("adaptor training needs clips with object tracks")
    init = None
    if args.resume and os.path.exists(os.path.join(stage_dir, "adaptor.npz")):
        init = os.path.join(stage_dir, "adaptor")
    train_adaptor(bfm_path, tracker_path, clips, config.adaptor, seed,
                  stage_dir,
                  world_config=_world_config(config, 3, config.adaptor),
                  init_path=init)
    print(json.dumps({"checkpoint": os.path.join(stage_dir, "adaptor")}))
    return EXIT_OK


def cmd_synth_tracks(args) -> int:
    seed = _resolve_seed(args, None)
    clip = MotionClip.load(args.clip)
    if args.noise_profile in ("default", None):
        noise = NoiseModel()
    elif args.noise_profile == "noiseless":
        noise = NoiseModel.noiseless()
    else:
        with open(args.noise_profile) as fh:
            d = json.load(fh)
        allowed = {f.name for f in dataclasses.fields(NoiseModel)}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown noise-profile keys: {sorted(unknown)}")
        if "distortion_offset" in d:
            d["distortion_offset"] = tuple(d["distortion_offset"])
        noise = NoiseModel(**d)
    tracks, truth = synth_tracks(clip, noise=noise, seed=seed)
    tracks.save(args.out)
    if args.truth_out:
        tf = truth["transform"]
        with open(args.truth_out, "w") as fh:
            json.dump({
                "keypoints": {k: v.tolist()
                              for k, v in truth["keypoints"].items()},
                "transform": {"scale": tf.scale,
                              "rotation": tf.rotation.tolist(),
                              "translation": tf.translation.tolist()},
                "anchors": {k: v[0].tolist()
                            for k, v in truth["keypoints"].items()},
            }, fh)
    print(json.dumps({"tracks": args.out}))
    return EXIT_OK


def cmd_extract_traj(args) -> int:
    tracks = PointTrackSet.load(args.tracks)
    with open(args.calibration_anchors) as fh:
        anchors_doc = json.load(fh)
    anchors = {k: np.asarray(v, dtype=float)
               for k, v in anchors_doc.get("anchors", anchors_doc).items()}
    trajs, tf = extract_references(tracks, anchors)
    with open(args.out, "w") as fh:
        json.dump({
            "fps": tracks.fps,
            "trajectories": {
                label: {"positions": t.positions.tolist(),
                        "valid_count": t.valid_count.tolist()}
                for label, t in trajs.items()},
            "transform": {"scale": tf.scale,
                          "rotation": tf.rotation.tolist(),
                          "translation": tf.translation.tolist(),
                          "rmse": tf.rmse},
        }, fh)
    print(json.dumps({"trajectories": args.out}))
    return EXIT_OK


def cmd_eval(args) -> int:
    config = _load_config(args)
    seed = _resolve_seed(args, config)
    stack_dir = args.stack
    bfm_path = os.path.join(stack_dir, "bfm", "bfm")
    _checkpoint_or_exit(bfm_path, "stage-1")
    tracker_path = os.path.join(stack_dir, "tracker", "tracker")
    if not os.path.exists(tracker_path + ".npz"):
        tracker_path = None
    adaptor_path = os.path.join(stack_dir, "adaptor", "adaptor")
    if not os.path.exists(adaptor_path + ".npz"):
        adaptor_path = None
    tasks = args.tasks.split(",") if args.tasks else ["walk"]
    for t in tasks:
        if t not in DEFAULT_TASK_SEEDS:
            raise ConfigError(f"unknown task {t!r}")
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    if args.episodes == 0:
        write_metrics_csv(os.path.join(out, "metrics.csv"), [])
        print(json.dumps({"episodes": 0, "note": "empty report"}))
        return EXIT_OK
    reports = []
    for t in tasks:
        clips = _dataset_clips(config, out, tasks=(t,)) \
            if config.dataset else _default_clips((t,))
        rep = run_eval(bfm_path, clips, tracker_path=tracker_path,
                       adaptor_path=adaptor_path, n_episodes=args.episodes,
                       seed=seed, force_no_adaptor=args.force_no_adaptor,
                       replay_path=args.replay_log, task=t)
        reports.append(rep)
    write_metrics_csv(os.path.join(out, "metrics.csv"), reports)
    print(json.dumps({"metrics": os.path.join(out, "metrics.csv"),
                      "SR": {r.task: r.sr for r in reports}}))
    return EXIT_OK


def cmd_replay(args) -> int:
    required = {"macro_step", "env", "robot", "object", "done"}
    with open(args.episode_log) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            missing = required - set(rec)
            if missing:
                raise ValueError(
                    f"replay record {lineno} missing fields {sorted(missing)}")
            sys.stdout.write(json.dumps(rec, sort_keys=True) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="planarhoi")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, seed=True, out=True, resume=False):
        if config:
            sp.add_argument("--config")
        if seed:
            sp.add_argument("--seed", type=int)
        if out:
            sp.add_argument("--out")
        if resume:
            sp.add_argument("--resume", action="store_true")

    sp = sub.add_parser("gen-data")
    common(sp)
    sp.add_argument("--tasks")
    sp.add_argument("--duration", type=float, default=6.0)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train-bfm")
    common(sp, resume=True)
    sp.set_defaults(func=cmd_train_bfm)

    sp = sub.add_parser("train-tracker")
    common(sp, resume=True)
    sp.add_argument("--bfm")
    sp.set_defaults(func=cmd_train_tracker)

    sp = sub.add_parser("train-adaptor")
    common(sp, resume=True)
    sp.add_argument("--bfm")
    sp.add_argument("--tracker")
    sp.set_defaults(func=cmd_train_adaptor)

    sp = sub.add_parser("synth-tracks")
    common(sp, config=False, out=False)
    sp.add_argument("--clip", required=True)
    sp.add_argument("--noise-profile", default="default")
    sp.add_argument("--out", required=True)
    sp.add_argument("--truth-out")
    sp.set_defaults(func=cmd_synth_tracks)

    sp = sub.add_parser("extract-traj")
    common(sp, config=False, seed=False, out=False)
    sp.add_argument("--tracks", required=True)
    sp.add_argument("--calibration-anchors", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_extract_traj)

    sp = sub.add_parser("eval")
    common(sp)
    sp.add_argument("--stack", required=True)
    sp.add_argument("--tasks")
    sp.add_argument("--episodes", type=int, default=4)
    sp.add_argument("--force-no-adaptor", action="store_true")
    sp.add_argument("--replay-log")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("replay")
    common(sp, config=False, seed=False, out=False)
    sp.add_argument("--episode-log", required=True)
    sp.set_defaults(func=cmd_replay)

    return p


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or EXIT_CONFIG)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))
    except FileNotFoundError as exc:
        msg = str(exc)
        if "checkpoint" in msg:
            return _fail(EXIT_MISSING_CHECKPOINT, "missing-checkpoint", msg)
        return _fail(EXIT_ERROR, "missing-file", msg)
    except (EvalRefusal, PipelineError) as exc:
        return _fail(EXIT_ERROR, type(exc).__name__, str(exc))
    except (ValueError, RuntimeError, json.JSONDecodeError) as exc:
        return _fail(EXIT_ERROR, type(exc).__name__, str(exc))


def main() -> None:
    sys.exit(dispatch())
