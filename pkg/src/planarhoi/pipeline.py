"""Point-track ingestion: filtering, per-keypoint aggregation, smoothing, and
first-frame similarity calibration, plus a synthetic track generator used to
exercise the whole chain against known ground truth.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .motion import MotionClip, Keypoints, extract_keypoints

TRACK_LABELS = ("base", "left_hand", "right_hand", "object")
MAD_SCALE = 1.4826


class PipelineError(RuntimeError):
    pass


@dataclass
class PointTrack:
    label: str
    positions: np.ndarray     # (T, 3)
    visibility: np.ndarray    # (T,)
    confidence: np.ndarray    # (T,)

    def __post_init__(self):
        if self.label not in TRACK_LABELS:
            raise ValueError(f"unknown track label {self.label!r}")


@dataclass
class PointTrackSet:
    fps: float
    tracks: list

    def __post_init__(self):
        lengths = {t.positions.shape[0] for t in self.tracks}
        if len(lengths) > 1:
            raise ValueError("all tracks must share the same length")

    @property
    def n_frames(self) -> int:
        return self.tracks[0].positions.shape[0] if self.tracks else 0

    def labels(self) -> list:
        return sorted({t.label for t in self.tracks},
                      key=TRACK_LABELS.index)

    def by_label(self, label: str) -> list:
        return [t for t in self.tracks if t.label == label]

    def to_json_dict(self) -> dict:
        return {"fps": self.fps, "tracks": [
            {"label": t.label, "positions": t.positions.tolist(),
             "visibility": t.visibility.tolist(),
             "confidence": t.confidence.tolist()} for t in self.tracks]}

    @staticmethod
    def from_json_dict(d: dict) -> "PointTrackSet":
        return PointTrackSet(float(d["fps"]), [
            PointTrack(t["label"], np.asarray(t["positions"], dtype=float),
                       np.asarray(t["visibility"], dtype=float),
                       np.asarray(t["confidence"], dtype=float))
            for t in d["tracks"]])

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh)

    @staticmethod
    def load(path) -> "PointTrackSet":
        with open(path) as fh:
            return PointTrackSet.from_json_dict(json.load(fh))


@dataclass
class KeypointTrajectory:
    label: str
    positions: np.ndarray     # (T, 3)
    valid_count: np.ndarray   # (T,)


@dataclass
class CalibrationTransform:
    scale: float
    rotation: np.ndarray      # (d, d) orthonormal
    translation: np.ndarray   # (d,)
    rmse: float = 0.0

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * points @ self.rotation.T + self.translation


@dataclass
class FilterParams:
    v_min: float = 0.5
    c_min: float = 0.5
    mad_k: float = 3.0
    v_max: float = 3.0        # m/s frame-to-frame velocity gate
    max_empty_fraction: float = 0.2


def filter_points(track_set: PointTrackSet,
                  params: FilterParams | None = None) -> PointTrackSet:
    """Visibility/confidence gate, then per-label per-frame MAD outlier gate,
    then a frame-to-frame velocity gate. The spatial/temporal gates iterate to
    a fixed point so the whole operation is idempotent. Dropped samples are
    marked by zeroing visibility and confidence.
    """
    params = params or FilterParams()
    fps = track_set.fps
    valid = {}
    for i, t in enumerate(track_set.tracks):
        valid[i] = (t.visibility >= params.v_min) & (t.confidence >= params.c_min)

    by_label = {}
    for i, t in enumerate(track_set.tracks):
        by_label.setdefault(t.label, []).append(i)

    changed = True
    while changed:
        changed = False
        # coordinate-wise median / scaled-MAD gate per label per frame
        for label, ids in by_label.items():
            pos = np.stack([track_set.tracks[i].positions for i in ids])  # (P,T,3)
            mask = np.stack([valid[i] for i in ids])                      # (P,T)
            pos_m = np.where(mask[..., None], pos, np.nan)
            with np.errstate(all="ignore"), warnings.catch_warnings():
                # frames with zero survivors yield all-NaN slices here; they
                # are caught by the empty-fraction check after the fixpoint
                warnings.simplefilter("ignore", RuntimeWarning)
                med = np.nanmedian(pos_m, axis=0)                         # (T,3)
                mad = np.nanmedian(np.abs(pos_m - med), axis=0) * MAD_SCALE
            thresh = np.maximum(params.mad_k * mad, 1e-12)
            dist_ok = np.all(np.abs(pos - med) <= thresh, axis=-1) | \
                (np.nansum(mask, axis=0) <= 2)
            for j, i in enumerate(ids):
                new = valid[i] & dist_ok[j]
                if not np.array_equal(new, valid[i]):
                    valid[i] = new
                    changed = True
        # velocity gate between consecutive valid samples of each track
        for i, t in enumerate(track_set.tracks):
            idx = np.nonzero(valid[i])[0]
            if len(idx) < 2:
                continue
            disp = np.linalg.norm(np.diff(t.positions[idx], axis=0), axis=1)
            dt = np.diff(idx) / fps
            bad = disp > params.v_max * dt
            if np.any(bad):
                drop = idx[1:][bad]
                valid[i][drop] = False
                changed = True

    out_tracks = []
    for i, t in enumerate(track_set.tracks):
        vis = np.where(valid[i], t.visibility, 0.0)
        conf = np.where(valid[i], t.confidence, 0.0)
        out_tracks.append(PointTrack(t.label, t.positions.copy(), vis, conf))
    out = PointTrackSet(fps, out_tracks)

    for label, ids in by_label.items():
        counts = np.sum(np.stack([valid[i] for i in ids]), axis=0)
        empty_frac = np.mean(counts == 0)
        if empty_frac > params.max_empty_fraction:
            raise PipelineError(
                f"label {label!r} has no surviving points on "
                f"{empty_frac:.0%} of frames")
    return out


def aggregate(track_set: PointTrackSet, label: str,
              v_min: float = 0.5, c_min: float = 0.5) -> KeypointTrajectory:
    """Per-frame centroid of surviving points; empty interior frames are filled
    by linear interpolation. No extrapolation: first/last frames must survive."""
    tracks = track_set.by_label(label)
    if not tracks:
        raise PipelineError(f"label {label!r} not present")
    pos = np.stack([t.positions for t in tracks])                 # (P,T,3)
    mask = np.stack([(t.visibility >= v_min) & (t.confidence >= c_min)
                     for t in tracks])                            # (P,T)
    counts = mask.sum(axis=0)
    if counts[0] == 0 or counts[-1] == 0:
        raise PipelineError(
            f"label {label!r} has no surviving points on the first or last frame")
    sums = np.where(mask[..., None], pos, 0.0).sum(axis=0)
    centroid = np.where(counts[:, None] > 0, sums / np.maximum(counts, 1)[:, None], np.nan)
    empty = counts == 0
    if np.any(empty):
        t_idx = np.arange(len(counts))
        for d in range(centroid.shape[1]):
            centroid[empty, d] = np.interp(t_idx[empty], t_idx[~empty],
                                           centroid[~empty, d])
    return KeypointTrajectory(label, centroid, counts)


def smooth(traj: KeypointTrajectory, window: int = 5) -> KeypointTrajectory:
    """Zero-phase centered moving average; the window shrinks symmetrically at
    the boundaries so constant and linear signals pass through unchanged."""
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be odd and >= 1")
    half = window // 2
    pos = traj.positions
    n = pos.shape[0]
    out = np.empty_like(pos)
    for t in range(n):
        h = min(half, t, n - 1 - t)
        out[t] = pos[t - h:t + h + 1].mean(axis=0)
    return KeypointTrajectory(traj.label, out, traj.valid_count.copy())


def calibrate(keypoints: dict, anchors: dict) -> CalibrationTransform:
    """Least-squares similarity transform (Umeyama alignment) mapping first-frame
    keypoints onto metric anchors: minimizes sum ||s R p + t - g||^2."""
    labels = sorted(set(keypoints) & set(anchors))
    if len(labels) < 3:
        raise PipelineError("calibration needs at least 3 corresponding labels")
    p = np.array([keypoints[k] for k in labels], dtype=float)
    g = np.array([anchors[k] for k in labels], dtype=float)
    if p.shape != g.shape:
        raise PipelineError("keypoint/anchor dimensionality mismatch")
    d = p.shape[1]

    mu_p = p.mean(axis=0)
    mu_g = g.mean(axis=0)
    dp = p - mu_p
    dg = g - mu_g
    cov = dg.T @ dp / len(labels)
    u, sv, vt = np.linalg.svd(cov)
    # collinearity: similarity transform needs rank >= d-1 spread
    spread = np.linalg.svd(dp, compute_uv=False)
    if spread[min(1, d - 1)] < 1e-9 * max(spread[0], 1e-30):
        raise PipelineError(
            f"degenerate (collinear) anchors; singular values {spread.tolist()}")
    s_mat = np.eye(d)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s_mat[-1, -1] = -1.0
    rotation = u @ s_mat @ vt
    var_p = (dp ** 2).sum() / len(labels)
    scale = float((sv * np.diag(s_mat)).sum() / var_p)
    if scale <= 0:
        raise PipelineError("recovered non-positive scale")
    translation = mu_g - scale * rotation @ mu_p
    tf = CalibrationTransform(scale, rotation, translation)
    rmse = float(np.sqrt(np.mean(np.sum((tf.apply(p) - g) ** 2, axis=1))))
    tf.rmse = rmse
    return tf


@dataclass
class NoiseModel:
    scatter_radius: float = 0.03      # fixed per-point offset around the keypoint
    jitter_std: float = 0.01          # per-frame gaussian jitter
    dropout_rate: float = 0.1         # frames marked invisible
    outlier_rate: float = 0.05        # frames teleported far away
    outlier_scale: float = 1.0
    distortion_scale: float = 1.0     # global similarity distortion
    distortion_rot: float = 0.0       # rotation about the out-of-plane axis
    distortion_offset: tuple = (0.0, 0.0, 0.0)

    @staticmethod
    def noiseless() -> "NoiseModel":
        return NoiseModel(0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, (0.0, 0.0, 0.0))


def _distortion_transform(noise: NoiseModel) -> CalibrationTransform:
    a = noise.distortion_rot
    rotation = np.array([[np.cos(a), 0.0, -np.sin(a)],
                         [0.0, 1.0, 0.0],
                         [np.sin(a), 0.0, np.cos(a)]])
    return CalibrationTransform(noise.distortion_scale, rotation,
                                np.asarray(noise.distortion_offset, dtype=float))


def synth_tracks(clip: MotionClip, points_per_label: int = 12,
                 noise: NoiseModel | None = None, seed: int = 0,
                 include_object: bool | None = None):
    """Scatter labeled point tracks around the clip's true keypoints, apply a
    global similarity distortion plus per-point noise.

    Returns (PointTrackSet, ground_truth) where ground_truth carries the true
    3D keypoint trajectories per label and the applied distortion transform.
    """
    noise = noise if noise is not None else NoiseModel()
    rng = np.random.default_rng(seed)
    kps = extract_keypoints(clip)
    if include_object is None:
        include_object = clip.object_track is not None

    def to3d(xy):
        return np.stack([xy[:, 0], np.zeros(len(xy)), xy[:, 1]], axis=1)

    truth = {"base": to3d(kps.base), "left_hand": to3d(kps.left_hand),
             "right_hand": to3d(kps.right_hand)}
    if include_object:
        if clip.object_track is None:
            raise ValueError("clip has no object track")
        truth["object"] = to3d(clip.object_track.pos)

    tf = _distortion_transform(noise)
    tracks = []
    for label, true_pos in truth.items():
        t_len = true_pos.shape[0]
        for _ in range(points_per_label):
            offset = rng.normal(0.0, 1.0, 3)
            norm = np.linalg.norm(offset)
            offset = offset / max(norm, 1e-12) * rng.uniform(0.0, noise.scatter_radius)
            pos = true_pos + offset
            pos = tf.apply(pos)
            pos = pos + rng.normal(0.0, noise.jitter_std, pos.shape)
            visibility = np.ones(t_len)
            confidence = rng.uniform(0.75, 1.0, t_len)
            drop = rng.uniform(size=t_len) < noise.dropout_rate
            visibility[drop] = rng.uniform(0.0, 0.4, drop.sum())
            outl = rng.uniform(size=t_len) < noise.outlier_rate
            pos[outl] += rng.normal(0.0, noise.outlier_scale, (outl.sum(), 3))
            tracks.append(PointTrack(label, pos, visibility, confidence))
    ground_truth = {"keypoints": truth, "transform": tf}
    return PointTrackSet(clip.fps, tracks), ground_truth


def extract_references(track_set: PointTrackSet, anchors: dict,
                       filter_params: FilterParams | None = None,
                       smooth_window: int = 5):
    """Full chain: filter -> aggregate -> smooth -> calibrate -> apply.

    `anchors` maps labels to metric first-frame positions (the mocap stand-in).
    Returns (trajectories, transform): calibrated 3D trajectories per label.
    """
    filtered = filter_points(track_set, filter_params)
    trajs = {}
    for label in filtered.labels():
        trajs[label] = smooth(aggregate(filtered, label), smooth_window)
    first = {label: trajs[label].positions[0] for label in trajs}
    usable = {k: v for k, v in anchors.items() if k in first}
    tf = calibrate({k: first[k] for k in usable}, usable)
    calibrated = {label: KeypointTrajectory(label, tf.apply(t.positions),
                                            t.valid_count)
                  for label, t in trajs.items()}
    return calibrated, tf
