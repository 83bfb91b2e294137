"""KITTI odometry drift: segment-based translational and rotational relative error."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .se3 import Pose, rotation_angle

KITTI_LENGTHS = (100, 200, 300, 400, 500, 600, 700, 800)


@dataclass(frozen=True)
class Trajectory:
    """Absolute sensor poses, one per frame (sensor-to-first-frame)."""

    poses: tuple

    def __post_init__(self):
        object.__setattr__(self, "poses", tuple(self.poses))

    def __len__(self) -> int:
        return len(self.poses)

    def __getitem__(self, i):
        return self.poses[i]

    def __iter__(self):
        return iter(self.poses)

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)

    def relative_to_first(self) -> Trajectory:
        first_inv = self.poses[0].inverse()
        return Trajectory(first_inv.compose(p) for p in self.poses)


@dataclass(frozen=True)
class DriftResult:
    """``t_rel`` in percent and ``r_rel`` in degrees per 100 m.

    ``per_length`` maps each segment length to ``(t_rel, r_rel, n_segments)``;
    lengths with no valid segment are left out. ``empty`` is set when no
    length had a segment at all.
    """

    t_rel: float
    r_rel: float
    per_length: dict = field(default_factory=dict)
    empty: bool = False

    def rows(self):
        for length, (t, r, count) in sorted(self.per_length.items()):
            yield length, t, r, count


def path_length(traj) -> np.ndarray:
    pos = traj.positions if isinstance(traj, Trajectory) else np.asarray(traj, dtype=np.float64)
    if len(pos) == 0:
        raise ValueError("path_length needs at least one pose")
    steps = np.linalg.norm(np.diff(pos, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def last_frame_from_segment_length(dist: np.ndarray, first: int, length: float) -> int:
    """First frame ``j`` with ``dist[j] >= dist[first] + length``, or -1."""
    j = int(np.searchsorted(dist, dist[first] + length, side="left"))
    j = max(j, first)
    return j if j < len(dist) else -1


def segment_errors(est, gt, lengths=KITTI_LENGTHS, stride: int = 1) -> DriftResult:
    """Average relative errors ``(dP_est)^-1 dP_gt`` over segments of each length.

    Errors are normalized by the nominal segment length, averaged per length,
    then averaged across the lengths that have at least one segment.
    """
    est = est if isinstance(est, Trajectory) else Trajectory(est)
    gt = gt if isinstance(gt, Trajectory) else Trajectory(gt)
    if len(est) != len(gt):
        raise ValueError(f"trajectory length mismatch: {len(est)} estimated vs {len(gt)} ground-truth poses")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    dist = path_length(gt)
    per_length = {}
    for length in lengths:
        t_errs, r_errs = [], []
        for first in range(0, len(gt), stride):
            last = last_frame_from_segment_length(dist, first, length)
            if last < 0:
                continue
            d_gt = gt[first].inverse().compose(gt[last])
            d_est = est[first].inverse().compose(est[last])
            err = d_est.inverse().compose(d_gt)
            t_errs.append(np.linalg.norm(err.translation) / length)
            r_errs.append(rotation_angle(err) / length)
        if t_errs:
            per_length[length] = (
                float(np.mean(t_errs) * 100.0),
                float(np.degrees(np.mean(r_errs)) * 100.0),
                len(t_errs),
            )
    if not per_length:
        return DriftResult(0.0, 0.0, {}, empty=True)
    t_rel = float(np.mean([v[0] for v in per_length.values()]))
    r_rel = float(np.mean([v[1] for v in per_length.values()]))
    return DriftResult(t_rel, r_rel, per_length)


def pairwise_errors(est, gt):
    """Per-step relative translation (m) and rotation (rad) errors between consecutive frames."""
    est = est if isinstance(est, Trajectory) else Trajectory(est)
    gt = gt if isinstance(gt, Trajectory) else Trajectory(gt)
    if len(est) != len(gt):
        raise ValueError("trajectory length mismatch")
    t_err, r_err = [], []
    for k in range(1, len(gt)):
        d_gt = gt[k - 1].inverse().compose(gt[k])
        d_est = est[k - 1].inverse().compose(est[k])
        err = d_est.inverse().compose(d_gt)
        t_err.append(float(np.linalg.norm(err.translation)))
        r_err.append(rotation_angle(err))
    return np.array(t_err), np.array(r_err)
