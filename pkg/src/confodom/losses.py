"""Self-supervised ego-motion losses and their gradients with respect to the pose.

Every pose gradient is taken with respect to the 7-vector
``(qw, qx, qy, qz, tx, ty, tz)`` of :attr:`Pose.params`, at the pose's unit
quaternion and with the rotation defined as ``R(q / |q|)`` (so the radial
quaternion component is zero). Correspondences and confidences are held fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cloud import PointCloud
from .correspond import CorrespondenceSet, EmptyCorrespondenceError
from .se3 import Pose, rotation_jacobian


@dataclass(frozen=True)
class LossWeights:
    w1: float = 100.0
    w2: float = 1.0
    w3: float = 1.0
    w4: float = 1.0
    gamma: float = 1e-3
    flow_layer_weights: tuple = (1.0,)

    def __post_init__(self):
        ws = (self.w1, self.w2, self.w3, self.w4, *self.flow_layer_weights)
        if not all(math.isfinite(w) and w >= 0 for w in ws):
            raise ValueError(f"loss weights must be finite and non-negative: {ws}")
        if not (math.isfinite(self.gamma) and self.gamma > 0):
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        object.__setattr__(self, "flow_layer_weights", tuple(float(w) for w in self.flow_layer_weights))


@dataclass
class UncertaintyParam:
    """The learnable log-variance ``s`` of ``u_s(l) = exp(-s) l + s``."""

    s: float = 0.0


def _s(s) -> float:
    return float(s.s if isinstance(s, UncertaintyParam) else s)


def uncertainty(s, l):
    s = _s(s)
    return math.exp(-s) * l + s


def uncertainty_grad_s(s, l):
    s = _s(s)
    return 1.0 - math.exp(-s) * l


@dataclass(frozen=True)
class LossReport:
    l_sr: float
    l_ra: float
    l_tr: float
    l_fs: float
    total: float
    pair_count: int

    CSV_HEADER = ("frame_pair_id", "l_sr", "l_ra", "l_tr", "l_fs", "total", "pair_count")

    def csv_row(self, frame_pair_id) -> list:
        return [frame_pair_id, *(repr(float(v)) for v in (self.l_sr, self.l_ra, self.l_tr, self.l_fs, self.total)),
                self.pair_count]


def composite_loss(l_sr, l_ra, l_tr, l_fs, weights: LossWeights, pair_count: int = 0) -> LossReport:
    total = weights.w1 * l_sr + weights.w2 * l_ra + weights.w3 * l_tr + weights.w4 * l_fs
    return LossReport(float(l_sr), float(l_ra), float(l_tr), float(l_fs), float(total), int(pair_count))


def pose_gradient(pose: Pose, source_pts: np.ndarray, grad_xp: np.ndarray) -> np.ndarray:
    """Chain ``dL/dx'`` (per transformed point ``x' = R x + t``) to the 7 pose parameters."""
    G = grad_xp.T @ source_pts
    dR = rotation_jacobian(pose.quat)
    return np.concatenate([np.einsum("kab,ab->k", dR, G), grad_xp.sum(axis=0)])


def _matched(cs: CorrespondenceSet, target: PointCloud, source: PointCloud, pose: Pose | None):
    if cs.is_empty:
        raise EmptyCorrespondenceError("loss needs at least one correspondence")
    pose = pose or Pose.identity()
    a = target.positions[cs.tgt_index]
    x = source.positions[cs.src_index]
    return pose, a, x, pose.apply(x)


def spherical_loss(cs, target, source, pose=None, use_confidence=True):
    """Negative confidence-weighted mean ray cosine, normalized by ``|P_t|``.

    ``source`` is the untransformed previous sweep and ``pose`` the current
    prediction; returns ``(value, gradient)``.
    """
    pose, a, x, b = _matched(cs, target, source, pose)
    m = cs.confidence if use_confidence else np.ones(len(cs))
    ra = np.linalg.norm(a, axis=1)
    rb = np.linalg.norm(b, axis=1)
    cos = np.einsum("nd,nd->n", a, b) / (ra * rb)
    value = -np.sum(m * cos) / cs.n_target
    dcos = a / (ra * rb)[:, None] - (cos / rb**2)[:, None] * b
    grad_b = -(m / cs.n_target)[:, None] * dcos
    return float(value), pose_gradient(pose, x, grad_b)


def range_alignment_loss(cs, target, source, pose=None, gamma=1e-3):
    """Confidence-weighted squared range difference plus the ``-gamma log M`` barrier."""
    pose, a, x, b = _matched(cs, target, source, pose)
    m = cs.confidence
    ra = np.linalg.norm(a, axis=1)
    rb = np.linalg.norm(b, axis=1)
    diff = ra - rb
    value = np.sum(m * diff**2 - gamma * np.log(m)) / cs.n_target
    grad_b = (-2.0 * m * diff / (rb * cs.n_target))[:, None] * b
    return float(value), pose_gradient(pose, x, grad_b)


def euclidean_loss(cs, target, source, pose=None):
    """Mean squared pair distance (the Euclidean ablation baseline)."""
    pose, a, x, b = _matched(cs, target, source, pose)
    d = b - a
    value = np.mean(np.sum(d**2, axis=1))
    return float(value), pose_gradient(pose, x, 2.0 * d / len(cs))


def transformation_residual_loss(pred: Pose, rectified: Pose, s_alpha=0.0, s_beta=0.0):
    """``u_alpha(|t* - t|^2) + u_beta(|R* - R|_F^2)`` with the rectified pose as a constant target.

    Returns ``(value, pose_gradient, (d/ds_alpha, d/ds_beta))``.
    """
    sa, sb = _s(s_alpha), _s(s_beta)
    dt = rectified.translation - pred.translation
    dR = rectified.rotation - pred.rotation
    lt = float(dt @ dt)
    lr = float(np.sum(dR**2))
    value = uncertainty(sa, lt) + uncertainty(sb, lr)
    grad_R = -2.0 * math.exp(-sb) * dR
    grad = np.concatenate(
        [np.einsum("kab,ab->k", rotation_jacobian(pred.quat), grad_R), -2.0 * math.exp(-sa) * dt]
    )
    return value, grad, np.array([uncertainty_grad_s(sa, lt), uncertainty_grad_s(sb, lr)])


def rigid_flow(points: np.ndarray, pose: Pose) -> np.ndarray:
    """Per-point flow ``x_t - x_{t-1}`` implied by ``x_t = R x_{t-1} + t``, i.e. ``(I - R)^T x + R^T t``."""
    R = pose.rotation
    points = np.asarray(points, dtype=np.float64)
    return points - points @ R + R.T @ pose.translation


def flow_target(points, rectified: Pose) -> np.ndarray:
    pts = points.positions if isinstance(points, PointCloud) else points
    return rigid_flow(pts, rectified)


def flow_supervision_loss(predicted_flows, targets, layer_weights, s_alpha=0.0) -> float:
    """``sum_h w_h * mean_i u_alpha(|F_pred - F*|^2)`` over flow layers."""
    if isinstance(layer_weights, LossWeights):
        layer_weights = layer_weights.flow_layer_weights
    if not (len(predicted_flows) == len(targets) == len(layer_weights)):
        raise ValueError(
            f"layer count mismatch: {len(predicted_flows)} predictions, {len(targets)} targets, "
            f"{len(layer_weights)} weights"
        )
    total = 0.0
    for h, (pred, tgt, w) in enumerate(zip(predicted_flows, targets, layer_weights)):
        pred = np.asarray(pred, dtype=np.float64)
        tgt = np.asarray(tgt, dtype=np.float64)
        if pred.shape != tgt.shape or pred.ndim != 2 or pred.shape[1] != 3:
            raise ValueError(f"layer {h}: prediction {pred.shape} vs target {tgt.shape}")
        if len(pred) == 0:
            continue
        err = np.sum((pred - tgt) ** 2, axis=1)
        total += w * np.mean(uncertainty(s_alpha, err))
    return float(total)


def rigid_flow_supervision(points: np.ndarray, pred: Pose, rectified: Pose, layer_weights=(1.0,), s_alpha=0.0):
    """Flow supervision where every layer's prediction is the rigid flow of ``pred``.

    Returns ``(value, pose_gradient, d/ds_alpha)``.
    """
    sa = _s(s_alpha)
    w = float(sum(layer_weights))
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) == 0 or w == 0.0:
        return 0.0, np.zeros(7), 0.0
    R = pred.rotation
    diff = rigid_flow(pts, pred) - flow_target(pts, rectified)
    err = float(np.mean(np.sum(diff**2, axis=1)))
    scale = w * math.exp(-sa)
    # diff = R^T (t - x) + const
    rel = pred.translation - pts
    grad_R = scale * 2.0 * (rel.T @ diff) / len(pts)
    grad_t = scale * 2.0 * R @ diff.mean(axis=0)
    grad = np.concatenate([np.einsum("kab,ab->k", rotation_jacobian(pred.quat), grad_R), grad_t])
    return w * uncertainty(sa, err), grad, w * uncertainty_grad_s(sa, err)
