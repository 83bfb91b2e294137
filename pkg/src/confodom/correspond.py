"""Nearest-neighbour correspondences between ``P_t`` and the transformed source ``P'_t``,
and closed-form per-pair confidences."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .cloud import NNIndex, PointCloud

MIN_CONFIDENCE = 1e-3
DEFAULT_GAMMA = 1e-3
DEFAULT_MAX_DIST = 2.0
DEFAULT_EPSILON = 0.1


class EmptyCorrespondenceError(ValueError):
    """No correspondence survived distance gating."""


@dataclass(frozen=True)
class CorrespondenceSet:
    """Pairs ``(x_t^i, x'_t^j)`` with ``j = M(i)``, stored column-wise.

    ``n_target`` is ``|P_t|``, the normalizer shared by every loss.
    """

    tgt_index: np.ndarray
    src_index: np.ndarray
    euclid_dist: np.ndarray
    range_diff: np.ndarray
    cos_angle: np.ndarray
    confidence: np.ndarray
    n_target: int

    def __len__(self) -> int:
        return len(self.tgt_index)

    @property
    def is_empty(self) -> bool:
        return len(self) == 0

    def subset(self, mask) -> CorrespondenceSet:
        return CorrespondenceSet(
            self.tgt_index[mask],
            self.src_index[mask],
            self.euclid_dist[mask],
            self.range_diff[mask],
            self.cos_angle[mask],
            self.confidence[mask],
            self.n_target,
        )

    def with_confidence(self, confidence: np.ndarray) -> CorrespondenceSet:
        confidence = np.asarray(confidence, dtype=np.float64)
        if confidence.shape != self.tgt_index.shape:
            raise ValueError("confidence length does not match the pair count")
        return replace(self, confidence=confidence)

    def confidence_summary(self) -> tuple[float, float, float]:
        if self.is_empty:
            return (float("nan"),) * 3
        c = self.confidence
        return float(c.min()), float(c.mean()), float(c.max())


def pair_geometry(target_pts: np.ndarray, source_pts: np.ndarray):
    """Euclidean distance, range difference ``r(x) - r(x')`` and ray cosine for matched rows."""
    r_t = np.linalg.norm(target_pts, axis=1)
    r_s = np.linalg.norm(source_pts, axis=1)
    euclid = np.linalg.norm(target_pts - source_pts, axis=1)
    cos = np.einsum("nd,nd->n", target_pts, source_pts) / (r_t * r_s)
    return euclid, r_t - r_s, np.clip(cos, -1.0, 1.0)


def associate(
    target: PointCloud,
    transformed_src: PointCloud,
    max_dist: float = DEFAULT_MAX_DIST,
    index: NNIndex | None = None,
    strict: bool = False,
) -> CorrespondenceSet:
    """Match every target point to its nearest neighbour in ``transformed_src``.

    Pairs farther apart than ``max_dist`` are dropped and confidences start at 1.
    ``index`` may be passed when an index over ``transformed_src`` already exists.
    An empty result is returned as a set with no pairs; with ``strict=True`` it
    raises :class:`EmptyCorrespondenceError` instead.
    """
    if max_dist <= 0:
        raise ValueError("max_dist must be positive")
    if len(target) == 0 or len(transformed_src) == 0:
        if strict:
            raise EmptyCorrespondenceError("cannot associate an empty cloud")
        return _empty(len(target))
    index = index or NNIndex(transformed_src.positions)
    dist, src_idx = index.query(target.positions, k=1, max_dist=max_dist)
    keep = dist <= max_dist
    tgt_idx = np.flatnonzero(keep)
    src_idx = src_idx[keep]
    if strict and len(tgt_idx) == 0:
        raise EmptyCorrespondenceError(f"no pair within max_dist={max_dist}")
    euclid, rdiff, cos = pair_geometry(target.positions[tgt_idx], transformed_src.positions[src_idx])
    return CorrespondenceSet(tgt_idx, src_idx, euclid, rdiff, cos, np.ones(len(tgt_idx)), len(target))


def _empty(n_target: int) -> CorrespondenceSet:
    z = np.zeros(0)
    zi = np.zeros(0, dtype=np.int64)
    return CorrespondenceSet(zi, zi.copy(), z, z.copy(), z.copy(), z.copy(), n_target)


def optimal_confidence(range_diff, gamma: float, m_min: float = MIN_CONFIDENCE) -> np.ndarray:
    """argmin over m in [m_min, 1] of ``m d^2 - gamma log m``, i.e. ``clamp(gamma / d^2)``."""
    d2 = np.square(np.asarray(range_diff, dtype=np.float64))
    with np.errstate(divide="ignore"):
        m = np.where(d2 > 0, gamma / np.where(d2 > 0, d2, 1.0), 1.0)
    return np.clip(m, m_min, 1.0)


def pair_range_objective(m, range_diff, gamma: float):
    return m * np.square(range_diff) - gamma * np.log(m)


def solve_confidences(cs: CorrespondenceSet, gamma: float = DEFAULT_GAMMA, m_min: float = MIN_CONFIDENCE):
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    return cs.with_confidence(optimal_confidence(cs.range_diff, gamma, m_min))


def uniform_confidences(cs: CorrespondenceSet, gamma: float = DEFAULT_GAMMA, m_min: float = MIN_CONFIDENCE):
    """Confidence provider for runs with confidence weighting switched off."""
    return cs.with_confidence(np.ones(len(cs)))


def icp_weights(cs: CorrespondenceSet, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """``M^ij / max M + epsilon`` for every pair."""
    if cs.is_empty:
        raise EmptyCorrespondenceError("icp_weights needs at least one pair")
    return cs.confidence / cs.confidence.max() + epsilon
