"""Confidence-weighted point-to-plane ICP giving the transformation residual and rectified pose."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .cloud import PointCloud
from .correspond import (
    DEFAULT_EPSILON,
    DEFAULT_GAMMA,
    DEFAULT_MAX_DIST,
    EmptyCorrespondenceError,
    associate,
    icp_weights,
    solve_confidences,
)
from .se3 import Pose

log = logging.getLogger(__name__)

MAX_CONDITION = 1e8
MIN_PAIRS = 6


class DegenerateGeometryError(RuntimeError):
    """The weighted normal equations are rank deficient or too ill-conditioned."""

    def __init__(self, message: str, *, iteration: int, usable_pairs: int, condition: float = float("nan")):
        super().__init__(f"{message} (iteration {iteration}, {usable_pairs} usable pairs, cond={condition:.3g})")
        self.iteration = iteration
        self.usable_pairs = usable_pairs
        self.condition = condition


@dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 20
    translation_tol: float = 1e-4
    rotation_tol: float = 1e-4
    epsilon: float = DEFAULT_EPSILON
    max_dist: float = DEFAULT_MAX_DIST

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.translation_tol <= 0 or self.rotation_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_dist <= 0:
            raise ValueError("max_dist must be positive")


@dataclass(frozen=True)
class IcpResult:
    delta: Pose
    iterations_used: int
    final_objective: float
    converged: bool
    objective_history: tuple = field(default=(), repr=False)


def point_to_plane_residual(target_point, source_point, target_normal) -> float:
    """Signed distance ``n . (x' - x)`` of ``source_point`` from the target's tangent plane."""
    n = np.asarray(target_normal, dtype=np.float64)
    if not np.any(n):
        raise ValueError("point-to-plane residual undefined for a zero normal")
    return float(n @ (np.asarray(source_point, dtype=np.float64) - np.asarray(target_point, dtype=np.float64)))


def weighted_objective(weights, residuals, n_target: int) -> float:
    """``(1/|P_t|) sum w r^2``."""
    return float(np.sum(weights * residuals**2) / max(n_target, 1))


def default_confidences(gamma: float = DEFAULT_GAMMA):
    return lambda cs: solve_confidences(cs, gamma)


def icp_refine(
    target: PointCloud,
    transformed_src: PointCloud,
    cfg: IcpConfig = IcpConfig(),
    confidences=None,
) -> IcpResult:
    """Estimate the residual ``delta`` that maps ``transformed_src`` onto ``target``.

    ``confidences`` maps a fresh :class:`CorrespondenceSet` to one with
    confidences filled in; by default they are solved in closed form with
    gamma = 1e-3. Target normals drive the point-to-plane residual; pairs
    whose target normal is the zero sentinel are skipped.
    """
    if len(target) == 0 or len(transformed_src) == 0:
        raise EmptyCorrespondenceError("ICP needs two non-empty clouds")
    confidences = confidences or default_confidences()
    tgt_pts = target.positions
    tgt_normals = target.normals
    usable_target = target.has_normal

    delta = Pose.identity()
    history = []
    converged = False
    current = transformed_src
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        cs = associate(target, current, cfg.max_dist)
        if cs.is_empty:
            raise EmptyCorrespondenceError(f"ICP iteration {it}: no correspondences within {cfg.max_dist} m")
        cs = cs.subset(usable_target[cs.tgt_index])
        if len(cs) < MIN_PAIRS:
            raise DegenerateGeometryError("too few usable pairs", iteration=it, usable_pairs=len(cs))
        cs = confidences(cs)
        w = icp_weights(cs, cfg.epsilon)

        x = tgt_pts[cs.tgt_index]
        n = tgt_normals[cs.tgt_index]
        xp = current.positions[cs.src_index]
        r = np.einsum("nd,nd->n", n, xp - x)
        history.append(weighted_objective(w, r, cs.n_target))

        # r(xi) ~ r + [x' x n, n] . (omega, dt)
        J = np.hstack([np.cross(xp, n), n])
        H = (J * w[:, None]).T @ J
        g = (J * w[:, None]).T @ r
        xi = _solve_spd(H, -g, it, len(cs))

        step = Pose.from_rotvec(xi[:3], xi[3:])
        delta = step.compose(delta)
        current = transformed_src.transformed(delta)
        if np.linalg.norm(xi[3:]) < cfg.translation_tol and np.linalg.norm(xi[:3]) < cfg.rotation_tol:
            converged = True
            break

    increases = sum(b > a * (1 + 1e-12) + 1e-15 for a, b in zip(history, history[1:]))
    if increases:
        log.debug("ICP objective increased on %d of %d iterations", increases, len(history) - 1)
    return IcpResult(delta, it, history[-1], converged, tuple(history))


def _solve_spd(H: np.ndarray, b: np.ndarray, iteration: int, usable: int) -> np.ndarray:
    eig = np.linalg.eigvalsh(H)
    cond = float(eig[-1] / eig[0]) if eig[0] > 0 else float("inf")
    if not cond <= MAX_CONDITION:
        raise DegenerateGeometryError("ill-conditioned point-to-plane system", iteration=iteration,
                                      usable_pairs=usable, condition=cond)
    L = np.linalg.cholesky(H)
    return np.linalg.solve(L.T, np.linalg.solve(L, b))


def rectify(pred: Pose, delta: Pose) -> Pose:
    """``R* = dR R_pred``, ``t* = dR t_pred + dt``."""
    return delta.compose(pred)
