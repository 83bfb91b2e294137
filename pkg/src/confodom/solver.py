"""Per-pair ego-motion estimation by descending the composite self-supervised loss.

Each outer iteration transforms the previous sweep by the current estimate,
associates it with the current sweep, runs confidence-weighted ICP to get the
rectified pose, and then takes one backtracking descent step on

    w1 L_sr + w2 L_ra + w3 L_tr + w4 L_fs

over the pose parameters and the two uncertainty parameters. Pose steps are
scaled by the Gauss-Newton curvature of the loss terms and uncertainty steps
by their exact (one-dimensional) curvature; the uncertainty parameters are
kept inside ``[-s_bound, s_bound]`` since ``exp(-s) l + s`` has no lower bound
as the residual ``l`` vanishes.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .cloud import PointCloud
from .correspond import EmptyCorrespondenceError, associate, solve_confidences, uniform_confidences
from .evaluation import Trajectory
from .icp import DegenerateGeometryError, IcpConfig, icp_refine, rectify
from .losses import (
    LossReport,
    LossWeights,
    composite_loss,
    euclidean_loss,
    range_alignment_loss,
    rigid_flow_supervision,
    spherical_loss,
    transformation_residual_loss,
)
from .se3 import Pose, rotation_jacobian

log = logging.getLogger(__name__)

INIT_MODES = ("identity", "constant_velocity")
REPROJECTION_TERMS = ("spherical", "euclidean")


@dataclass(frozen=True)
class SolverConfig:
    max_outer_iterations: int = 30
    step_size: float = 1.0
    convergence_tol: float = 1e-6
    weights: LossWeights = field(default_factory=LossWeights)
    icp: IcpConfig = field(default_factory=IcpConfig)
    init_mode: str = "identity"
    use_confidence: bool = True
    reprojection: str = "spherical"
    s_step_size: float = 1.0
    s_bound: float = 5.0
    max_halvings: int = 12
    #: association gate (m) after the first outer iteration; None keeps icp.max_dist
    refine_max_dist: float | None = 0.5
    damping: float = 1e-9
    #: re-solve (k-2, k) and flag links whose chained estimate is off by more than skip_pair_tol (m)
    skip_pair_check: bool = False
    skip_pair_tol: float = 0.05

    def __post_init__(self):
        if self.max_outer_iterations < 1:
            raise ValueError("max_outer_iterations must be >= 1")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.init_mode not in INIT_MODES:
            raise ValueError(f"init_mode must be one of {INIT_MODES}, got {self.init_mode!r}")
        if self.reprojection not in REPROJECTION_TERMS:
            raise ValueError(f"reprojection must be one of {REPROJECTION_TERMS}, got {self.reprojection!r}")


@dataclass(frozen=True)
class PairEstimate:
    pose: Pose
    report: LossReport
    rectified: Pose
    confidence_summary: tuple
    outer_iterations: int
    converged: bool = False
    flags: tuple = ()
    s_alpha: float = 0.0
    s_beta: float = 0.0


@dataclass
class _Problem:
    """Everything held fixed during one outer iteration."""

    target: PointCloud
    source: PointCloud
    cs: object
    rectified: Pose | None
    weights: LossWeights
    cfg: SolverConfig

    def evaluate(self, params, s):
        pose = Pose.from_params(params)
        w = self.weights
        cfg = self.cfg
        grad = np.zeros(7)
        grad_s = np.zeros(2)
        # d2/ds2 of w * u_s(l) is w * exp(-s) l = w - w * du/ds
        hess_s = np.zeros(2)
        if cfg.reprojection == "spherical":
            l_sr, g = spherical_loss(self.cs, self.target, self.source, pose, cfg.use_confidence)
        else:
            l_sr, g = euclidean_loss(self.cs, self.target, self.source, pose)
        grad += w.w1 * g
        l_ra, g = range_alignment_loss(self.cs, self.target, self.source, pose, w.gamma)
        grad += w.w2 * g
        l_tr = l_fs = 0.0
        if self.rectified is not None:
            if w.w3:
                l_tr, g, gs = transformation_residual_loss(pose, self.rectified, s[0], s[1])
                grad += w.w3 * g
                grad_s += w.w3 * gs
                hess_s += w.w3 * (1.0 - gs)
            if w.w4:
                l_fs, g, gs_a = rigid_flow_supervision(
                    self.target.positions, pose, self.rectified, w.flow_layer_weights, s[0]
                )
                grad += w.w4 * g
                grad_s[0] += w.w4 * gs_a
                hess_s[0] += w.w4 * (sum(w.flow_layer_weights) - gs_a)
        report = composite_loss(l_sr, l_ra, l_tr, l_fs, w, len(self.cs))
        return report, grad, grad_s, hess_s

    def curvature(self, params, s):
        """Gauss-Newton approximation of the pose Hessian of the composite."""
        pose = Pose.from_params(params)
        w = self.weights
        cs = self.cs
        dR = rotation_jacobian(pose.quat)
        x = self.source.positions[cs.src_index]
        xp = pose.apply(x)
        m = cs.confidence
        n = cs.n_target
        if self.cfg.reprojection == "spherical":
            m_sr = m if self.cfg.use_confidence else np.ones(len(cs))
            h = w.w1 * m_sr / (n * np.sum(xp**2, axis=1))
        else:
            h = np.full(len(cs), 2.0 * w.w1 / len(cs))
        h = h + w.w2 * 2.0 * m / n
        H = _pair_gauss_newton(dR, x, h)
        if self.rectified is not None:
            ea, eb = math.exp(-s[0]), math.exp(-s[1])
            if w.w3:
                H[:4, :4] += 2.0 * w.w3 * eb * np.einsum("kab,lab->kl", dR, dR)
                H[4:, 4:] += 2.0 * w.w3 * ea * np.eye(3)
            wf = w.w4 * sum(w.flow_layer_weights)
            if wf and len(self.target):
                rel = pose.translation - self.target.positions
                # residual R^T (t - x): d/dq_k = dR_k^T rel, d/dt = R^T
                Jq = np.einsum("kab,na->nkb", dR, rel, optimize=True)
                S = 2.0 * wf * ea / len(rel)
                H[:4, :4] += S * np.tensordot(Jq, Jq, axes=([0, 2], [0, 2]))
                H[:4, 4:] += S * Jq.sum(axis=0) @ pose.rotation.T
                H[4:, :4] = H[:4, 4:].T
                H[4:, 4:] += S * len(rel) * np.eye(3)
        return H


def _pair_gauss_newton(dR, x, h):
    """``sum_i h_i J_i^T J_i`` with ``J_i = [dR_k x_i | I]``."""
    Jq = np.einsum("kab,nb->nak", dR, x, optimize=True)  # (n, 3, 4)
    hJ = Jq * h[:, None, None]
    H = np.zeros((7, 7))
    H[:4, :4] = np.tensordot(hJ, Jq, axes=([0, 1], [0, 1]))
    H[:4, 4:] = hJ.sum(axis=0).T
    H[4:, :4] = H[:4, 4:].T
    H[4:, 4:] = h.sum() * np.eye(3)
    return H


def _precondition(H, q, grad, damping):
    # the radial quaternion direction is a null direction of every term
    scale = max(np.trace(H) / 7.0, 1e-12)
    A = H + scale * (np.pad(np.outer(q, q), ((0, 3), (0, 3))) + damping * np.eye(7))
    try:
        return np.linalg.solve(A, grad)
    except np.linalg.LinAlgError:
        return grad / scale


def _failed(init: Pose, weights: LossWeights, flags) -> PairEstimate:
    nan3 = (float("nan"),) * 3
    return PairEstimate(init, composite_loss(0.0, 0.0, 0.0, 0.0, weights, 0), init, nan3, 0, False, tuple(flags))


def estimate_pair(prev: PointCloud, curr: PointCloud, init: Pose = None, cfg: SolverConfig = SolverConfig(),
                  s_init=(0.0, 0.0)) -> PairEstimate:
    """Estimate ``(R, t)`` with ``x_curr = R x_prev + t``.

    Both clouds should already be downsampled and carry normals. Returns the
    iterate with the lowest composite loss seen.
    """
    init = Pose.identity() if init is None else init
    if len(prev) == 0 or len(curr) == 0:
        return _failed(init, cfg.weights, ["empty_sweep"])
    provider = solve_confidences if cfg.use_confidence else uniform_confidences
    gamma = cfg.weights.gamma

    params = init.params
    s = np.clip(np.asarray(s_init, dtype=np.float64), -cfg.s_bound, cfg.s_bound)
    flags = set()
    best = None
    best_gate = None
    prev_total = None
    converged = False
    outer = 0
    for outer in range(1, cfg.max_outer_iterations + 1):
        pose = Pose.from_params(params)
        params = pose.params
        moved = prev.transformed(pose)
        icp_cfg = cfg.icp
        if outer > 1 and cfg.refine_max_dist is not None:
            icp_cfg = replace(icp_cfg, max_dist=min(icp_cfg.max_dist, cfg.refine_max_dist))
        cs = associate(curr, moved, icp_cfg.max_dist)
        if cs.is_empty:
            flags.add("empty_association")
            if best is None:
                return _failed(init, cfg.weights, flags)
            break
        cs = provider(cs, gamma)

        weights = cfg.weights
        rectified = None
        if weights.w3 or weights.w4:
            try:
                res = icp_refine(curr, moved, icp_cfg, confidences=lambda c: provider(c, gamma))
                rectified = rectify(pose, res.delta)
            except (DegenerateGeometryError, EmptyCorrespondenceError) as exc:
                log.debug("ICP failed at outer iteration %d: %s", outer, exc)
                flags.add("icp_degenerate")
                weights = replace(weights, w3=0.0, w4=0.0)

        problem = _Problem(curr, prev, cs, rectified, weights, cfg)
        report, grad, grad_s, hess_s = problem.evaluate(params, s)
        summary = cs.confidence_summary()
        target = rectified if rectified is not None else pose
        if best is None or best_gate != icp_cfg.max_dist:
            # totals under different gates count different pairs, so a gate
            # change restarts the best-iterate bookkeeping
            best = PairEstimate(pose, report, target, summary, outer, False, (), float(s[0]), float(s[1]))
            best_gate = icp_cfg.max_dist
        if prev_total is not None and abs(report.total - prev_total) < cfg.convergence_tol:
            converged = True
            break
        prev_total = report.total

        direction = _precondition(problem.curvature(params, s), pose.quat, grad, cfg.damping)
        s_step = np.divide(grad_s, hess_s, out=np.zeros(2), where=hess_s > 1e-300)
        new_s = np.clip(s - cfg.s_step_size * s_step, -cfg.s_bound, cfg.s_bound)
        eta = cfg.step_size
        for _ in range(cfg.max_halvings + 1):
            trial = params - eta * direction
            trial_report = problem.evaluate(trial, new_s)[0]
            if trial_report.total <= report.total:
                break
            eta *= 0.5
        else:
            # no descent along this direction at the current association
            converged = True
            break
        new_pose = Pose.from_params(trial)
        # an iterate is scored at the association that produced it; losses
        # under different associations are not comparable
        if trial_report.total < best.report.total:
            best = PairEstimate(new_pose, trial_report, target, summary, outer, False, (),
                                float(new_s[0]), float(new_s[1]))
        step = new_pose.compose(pose.inverse())
        log.debug("outer %d: total %.9g -> %.9g, eta %.3g, step %.3g m / %.3g rad, s %s",
                  outer, report.total, trial_report.total, eta, np.linalg.norm(step.translation),
                  step.rotation_angle(), new_s)
        params, s = new_pose.params, new_s
        if (np.linalg.norm(step.translation) < cfg.icp.translation_tol
                and step.rotation_angle() < cfg.icp.rotation_tol):
            converged = True
            break

    return replace(best, outer_iterations=outer, converged=converged, flags=tuple(sorted(flags)))


def _check_skip_pair(before, curr, first: Pose, est: PairEstimate, cfg: SolverConfig, k: int) -> PairEstimate:
    chained = est.pose.compose(first)
    try:
        skip = estimate_pair(before, curr, chained, cfg).pose
    except Exception as exc:
        log.warning("skip pair (%d, %d) failed: %s", k - 2, k, exc)
        return est
    gap = float(np.linalg.norm(skip.compose(chained.inverse()).translation))
    log.debug("skip pair (%d, %d): %.4g m from the chained estimate", k - 2, k, gap)
    if gap > cfg.skip_pair_tol:
        return replace(est, flags=tuple(sorted({*est.flags, "skip_inconsistent"})))
    return est


@dataclass
class SequenceResult:
    trajectory: Trajectory
    estimates: list

    @property
    def reports(self) -> list:
        return [e.report for e in self.estimates]


def run_sequence(sweeps, cfg: SolverConfig = SolverConfig(), on_pair=None) -> SequenceResult:
    """Chain :func:`estimate_pair` over consecutive sweeps.

    ``sweeps`` is any iterable of prepared clouds. Trajectory poses are
    sensor-to-first-frame (KITTI convention), so pose k is the composition of
    the inverted pair estimates. ``on_pair(k, estimate)`` is called after
    each pair.
    """
    it = iter(sweeps)
    try:
        prev = next(it)
    except StopIteration:
        raise ValueError("run_sequence needs at least two sweeps") from None
    poses = [Pose.identity()]
    estimates = []
    last = Pose.identity()
    before = None
    for k, curr in enumerate(it, start=1):
        init = last if cfg.init_mode == "constant_velocity" else Pose.identity()
        try:
            est = estimate_pair(prev, curr, init, cfg)
        except Exception as exc:  # a broken pair must not end the run
            log.warning("pair %d failed: %s", k, exc)
            est = _failed(init, cfg.weights, ["error:" + type(exc).__name__])
        if cfg.skip_pair_check and before is not None and not est.flags and not estimates[-1].flags:
            est = _check_skip_pair(before, curr, estimates[-1].pose, est, cfg, k)
        if not est.flags or est.report.pair_count:
            last = est.pose
        poses.append(poses[-1].compose(est.pose.inverse()))
        estimates.append(est)
        if on_pair is not None:
            on_pair(k, est)
        before, prev = prev, curr
    if not estimates:
        raise ValueError("run_sequence needs at least two sweeps")
    return SequenceResult(Trajectory(poses), estimates)
