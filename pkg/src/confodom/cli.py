"""``confodom`` command line: odometry, evaluate, synth, ablate.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import platform
import sys
from dataclasses import dataclass, replace
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy

from . import kitti
from .cloud import PointCloud, prepare_sweep
from .config import ConfigError, RunConfig, dump, format_value, resolve
from .evaluation import DriftResult, Trajectory, pairwise_errors, segment_errors
from .se3 import Pose
from .solver import SequenceResult, run_sequence
from .synth import SceneSpec, constant_motion_poses, render_sequence, street_scene

log = logging.getLogger("confodom")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class DataError(RuntimeError):
    pass


class NumericalError(RuntimeError):
    pass


# ---------------------------------------------------------------- synthetic input


@dataclass(frozen=True)
class SynthJob:
    scene: SceneSpec
    frames: int
    motion: Pose

    def sensor_poses(self):
        return constant_motion_poses(self.motion, self.frames)


def parse_motion(values) -> Pose:
    """``tx, ty, tz[, rx, ry, rz]``; the rotation vector is in degrees."""
    vals = [float(v) for v in values]
    if len(vals) not in (3, 6) or not all(math.isfinite(v) for v in vals):
        raise ConfigError(f"motion: expected 3 or 6 finite numbers, got {values!r}")
    rot = np.radians(vals[3:]) if len(vals) == 6 else np.zeros(3)
    return Pose.from_rotvec(rot, vals[:3])


def load_synth_job(path, frames=None, motion=None, seed=None) -> SynthJob:
    """Read a JSON synthetic-run description.

    Top-level keys: ``scene`` (a full scene dict) or ``street`` (arguments of
    :func:`street_scene`), plus ``frames`` and ``motion``.
    """
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    unknown = set(data) - {"scene", "street", "frames", "motion"}
    if unknown:
        raise ConfigError(f"{path}: unknown field(s): {', '.join(sorted(unknown))}")
    if ("scene" in data) == ("street" in data):
        raise ConfigError(f"{path}: give exactly one of 'scene' or 'street'")
    try:
        if "scene" in data:
            scene = SceneSpec.from_dict(data["scene"])
        else:
            street = dict(data["street"])
            scene = street_scene(**{k: tuple(v) if isinstance(v, list) else v for k, v in street.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: invalid scene: {exc}") from None
    if seed is not None:
        scene = replace(scene, seed=seed)
    frames = data.get("frames", 2) if frames is None else frames
    if not isinstance(frames, int) or isinstance(frames, bool) or frames < 1:
        raise ConfigError(f"{path}: frames must be a positive integer, got {frames!r}")
    if motion is None:
        m = data.get("motion", {})
        if not isinstance(m, dict) or set(m) - {"translation", "rotvec_deg"}:
            raise ConfigError(f"{path}: motion takes 'translation' and 'rotvec_deg'")
        motion = parse_motion(list(m.get("translation", (0, 0, 0))) + list(m.get("rotvec_deg", (0, 0, 0))))
    return SynthJob(scene, frames, motion)


def synth_sweeps(job: SynthJob):
    """Rendered sweeps as raw ``xyzr`` float32 rows, exactly as they would be stored."""
    for cloud in render_sequence(job.scene, job.sensor_poses()):
        yield cloud.to_xyzr().astype("<f4")


def write_synth(job: SynthJob, out: Path) -> list:
    velo = out / "velodyne"
    velo.mkdir(parents=True, exist_ok=True)
    files = []
    for k, xyzr in enumerate(synth_sweeps(job)):
        f = velo / f"{k:06d}.bin"
        kitti.write_velodyne(f, xyzr)
        files.append(f)
    kitti.write_poses(out / "poses.txt", job.sensor_poses())
    kitti.atomic_write_text(out / "scene.json", job.scene.to_json() + "\n")
    return files


# ---------------------------------------------------------------- inputs


@dataclass
class LoadedInput:
    raw_sweeps: list  # (N, 4) arrays
    gt: Trajectory | None
    seed: int | None
    description: str


def _sweep_files(path: Path) -> list:
    for d in (path / "velodyne", path):
        files = sorted(d.glob("*.bin")) if d.is_dir() else []
        if files:
            return files
    raise DataError(f"no .bin sweeps found in {path}")


def load_input(cfg: RunConfig) -> LoadedInput:
    if not cfg.input:
        raise ConfigError("no input given (set 'input' or pass --input)")
    path = Path(cfg.input)
    if not path.exists():
        raise DataError(f"input not found: {path}")
    gt = None
    if path.is_dir():
        try:
            raw = [kitti.read_velodyne(f) for f in _sweep_files(path)]
        except ValueError as exc:
            raise DataError(str(exc)) from None
        seed = cfg.seed
        gt_path = Path(cfg.gt) if cfg.gt else (path / "poses.txt" if (path / "poses.txt").exists() else None)
        description = f"velodyne directory {path}"
    else:
        job = load_synth_job(path, seed=cfg.seed)
        raw = list(synth_sweeps(job))
        seed = job.scene.seed
        gt_path = Path(cfg.gt) if cfg.gt else None
        if gt_path is None:
            gt = Trajectory(job.sensor_poses())
        description = f"synthetic spec {path}"
    if gt_path is not None:
        gt = Trajectory(_read_poses(gt_path))
    if len(raw) < 2:
        raise DataError(f"{path}: need at least two sweeps, found {len(raw)}")
    if gt is not None and len(gt) != len(raw):
        raise DataError(f"ground truth has {len(gt)} poses but input has {len(raw)} sweeps")
    return LoadedInput(raw, gt, seed, description)


def _read_poses(path):
    try:
        return kitti.read_poses(path)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    except kitti.PoseFormatError as exc:
        raise DataError(str(exc)) from None


def prepared_sweeps(cfg: RunConfig, raw_sweeps):
    for k, xyzr in enumerate(raw_sweeps):
        cloud = PointCloud.from_xyzr(xyzr, frame_id=k, min_range=cfg.cloud.min_range)
        yield prepare_sweep(cloud, cfg.cloud.voxel_size, cfg.cloud.normal_k)


# ---------------------------------------------------------------- artifacts


def versions() -> dict:
    try:
        own = metadata.version("confodom")
    except metadata.PackageNotFoundError:
        own = "unknown"
    return {"confodom": own, "numpy": np.__version__, "python": platform.python_version(), "scipy": scipy.__version__}


def manifest_text(cfg: RunConfig, seed, description) -> str:
    meta = {f"version.{k}": v for k, v in versions().items()}
    meta["seed"] = seed
    meta["input_kind"] = description.split(" ", 1)[0]
    return dump(cfg, meta)


def _g(v) -> str:
    return f"{float(v):.9g}"


def loss_csv(result: SequenceResult) -> str:
    lines = ["frame_pair,l_sr,l_ra,l_tr,l_fs,total,pair_count,conf_min,conf_mean,conf_max,"
             "outer_iterations,converged,flags"]
    for k, est in enumerate(result.estimates, start=1):
        r = est.report
        lines.append(",".join([
            str(k), _g(r.l_sr), _g(r.l_ra), _g(r.l_tr), _g(r.l_fs), _g(r.total), str(r.pair_count),
            *(_g(c) for c in est.confidence_summary), str(est.outer_iterations), str(int(est.converged)),
            ";".join(est.flags),
        ]))
    return "\n".join(lines) + "\n"


def drift_csv(drift: DriftResult) -> str:
    lines = ["length_m,t_rel_pct,r_rel_deg_per_100m,segments"]
    for length, t, r, n in drift.rows():
        lines.append(f"{length},{_g(t)},{_g(r)},{n}")
    lines.append(f"average,{_g(drift.t_rel)},{_g(drift.r_rel)},{sum(v[2] for v in drift.per_length.values())}")
    return "\n".join(lines) + "\n"


def pair_error_csv(est: Trajectory, gt: Trajectory) -> str:
    t_err, r_err = pairwise_errors(est, gt)
    lines = ["frame_pair,t_err_m,r_err_deg"]
    for k, (t, r) in enumerate(zip(t_err, r_err), start=1):
        lines.append(f"{k},{_g(t)},{_g(math.degrees(r))}")
    return "\n".join(lines) + "\n"


def drift_summary(drift: DriftResult) -> str:
    if drift.empty:
        return "no segment of the requested lengths fits in the ground-truth path\n"
    out = [f"t_rel {drift.t_rel:.4f} %   r_rel {drift.r_rel:.4f} deg/100m"]
    for length, t, r, n in drift.rows():
        out.append(f"  {length:5d} m: t {t:.4f} %  r {r:.4f} deg/100m  ({n} segments)")
    return "\n".join(out) + "\n"


def trajectory_svg(est: Trajectory, gt: Trajectory | None = None, size: int = 600) -> str:
    """Top-down (x, y) polylines; ground truth in black, estimate in red."""
    paths = [("#000000", gt)] if gt is not None else []
    paths.append(("#d62728", est))
    pts = np.vstack([t.positions[:, :2] for _, t in paths])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = max(float((hi - lo).max()), 1e-9)
    margin = 20.0
    scale = (size - 2 * margin) / span

    def xy(p):
        # SVG y grows downward
        return margin + (p[0] - lo[0]) * scale, size - margin - (p[1] - lo[1]) * scale

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
           f'<rect width="{size}" height="{size}" fill="#ffffff"/>']
    ox, oy = xy(lo)
    out.append(f'<line x1="{margin}" y1="{oy:.3f}" x2="{size - margin}" y2="{oy:.3f}" stroke="#999999"/>')
    out.append(f'<line x1="{ox:.3f}" y1="{margin}" x2="{ox:.3f}" y2="{size - margin}" stroke="#999999"/>')
    out.append(f'<text x="{margin}" y="{margin - 6}" font-size="11">x-y, {span:.6g} m across</text>')
    for color, traj in paths:
        coords = " ".join("{:.3f},{:.3f}".format(*xy(p)) for p in traj.positions[:, :2])
        out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _check_finite(traj: Trajectory):
    for k, p in enumerate(traj):
        if not (np.all(np.isfinite(p.quat)) and np.all(np.isfinite(p.translation))):
            raise NumericalError(f"non-finite pose at frame {k}")


# ---------------------------------------------------------------- commands


def _solve(cfg: RunConfig, data: LoadedInput, solver_cfg=None) -> SequenceResult:
    solver_cfg = solver_cfg or cfg.effective_solver()

    def report(k, est):
        log.info("pair %d: total %.6g, %d pairs, %d outer iterations%s", k, est.report.total,
                 est.report.pair_count, est.outer_iterations, f", flags {','.join(est.flags)}" if est.flags else "")

    result = run_sequence(prepared_sweeps(cfg, data.raw_sweeps), solver_cfg, on_pair=report)
    _check_finite(result.trajectory)
    return result


def cmd_odometry(cfg: RunConfig) -> int:
    data = load_input(cfg)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    kitti.atomic_write_text(out / "manifest.txt", manifest_text(cfg, data.seed, data.description))
    result = _solve(cfg, data)
    kitti.write_poses(out / "trajectory.txt", result.trajectory.poses)
    kitti.atomic_write_text(out / "losses.csv", loss_csv(result))
    if data.gt is not None:
        drift = segment_errors(result.trajectory, data.gt, cfg.eval.lengths, cfg.eval.stride)
        kitti.atomic_write_text(out / "drift.csv", drift_csv(drift))
        kitti.atomic_write_text(out / "pair_errors.csv", pair_error_csv(result.trajectory, data.gt))
        kitti.atomic_write_text(out / "trajectory.svg", trajectory_svg(result.trajectory, data.gt))
        sys.stdout.write(drift_summary(drift))
        t_err, r_err = pairwise_errors(result.trajectory, data.gt)
        sys.stdout.write(f"per-pair error: mean {t_err.mean():.6f} m, {np.degrees(r_err).mean():.6f} deg\n")
    sys.stdout.write(f"wrote {out / 'trajectory.txt'} ({len(result.trajectory)} poses)\n")
    return EXIT_OK


def cmd_evaluate(est_path, gt_path, lengths, stride=1, out=None) -> int:
    est = Trajectory(_read_poses(est_path))
    gt = Trajectory(_read_poses(gt_path))
    if len(est) != len(gt):
        raise DataError(f"row-count mismatch: {est_path} has {len(est)} poses, {gt_path} has {len(gt)}")
    if len(gt) == 0:
        raise DataError(f"{gt_path}: no poses")
    drift = segment_errors(est, gt, lengths, stride)
    sys.stdout.write(drift_summary(drift))
    out = Path(out) if out else Path(est_path).parent
    out.mkdir(parents=True, exist_ok=True)
    kitti.atomic_write_text(out / "drift.csv", drift_csv(drift))
    kitti.atomic_write_text(out / "trajectory.svg", trajectory_svg(est, gt))
    return EXIT_OK


def cmd_synth(spec_path, out, frames=None, motion=None, seed=None) -> int:
    job = load_synth_job(spec_path, frames, motion, seed)
    files = write_synth(job, Path(out))
    sys.stdout.write(f"wrote {len(files)} sweeps and poses.txt to {out}\n")
    return EXIT_OK


ABLATION_VARIANTS = (
    ("L_sr", dict(l_ra=False, l_tr=False, l_fs=False), {}),
    ("L_sr+L_ra", dict(l_tr=False, l_fs=False), {}),
    ("L_sr+L_ra+L_tr", dict(l_fs=False), {}),
    ("full", {}, {}),
    ("full w/o conf", {}, dict(use_confidence=False)),
    ("full L_eu for L_sr", {}, dict(reprojection="euclidean")),
)


def ablation_configs(cfg: RunConfig):
    for name, switches, solver_changes in ABLATION_VARIANTS:
        yield name, replace(cfg, ablation=replace(cfg.ablation, **switches),
                            solver=replace(cfg.solver, **solver_changes))


def cmd_ablate(cfg: RunConfig) -> int:
    data = load_input(cfg)
    if data.gt is None:
        raise DataError("ablation needs ground-truth poses (set 'gt' or use a synthetic input)")
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    kitti.atomic_write_text(out / "manifest.txt", manifest_text(cfg, data.seed, data.description))
    rows = ["variant,t_rel_pct,r_rel_deg_per_100m,segments,pair_t_err_mean_m,pair_r_err_mean_deg"]
    for name, variant in ablation_configs(cfg):
        log.info("variant %s", name)
        result = _solve(variant, data)
        drift = segment_errors(result.trajectory, data.gt, cfg.eval.lengths, cfg.eval.stride)
        t_err, r_err = pairwise_errors(result.trajectory, data.gt)
        n_seg = sum(v[2] for v in drift.per_length.values())
        rows.append(f"{name},{_g(drift.t_rel)},{_g(drift.r_rel)},{n_seg},{_g(t_err.mean())},"
                    f"{_g(np.degrees(r_err).mean())}")
        sys.stdout.write(f"{name:<22} t_rel {drift.t_rel:8.4f} %  r_rel {drift.r_rel:8.4f} deg/100m  "
                         f"pair err {t_err.mean():.5f} m {np.degrees(r_err).mean():.5f} deg\n")
    kitti.atomic_write_text(out / "ablation.csv", "\n".join(rows) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------- argument parsing


def _run_args(p):
    p.add_argument("input", nargs="?", help="velodyne directory or synthetic JSON spec")
    p.add_argument("--config", help="flat 'key = value' config file (a run manifest works too)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--gt", help="ground-truth KITTI pose file")
    p.add_argument("--seed", type=int, help="scene seed for synthetic input")
    p.add_argument("--set", dest="pairs", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, e.g. solver.step_size=0.5")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="confodom", description="LiDAR odometry by loss minimization.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    _run_args(sub.add_parser("odometry", help="estimate a trajectory"))
    _run_args(sub.add_parser("ablate", help="compare loss-subset variants on one input"))

    p = sub.add_parser("evaluate", help="KITTI drift of an estimated trajectory")
    p.add_argument("estimate")
    p.add_argument("ground_truth")
    p.add_argument("--lengths", default=format_value(RunConfig().eval.lengths), help="segment lengths in m")
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--out", help="output directory (default: next to the estimate)")

    p = sub.add_parser("synth", help="render a synthetic sequence to KITTI files")
    p.add_argument("spec", help="JSON scene description")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int)
    p.add_argument("--motion", help="per-frame sensor motion tx,ty,tz[,rx,ry,rz] (m, deg)")
    p.add_argument("--seed", type=int)
    return parser


def _run_config(args) -> RunConfig:
    pairs = list(args.pairs)
    for key, value in (("input", args.input), ("output", args.out), ("gt", args.gt), ("seed", args.seed)):
        if value is not None:
            pairs.append(f"{key}={value}")
    return resolve(args.config, pairs)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "odometry":
            return cmd_odometry(_run_config(args))
        if args.command == "ablate":
            return cmd_ablate(_run_config(args))
        if args.command == "evaluate":
            try:
                lengths = tuple(int(v) for v in args.lengths.split(",") if v.strip())
            except ValueError:
                raise ConfigError(f"--lengths: expected comma-separated integers, got {args.lengths!r}") from None
            return cmd_evaluate(args.estimate, args.ground_truth, lengths, args.stride, args.out)
        if args.command == "synth":
            motion = parse_motion(args.motion.split(",")) if args.motion else None
            return cmd_synth(args.spec, args.out, args.frames, motion, args.seed)
    except ConfigError as exc:
        print(f"confodom: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"confodom: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"confodom: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
