"""Pose recovery on noise-free synthetic pairs, swept over sensor ring counts.

    python3 scripts/pose_recovery.py --rings 32 48 64 --seeds 50
"""

import argparse
import math
import time

import numpy as np

from confodom.cloud import voxel_downsample
from confodom.se3 import Pose
from confodom.solver import SolverConfig, estimate_pair
from confodom.synth import render_pair, street_scene


def random_motion(rng, max_t, max_deg):
    t = rng.normal(size=3)
    t *= rng.uniform(0, max_t) / np.linalg.norm(t)
    return Pose.from_axis_angle(rng.normal(size=3), math.radians(rng.uniform(0, max_deg)), t)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--rings", type=int, nargs="+", default=[32, 48, 64])
    ap.add_argument("--seeds", type=int, default=50)
    ap.add_argument("--max-t", type=float, default=1.0)
    ap.add_argument("--max-deg", type=float, default=2.0)
    ap.add_argument("--resample", choices=["yes", "no"], default="yes",
                    help="re-cast the second sweep (yes) or reuse the first sweep's surface points (no)")
    args = ap.parse_args()

    print(f"{'rings':>5} {'pass':>6} {'mean m':>9} {'worst m':>9} {'mean deg':>9} {'worst deg':>9} {'s':>6}")
    for rings in args.rings:
        start = time.perf_counter()
        t_err, r_err = [], []
        for seed in range(args.seeds):
            rng = np.random.default_rng(1000 + seed)
            prev, curr, gt = render_pair(street_scene(seed, n_rings=rings), random_motion(rng, args.max_t, args.max_deg),
                                         resample=args.resample == "yes")
            est = estimate_pair(voxel_downsample(prev), voxel_downsample(curr), cfg=SolverConfig())
            err = est.pose.compose(gt)
            t_err.append(np.linalg.norm(err.translation))
            r_err.append(math.degrees(err.rotation_angle()))
        t_err, r_err = np.array(t_err), np.array(r_err)
        ok = np.sum((t_err <= 1e-2) & (r_err <= 0.05))
        print(f"{rings:>5} {ok:>3}/{args.seeds:<2} {t_err.mean():9.5f} {t_err.max():9.5f} {r_err.mean():9.5f} "
              f"{r_err.max():9.5f} {time.perf_counter() - start:6.1f}")


if __name__ == "__main__":
    main()
