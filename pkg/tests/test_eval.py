import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from confodom.evaluation import (
    KITTI_LENGTHS,
    Trajectory,
    last_frame_from_segment_length,
    pairwise_errors,
    path_length,
    segment_errors,
)
from confodom.se3 import Pose, rot_z
from conftest import poses


def line(n, step=1.0, scale=1.0):
    return Trajectory([Pose(translation=(k * step * scale, 0, 0)) for k in range(n)])


def yaw_drift(n, step, rate_deg_per_m):
    """Straight line whose heading error grows at a constant rate per metre."""
    out = [Pose.identity()]
    for _ in range(n - 1):
        out.append(out[-1].compose(rot_z(math.radians(rate_deg_per_m * step), (step, 0, 0))))
    return Trajectory(out)


def test_path_length_examples():
    np.testing.assert_array_equal(path_length(Trajectory([Pose.identity()])), [0])
    np.testing.assert_array_equal(path_length(line(3)), [0, 1, 2])
    square = [(0, 0, 0), (10, 0, 0), (10, 10, 0), (0, 10, 0), (0, 0, 0)]
    np.testing.assert_array_equal(path_length(Trajectory([Pose(translation=p) for p in square])), [0, 10, 20, 30, 40])


def test_path_length_needs_a_pose():
    with pytest.raises(ValueError):
        path_length(Trajectory([]))


def test_identical_trajectories_have_zero_drift():
    gt = yaw_drift(900, 1.0, 0.05)
    r = segment_errors(gt, gt)
    assert r.t_rel < 1e-12 and r.r_rel < 1e-12 and not r.empty
    assert sorted(r.per_length) == list(KITTI_LENGTHS)


def test_one_percent_scale_drift():
    r = segment_errors(line(1001, scale=1.01), line(1001))
    assert r.t_rel == pytest.approx(1.0, abs=1e-6)
    assert r.r_rel == pytest.approx(0.0, abs=1e-9)


def test_constant_yaw_rate_error():
    gt = line(1001)
    est = yaw_drift(1001, 1.0, 0.01)
    r = segment_errors(est, gt)
    assert r.r_rel == pytest.approx(1.0, abs=1e-6)


def test_breakdown_average_equals_headline():
    rng = np.random.default_rng(0)
    gt = yaw_drift(700, 1.0, 0.02)
    est = Trajectory([Pose.from_axis_angle(rng.normal(size=3), 0.01, p.translation + rng.normal(scale=0.5, size=3))
                      for p in gt])
    r = segment_errors(est, gt)
    assert r.t_rel == pytest.approx(np.mean([v[0] for v in r.per_length.values()]), abs=1e-9)
    assert r.r_rel == pytest.approx(np.mean([v[1] for v in r.per_length.values()]), abs=1e-9)
    assert r.t_rel >= 0 and r.r_rel >= 0
    assert [row[0] for row in r.rows()] == [100, 200, 300, 400, 500, 600]


def test_short_path_flagged_empty():
    r = segment_errors(line(50), line(50))
    assert r.empty and r.per_length == {}


def test_length_mismatch_rejected():
    with pytest.raises(ValueError, match="mismatch"):
        segment_errors(line(10), line(11))
    with pytest.raises(ValueError):
        pairwise_errors(line(10), line(11))


def test_stride_changes_segment_count():
    r1 = segment_errors(line(301), line(301), (100,))
    r10 = segment_errors(line(301), line(301), (100,), stride=10)
    assert r1.per_length[100][2] == 201 and r10.per_length[100][2] == 21


@given(st.lists(st.floats(0, 5, allow_nan=False), min_size=1, max_size=60), st.floats(0, 40, allow_nan=False),
       st.data())
def test_segment_end_is_first_frame_past_threshold(steps, length, data):
    dist = np.concatenate([[0.0], np.cumsum(steps)])
    first = data.draw(st.integers(0, len(dist) - 1))
    j = last_frame_from_segment_length(dist, first, length)
    scan = next((k for k in range(first, len(dist)) if dist[k] >= dist[first] + length), -1)
    assert j == scan


@given(poses(max_t=100.0))
def test_rigid_invariance(G):
    rng = np.random.default_rng(1)
    # off-grid step so no cumulative distance sits exactly on a segment threshold
    gt = yaw_drift(320, 1.037, 0.1)
    est = Trajectory([Pose.from_axis_angle(rng.normal(size=3), 0.02, p.translation + rng.normal(scale=0.3, size=3))
                      for p in gt])
    base = segment_errors(est, gt, (100, 200, 300))
    moved = segment_errors(Trajectory([G.compose(p) for p in est]), Trajectory([G.compose(p) for p in gt]),
                           (100, 200, 300))
    assert moved.t_rel == pytest.approx(base.t_rel, abs=1e-7)
    assert moved.r_rel == pytest.approx(base.r_rel, abs=1e-7)


def test_relative_to_first_starts_at_identity():
    t = Trajectory([Pose.from_axis_angle((1, 0, 0), 0.2, (1, 2, 3)), Pose(translation=(4, 5, 6))])
    r = t.relative_to_first()
    assert r[0].rotation_angle() < 1e-12 and np.linalg.norm(r[0].translation) < 1e-12


def test_pairwise_errors_on_exact_copy():
    gt = yaw_drift(20, 1.0, 1.0)
    t, r = pairwise_errors(gt, gt)
    assert len(t) == 19 and np.all(t < 1e-12) and np.all(r < 1e-7)
