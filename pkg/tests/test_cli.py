import csv
import json
import math

import numpy as np
import pytest

from confodom import kitti
from confodom.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, load_synth_job, main
from confodom.se3 import Pose

STREET = {"seed": 1, "length": 20, "n_rings": 32}


def write_spec(path, frames=5, **street):
    spec = {"street": {**STREET, **street}, "frames": frames,
            "motion": {"translation": [0.8, 0.0, 0.0], "rotvec_deg": [0.0, 0.0, 1.0]}}
    path.write_text(json.dumps(spec))
    return path


def line_poses(n, scale=1.0):
    return [Pose(translation=(k * scale, 0.0, 0.0)) for k in range(n)]


def test_odometry_on_synthetic_spec(tmp_path, capsys):
    spec = write_spec(tmp_path / "spec.json")
    out = tmp_path / "run"
    assert main(["odometry", str(spec), "--out", str(out)]) == EXIT_OK
    est = kitti.read_poses(out / "trajectory.txt")
    gt = load_synth_job(spec).sensor_poses()
    assert len(est) == 5
    assert max(np.linalg.norm(a.translation - b.translation) for a, b in zip(est, gt)) < 5e-2
    with open(out / "pair_errors.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    assert max(float(r["t_err_m"]) for r in rows) < 5e-2
    with open(out / "losses.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 4
    for name in ("manifest.txt", "drift.csv", "trajectory.svg"):
        assert (out / name).stat().st_size > 0
    assert "meta.version.numpy" in (out / "manifest.txt").read_text()
    assert "per-pair error" in capsys.readouterr().out


def test_odometry_on_velodyne_directory(tmp_path):
    spec = write_spec(tmp_path / "spec.json", frames=3)
    seq = tmp_path / "seq"
    assert main(["synth", str(spec), "--out", str(seq)]) == EXIT_OK
    out = tmp_path / "run"
    assert main(["odometry", str(seq), "--out", str(out)]) == EXIT_OK
    # poses.txt next to the sweeps is picked up as ground truth
    assert (out / "drift.csv").exists()
    est = kitti.read_poses(out / "trajectory.txt")
    gt = kitti.read_poses(seq / "poses.txt")
    assert max(np.linalg.norm(a.translation - b.translation) for a, b in zip(est, gt)) < 5e-2


def test_empty_directory_names_path(tmp_path, capsys):
    empty = tmp_path / "nothing_here"
    empty.mkdir()
    assert main(["odometry", str(empty), "--out", str(tmp_path / "o")]) == EXIT_DATA
    assert "nothing_here" in capsys.readouterr().err


def test_missing_input_is_data_error(tmp_path, capsys):
    assert main(["odometry", str(tmp_path / "absent.json"), "--out", str(tmp_path / "o")]) == EXIT_DATA
    assert "absent.json" in capsys.readouterr().err


def test_unknown_config_key_is_usage_error(tmp_path, capsys):
    spec = write_spec(tmp_path / "spec.json")
    assert main(["odometry", str(spec), "--set", "solver.bogus=1"]) == EXIT_USAGE
    assert "solver.bogus" in capsys.readouterr().err


def test_bad_subcommand_is_usage_error(capsys):
    assert main(["fly"]) == EXIT_USAGE


def test_evaluate_identical_is_zero(tmp_path, capsys):
    gt = tmp_path / "gt.txt"
    kitti.write_poses(gt, line_poses(400))
    assert main(["evaluate", str(gt), str(gt), "--out", str(tmp_path / "e")]) == EXIT_OK
    with open(tmp_path / "e" / "drift.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and all(float(r["t_rel_pct"]) == 0 and float(r["r_rel_deg_per_100m"]) == 0 for r in rows)
    assert (tmp_path / "e" / "trajectory.svg").read_text().startswith("<svg")


def test_evaluate_scale_drift(tmp_path, capsys):
    gt, est = tmp_path / "gt.txt", tmp_path / "est.txt"
    kitti.write_poses(gt, line_poses(901))
    kitti.write_poses(est, line_poses(901, 1.01))
    assert main(["evaluate", str(est), str(gt)]) == EXIT_OK
    with open(tmp_path / "drift.csv") as fh:
        rows = {r["length_m"]: r for r in csv.DictReader(fh)}
    assert float(rows["average"]["t_rel_pct"]) == pytest.approx(1.0, abs=1e-6)


def test_evaluate_malformed_row(tmp_path, capsys):
    gt = tmp_path / "gt.txt"
    kitti.write_poses(gt, line_poses(3))
    bad = tmp_path / "bad.txt"
    lines = gt.read_text().splitlines()
    lines[1] = " ".join(lines[1].split()[:11])
    bad.write_text("\n".join(lines) + "\n")
    assert main(["evaluate", str(bad), str(gt)]) == EXIT_DATA
    err = capsys.readouterr().err
    assert "bad.txt:2:" in err


def test_evaluate_row_mismatch(tmp_path, capsys):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    kitti.write_poses(a, line_poses(3))
    kitti.write_poses(b, line_poses(4))
    assert main(["evaluate", str(a), str(b)]) == EXIT_DATA
    assert "mismatch" in capsys.readouterr().err


def test_synth_writes_sequence(tmp_path):
    spec = write_spec(tmp_path / "spec.json", frames=2, n_rings=8)
    out = tmp_path / "seq"
    assert main(["synth", str(spec), "--out", str(out), "--frames", "10", "--motion", "1,0,0"]) == EXIT_OK
    bins = sorted((out / "velodyne").glob("*.bin"))
    assert [b.name for b in bins] == [f"{k:06d}.bin" for k in range(10)]
    poses = kitti.read_poses(out / "poses.txt")
    assert len(poses) == 10
    np.testing.assert_allclose(poses[9].translation, (9, 0, 0), atol=1e-9)
    assert kitti.read_velodyne(bins[0]).shape[1] == 4


def test_synth_is_byte_identical(tmp_path):
    spec = write_spec(tmp_path / "spec.json", frames=3, n_rings=8, noise_sigma=0.01, mover_fraction=0.1)
    for name in ("a", "b"):
        assert main(["synth", str(spec), "--out", str(tmp_path / name), "--seed", "5"]) == EXIT_OK
    for rel in ("velodyne/000000.bin", "velodyne/000002.bin", "poses.txt", "scene.json"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_synth_rejects_bad_mover_fraction(tmp_path, capsys):
    spec = write_spec(tmp_path / "spec.json", mover_fraction=1.5)
    assert main(["synth", str(spec), "--out", str(tmp_path / "x")]) == EXIT_USAGE
    assert "mover_fraction" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_synth_names_unknown_field(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"scene": {"primitives": [{"type": "plane"}], "flavour": 1}}))
    assert main(["synth", str(spec), "--out", str(tmp_path / "x")]) == EXIT_USAGE
    assert "flavour" in capsys.readouterr().err


def test_rerun_from_manifest_is_identical(tmp_path):
    spec = write_spec(tmp_path / "spec.json", frames=3)
    out = tmp_path / "run"
    assert main(["odometry", str(spec), "--out", str(out), "--set", "solver.max_outer_iterations=10"]) == EXIT_OK
    first = {p.name: p.read_bytes() for p in out.iterdir()}
    assert main(["odometry", "--config", str(out / "manifest.txt")]) == EXIT_OK
    assert {p.name: p.read_bytes() for p in out.iterdir()} == first


@pytest.mark.slow
def test_ablation_ordering_on_noisy_scene(tmp_path):
    # raw-sweep normals from four neighbours are swamped by 2 cm noise, hence normal_k=8
    spec = write_spec(tmp_path / "spec.json", seed=3, length=30, noise_sigma=0.02, mover_fraction=0.15,
                      mover_offset=[1.0, 0.5, 0.0])
    out = tmp_path / "ab"
    assert main(["ablate", str(spec), "--out", str(out), "--set", "eval.lengths=1,2",
                 "--set", "cloud.normal_k=8"]) == EXIT_OK
    with open(out / "ablation.csv") as fh:
        rows = {r["variant"]: float(r["t_rel_pct"]) for r in csv.DictReader(fh)}
    assert len(rows) == 6
    assert all(rows["full"] <= rows[v] for v in ("L_sr", "L_sr+L_ra", "L_sr+L_ra+L_tr"))
    assert all(math.isfinite(v) for v in rows.values())


def test_ablate_needs_ground_truth(tmp_path, capsys):
    spec = write_spec(tmp_path / "spec.json", frames=2, n_rings=8)
    seq = tmp_path / "seq"
    main(["synth", str(spec), "--out", str(seq)])
    (seq / "poses.txt").unlink()
    assert main(["ablate", str(seq), "--out", str(tmp_path / "ab")]) == EXIT_DATA
    assert "ground-truth" in capsys.readouterr().err
