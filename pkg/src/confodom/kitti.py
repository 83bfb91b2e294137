"""KITTI odometry file formats: velodyne ``.bin`` sweeps and pose text files."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np

from .se3 import Pose


class PoseFormatError(ValueError):
    """A pose file row did not parse; ``line`` is 1-based."""

    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def read_velodyne(path) -> np.ndarray:
    """Read a sweep as an (N, 4) float32 array of ``x, y, z, reflectance``."""
    path = Path(path)
    size = path.stat().st_size
    if size % 16:
        raise ValueError(f"{path}: size {size} is not a multiple of 16 bytes")
    return np.fromfile(path, dtype="<f4").reshape(-1, 4)


def write_velodyne(path, xyzr: np.ndarray) -> None:
    xyzr = np.asarray(xyzr)
    if xyzr.ndim != 2 or xyzr.shape[1] != 4:
        raise ValueError(f"expected (N, 4) array, got shape {xyzr.shape}")
    atomic_write_bytes(path, np.ascontiguousarray(xyzr, dtype="<f4").tobytes())


def format_pose_row(pose: Pose) -> str:
    values = pose.as_matrix()[:3, :].reshape(-1)
    # 9 significant digits; -0.0 is folded so rows are stable under re-parsing
    return " ".join(f"{v + 0.0:.8e}" for v in values)


def parse_pose_row(row: str) -> Pose:
    fields = row.split()
    if len(fields) != 12:
        raise ValueError(f"expected 12 numbers, got {len(fields)}")
    values = np.array([float(f) for f in fields])
    if not np.all(np.isfinite(values)):
        raise ValueError("non-finite value")
    T = np.eye(4)
    T[:3, :] = values.reshape(3, 4)
    return Pose.from_matrix(T)


def read_poses(path) -> list[Pose]:
    poses = []
    with open(path) as f:
        for lineno, row in enumerate(f, start=1):
            if not row.strip():
                continue
            try:
                poses.append(parse_pose_row(row))
            except ValueError as exc:
                raise PoseFormatError(path, lineno, str(exc)) from None
    return poses


def write_poses(path, poses) -> None:
    atomic_write_text(path, "".join(format_pose_row(p) + "\n" for p in poses))
