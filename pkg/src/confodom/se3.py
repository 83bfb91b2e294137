"""Rigid-motion algebra on unit quaternions.

Quaternions are stored as ``(w, x, y, z)`` float64 arrays. A :class:`Pose`
maps a point ``x`` to ``R x + t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_EYE3 = np.eye(3)


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0.0:
        raise ValueError(f"cannot normalize quaternion {q!r}")
    return q / n


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product ``a * b``."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = quat_normalize(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method; the result has ``w >= 0``."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    diag = np.diag(R)
    k = int(np.argmax([tr, *diag]))
    if k == 0:
        s = 2.0 * np.sqrt(max(1.0 + tr, 0.0))
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif k == 1:
        s = 2.0 * np.sqrt(max(1.0 + R[0, 0] - R[1, 1] - R[2, 2], 0.0))
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif k == 2:
        s = 2.0 * np.sqrt(max(1.0 - R[0, 0] + R[1, 1] - R[2, 2], 0.0))
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(max(1.0 - R[0, 0] - R[1, 1] + R[2, 2], 0.0))
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = quat_normalize(np.array(q))
    return -q if q[0] < 0 else q


def rotation_jacobian(q: np.ndarray) -> np.ndarray:
    """Derivative of ``quat_to_matrix(q)`` with respect to the raw (unnormalized) ``q``.

    Returns an array of shape (4, 3, 3) whose k-th slice is dR/dq_k. The
    normalization ``q / |q|`` is part of the map, so the slices are exact for
    any nonzero ``q``, not only unit ones.
    """
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q)
    w, x, y, z = q / norm
    # dR/d(unit q) for the quadratic form above
    dw = 2 * np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    dx = 2 * np.array([[0, y, z], [y, -2 * x, -w], [z, w, -2 * x]])
    dy = 2 * np.array([[-2 * y, x, w], [x, 0, z], [-w, z, -2 * y]])
    dz = 2 * np.array([[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0]])
    d_unit = np.stack([dw, dx, dy, dz])
    qh = np.array([w, x, y, z])
    proj = (np.eye(4) - np.outer(qh, qh)) / norm
    return np.einsum("kj,kab->jab", proj, d_unit)


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``x -> R x + t`` with ``R`` held as a unit quaternion."""

    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = quat_normalize(np.array(self.quat, dtype=np.float64).reshape(4))
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "quat", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> Pose:
        T = np.asarray(T, dtype=np.float64)
        return cls(matrix_to_quat(T[:3, :3]), T[:3, 3])

    @classmethod
    def from_rt(cls, R: np.ndarray, t=(0.0, 0.0, 0.0)) -> Pose:
        return cls(matrix_to_quat(R), t)

    @classmethod
    def from_axis_angle(cls, axis, angle: float, translation=(0.0, 0.0, 0.0)) -> Pose:
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        q = np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])
        return cls(q, translation)

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> Pose:
        rotvec = np.asarray(rotvec, dtype=np.float64)
        angle = np.linalg.norm(rotvec)
        if angle < 1e-12:
            # first-order expansion; renormalized in __post_init__
            return cls(np.concatenate([[1.0], 0.5 * rotvec]), translation)
        return cls.from_axis_angle(rotvec / angle, angle, translation)

    @classmethod
    def from_params(cls, params: np.ndarray) -> Pose:
        """Build from the 7-vector ``(qw, qx, qy, qz, tx, ty, tz)``; q need not be unit."""
        params = np.asarray(params, dtype=np.float64)
        return cls(params[:4], params[4:7])

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.quat, self.translation])

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def compose(self, other: Pose) -> Pose:
        """``self ∘ other``: applies ``other`` first."""
        q = quat_multiply(self.quat, other.quat)
        t = self.rotation @ other.translation + self.translation
        return Pose(q, t)

    __matmul__ = compose

    def inverse(self) -> Pose:
        q_inv = self.quat * np.array([1.0, -1.0, -1.0, -1.0])
        return Pose(q_inv, -(quat_to_matrix(q_inv) @ self.translation))

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Transform a 3-vector or an (N, 3) array of points."""
        x = np.asarray(x, dtype=np.float64)
        return x @ self.rotation.T + self.translation

    def rotation_angle(self) -> float:
        return rotation_angle(self)

    def frobenius_dev(self) -> float:
        return frobenius_dev(self)

    def __repr__(self) -> str:
        q = np.array2string(self.quat, precision=6)
        t = np.array2string(self.translation, precision=6)
        return f"Pose(quat={q}, translation={t})"


def compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def inverse(p: Pose) -> Pose:
    return p.inverse()


def apply(p: Pose, x: np.ndarray) -> np.ndarray:
    return p.apply(x)


def rotation_angle(p: Pose) -> float:
    """Rotation angle in ``[0, pi]``, ``2 acos |w|``."""
    w = min(abs(float(p.quat[0])), 1.0)
    # acos loses precision near 1; the atan2 form agrees with 2 acos|w| elsewhere
    return float(2.0 * np.arctan2(np.linalg.norm(p.quat[1:]), w))


def frobenius_dev(p: Pose) -> float:
    """Squared Frobenius norm of ``R - I``."""
    return float(np.sum((p.rotation - _EYE3) ** 2))


def translation_norm(p: Pose) -> float:
    return float(np.linalg.norm(p.translation))


def rot_z(angle: float, translation=(0.0, 0.0, 0.0)) -> Pose:
    return Pose.from_axis_angle((0.0, 0.0, 1.0), angle, translation)
