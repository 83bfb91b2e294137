"""Point clouds, voxel-grid averaging, cross-product normals and exact NN search."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .se3 import Pose

#: metres, (x, y, z)
DEFAULT_VOXEL_SIZE = (0.1, 0.1, 0.2)
MIN_RANGE = 0.5
_NORMAL_EPS = 1e-6
_CROSS_EPS = 1e-8


@dataclass(frozen=True)
class PointCloud:
    """One sweep. Each point carries position, normal (or a zero sentinel) and reflectance."""

    positions: np.ndarray
    normals: np.ndarray = None
    reflectance: np.ndarray = None
    frame_id: int = 0

    def __post_init__(self):
        pos = np.array(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(pos)
        normals = np.zeros((n, 3)) if self.normals is None else np.array(self.normals, dtype=np.float64)
        refl = np.ones(n) if self.reflectance is None else np.array(self.reflectance, dtype=np.float64)
        if normals.shape != (n, 3) or refl.shape != (n,):
            raise ValueError(
                f"inconsistent shapes: positions {pos.shape}, normals {normals.shape}, reflectance {refl.shape}"
            )
        for a in (pos, normals, refl):
            a.flags.writeable = False
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "normals", normals)
        object.__setattr__(self, "reflectance", refl)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def ranges(self) -> np.ndarray:
        return np.linalg.norm(self.positions, axis=1)

    @property
    def has_normal(self) -> np.ndarray:
        return np.any(self.normals != 0.0, axis=1)

    @classmethod
    def empty(cls, frame_id: int = 0) -> PointCloud:
        return cls(np.zeros((0, 3)), frame_id=frame_id)

    @classmethod
    def from_xyzr(cls, xyzr: np.ndarray, frame_id: int = 0, min_range: float = MIN_RANGE) -> PointCloud:
        """Ingest raw ``x, y, z, reflectance`` rows, dropping non-finite and near-sensor returns."""
        xyzr = np.asarray(xyzr, dtype=np.float64).reshape(-1, 4)
        cloud = cls(xyzr[:, :3], reflectance=np.clip(np.nan_to_num(xyzr[:, 3]), 0.0, 1.0), frame_id=frame_id)
        return sanitize(cloud, min_range)

    def select(self, mask_or_index) -> PointCloud:
        return PointCloud(
            self.positions[mask_or_index],
            self.normals[mask_or_index],
            self.reflectance[mask_or_index],
            self.frame_id,
        )

    def transformed(self, pose: Pose) -> PointCloud:
        return PointCloud(pose.apply(self.positions), self.normals @ pose.rotation.T, self.reflectance, self.frame_id)

    def to_xyzr(self) -> np.ndarray:
        return np.column_stack([self.positions, self.reflectance])


def sanitize(cloud: PointCloud, min_range: float = MIN_RANGE) -> PointCloud:
    finite = np.all(np.isfinite(cloud.positions), axis=1)
    keep = finite & (np.linalg.norm(np.where(finite[:, None], cloud.positions, 0.0), axis=1) >= min_range)
    return cloud if keep.all() else cloud.select(keep)


def _normalize_rows(v: np.ndarray, eps: float) -> np.ndarray:
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    out = np.zeros_like(v)
    ok = norms[:, 0] >= eps
    out[ok] = v[ok] / norms[ok]
    return out


def voxel_keys(positions: np.ndarray, cell_size=DEFAULT_VOXEL_SIZE) -> np.ndarray:
    cell = np.asarray(cell_size, dtype=np.float64)
    if cell.shape != (3,) or np.any(cell <= 0):
        raise ValueError(f"cell_size must be three positive numbers, got {cell_size!r}")
    return np.floor(positions / cell).astype(np.int64)


def voxel_downsample(cloud: PointCloud, cell_size=DEFAULT_VOXEL_SIZE) -> PointCloud:
    """Replace the points of every occupied cell by their arithmetic mean.

    All seven per-point components are averaged; the averaged normal is then
    renormalized, or set to zero if its norm falls below 1e-6. Output points
    come in ascending (ix, iy, iz) cell order.
    """
    keys = voxel_keys(cloud.positions, cell_size)
    if len(cloud) == 0:
        return PointCloud.empty(cloud.frame_id)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    n_cells = len(counts)

    def mean(values):
        out = np.zeros((n_cells,) + values.shape[1:])
        np.add.at(out, inverse, values)
        return out / counts.reshape((-1,) + (1,) * (values.ndim - 1))

    return PointCloud(
        mean(cloud.positions),
        _normalize_rows(mean(cloud.normals), _NORMAL_EPS),
        mean(cloud.reflectance),
        cloud.frame_id,
    )


class NNIndex:
    """Exact Euclidean nearest-neighbour index (kd-tree). Ties go to the lowest point index."""

    def __init__(self, points: np.ndarray):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(points) == 0:
            raise ValueError("cannot build a nearest-neighbour index over an empty cloud")
        self.points = points
        self._tree = cKDTree(points)

    def __len__(self) -> int:
        return len(self.points)

    def query(self, queries: np.ndarray, k: int = 1, max_dist: float = np.inf):
        """Return ``(distances, indices)`` of shape (M,) for k=1, else (M, k).

        k is capped at the number of indexed points. Neighbours farther than
        ``max_dist`` may come back as distance ``inf`` and index ``len(self)``.
        """
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        k_eff = min(k, len(self.points))
        dist, idx = self._query_sorted(queries, k_eff, max_dist)
        if k == 1:
            return dist[:, 0], idx[:, 0]
        return dist, idx

    def _query_sorted(self, queries, k, max_dist=np.inf):
        n = len(self.points)
        extra = min(k + 1, n)
        # slack so a neighbour at exactly max_dist survives the tree's own rounding
        bound = max_dist * (1 + 1e-9) + 1e-12
        while True:
            dist, idx = self._tree.query(queries, k=extra, distance_upper_bound=bound, workers=-1)
            dist = dist.reshape(len(queries), extra)
            idx = idx.reshape(len(queries), extra)
            # a tie that straddles the cut-off needs a wider query
            tie = (dist[:, k - 1] == dist[:, extra - 1]) & np.isfinite(dist[:, k - 1])
            if extra == n or not np.any(tie):
                break
            extra = min(2 * extra, n)
        order = np.lexsort((idx, dist), axis=1)
        dist = np.take_along_axis(dist, order, axis=1)[:, :k]
        idx = np.take_along_axis(idx, order, axis=1)[:, :k]
        return dist, idx


def build_nn_index(cloud: PointCloud) -> NNIndex:
    return NNIndex(cloud.positions)


def estimate_normals(cloud: PointCloud, k: int = 4, index: NNIndex | None = None) -> PointCloud:
    """Normals from cross products of neighbour offsets.

    The k nearest neighbours' offset vectors are ordered by azimuth around the
    viewing ray and consecutive (cyclic) pairs are crossed. Each cross product
    is turned to face the sensor before averaging, so the mean cannot cancel
    on surfaces seen edge-on. Neighbourhoods whose cross products all vanish
    (collinear points) get the zero sentinel.
    """
    n = len(cloud)
    if n < k + 1:
        return PointCloud(cloud.positions, np.zeros((n, 3)), cloud.reflectance, cloud.frame_id)
    index = index or build_nn_index(cloud)
    pos = cloud.positions
    _, nbr = index.query(pos, k=k + 1)
    # drop self (always at distance 0 and, by tie-breaking, first unless duplicated)
    self_hit = nbr == np.arange(n)[:, None]
    nbr = np.where(self_hit.any(axis=1, keepdims=True), _drop_first_true(nbr, self_hit), nbr[:, :k])
    diffs = pos[nbr] - pos[:, None, :]

    ray = _normalize_rows(pos, 1e-12)
    ray[~np.any(ray != 0, axis=1)] = (0.0, 0.0, 1.0)
    helper = np.where(np.abs(ray[:, 2:3]) < 0.9, [[0.0, 0.0, 1.0]], [[1.0, 0.0, 0.0]])
    u = _normalize_rows(np.cross(ray, helper), 1e-12)
    v = np.cross(ray, u)
    az = np.arctan2(np.einsum("nkd,nd->nk", diffs, v), np.einsum("nkd,nd->nk", diffs, u))
    order = np.argsort(az, axis=1, kind="stable")
    diffs = np.take_along_axis(diffs, order[:, :, None], axis=1)

    crosses = np.cross(diffs, np.roll(diffs, -1, axis=1))
    if k == 2:
        crosses = crosses[:, :1]
    facing = np.einsum("nkd,nd->nk", crosses, -pos)
    crosses = np.where(facing[:, :, None] < 0, -crosses, crosses)
    strong = np.linalg.norm(crosses, axis=2) >= _CROSS_EPS
    crosses = np.where(strong[:, :, None], crosses, 0.0)
    normals = _normalize_rows(crosses.sum(axis=1), _CROSS_EPS)
    return PointCloud(pos, normals, cloud.reflectance, cloud.frame_id)


def _drop_first_true(idx: np.ndarray, mask: np.ndarray) -> np.ndarray:
    first = np.argmax(mask, axis=1)
    keep = np.ones_like(mask)
    keep[np.arange(len(idx)), first] = False
    return idx[keep].reshape(len(idx), idx.shape[1] - 1)


def prepare_sweep(cloud: PointCloud, cell_size=DEFAULT_VOXEL_SIZE, k: int = 4) -> PointCloud:
    """Normals on the raw sweep, then voxel averaging."""
    return voxel_downsample(estimate_normals(cloud, k), cell_size)
