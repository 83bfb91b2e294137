"""Synthetic spinning-LiDAR sweeps over analytic scenes with known ground truth.

A sweep rendered at ``sensor_pose`` (sensor-to-world) is returned in the
sensor frame. :func:`render_pair` returns the *sensor* motion between the two
sweeps; the ego-motion mapping previous-frame points to current-frame points
is its inverse.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .cloud import PointCloud
from .se3 import Pose

_T_MIN = 1e-9


@dataclass(frozen=True)
class Plane:
    point: tuple = (0.0, 0.0, 0.0)
    normal: tuple = (0.0, 0.0, 1.0)

    def intersect(self, origin, dirs):
        n = np.asarray(self.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((np.asarray(self.point) - origin) @ n) / denom
        t = np.where(np.abs(denom) > 1e-12, t, np.inf)
        return t, np.broadcast_to(n, dirs.shape)


@dataclass(frozen=True)
class Sphere:
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 1.0

    def intersect(self, origin, dirs):
        c = np.asarray(self.center, dtype=np.float64)
        oc = origin - c
        b = dirs @ oc
        disc = b * b - (oc @ oc - self.radius**2)
        root = np.sqrt(np.maximum(disc, 0.0))
        t_near = -b - root
        t = np.where(t_near > _T_MIN, t_near, -b + root)
        t = np.where(disc >= 0, t, np.inf)
        with np.errstate(invalid="ignore"):
            normals = (origin + t[:, None] * dirs - c) / self.radius
        return t, normals


@dataclass(frozen=True)
class Box:
    """Oriented box: ``center``, ``half_extents`` and a yaw angle (radians) about z."""

    center: tuple = (0.0, 0.0, 0.0)
    half_extents: tuple = (1.0, 1.0, 1.0)
    yaw: float = 0.0

    def intersect(self, origin, dirs):
        return _intersect_boxes([self], origin, dirs)


def _intersect_boxes(boxes, origin, dirs):
    """Nearest hit over a batch of oriented boxes (slab test in each box frame).

    A bounding-sphere test picks candidate (box, ray) pairs first, so the slab
    test only runs where a hit is possible.
    """
    n_rays = dirs.shape[0]
    c = np.array([b.center for b in boxes], dtype=np.float64)
    h = np.array([b.half_extents for b in boxes], dtype=np.float64)
    yaw = np.array([b.yaw for b in boxes], dtype=np.float64)
    rel = c - origin  # (B, 3)
    along = rel @ dirs.T  # (B, N)
    radius2 = (h**2).sum(axis=1)
    dist2 = (rel**2).sum(axis=1)
    near = (dist2[:, None] - along**2 <= radius2[:, None]) & ((along > 0) | (dist2 <= radius2)[:, None])
    bi, ri = np.nonzero(near)
    t_best = np.full(n_rays, np.inf)
    normals = np.zeros((n_rays, 3))
    if len(bi) == 0:
        return t_best, normals

    cos, sin = np.cos(yaw), np.sin(yaw)
    zero, one = np.zeros_like(yaw), np.ones_like(yaw)
    R = np.stack([np.stack([cos, -sin, zero], -1), np.stack([sin, cos, zero], -1),
                  np.stack([zero, zero, one], -1)], -2)  # (B, 3, 3), box-to-world
    o_box = np.einsum("bji,bj->bi", R, -rel)  # (B, 3)
    o = o_box[bi]
    d = np.einsum("pj,pji->pi", dirs[ri], R[bi])
    hb = h[bi]
    inside = np.abs(o) <= hb
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-hb - o) * inv
        t2 = (hb - o) * inv
    parallel = d == 0
    t1 = np.where(parallel, np.where(inside, -np.inf, np.inf), t1)
    t2 = np.where(parallel, np.where(inside, np.inf, -np.inf), t2)
    t_lo = np.minimum(t1, t2)
    t_hi = np.maximum(t1, t2)
    t_enter = t_lo.max(axis=1)
    t_exit = t_hi.min(axis=1)
    hit = (t_enter <= t_exit) & (t_exit > _T_MIN)
    use_exit = t_enter <= _T_MIN
    t = np.where(hit, np.where(use_exit, t_exit, t_enter), np.inf)
    face = np.where(use_exit, t_hi.argmin(axis=1), t_lo.argmax(axis=1))

    # nearest candidate per ray; ties resolve to the lower box index
    order = np.lexsort((bi, t, ri))
    first = order[np.r_[True, ri[order][1:] != ri[order][:-1]]]
    t_best[ri[first]] = t[first]
    normals[ri[first]] = R[bi[first], :, face[first]]
    normals[~np.isfinite(t_best)] = 0.0
    return t_best, normals


_KINDS = {"plane": Plane, "sphere": Sphere, "box": Box}


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple = ()
    n_azimuth: int = 1024
    n_rings: int = 64
    elevation_deg: tuple = (-25.0, 3.0)
    max_range: float = 80.0
    noise_sigma: float = 0.0
    mover_fraction: float = 0.0
    mover_offset: tuple = (1.0, 0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.mover_fraction < 1.0:
            raise ValueError(f"mover_fraction must be in [0, 1), got {self.mover_fraction}")
        if not self.max_range > 0:
            raise ValueError(f"max_range must be positive, got {self.max_range}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be non-negative, got {self.noise_sigma}")
        if self.n_azimuth < 1 or self.n_rings < 1:
            raise ValueError("n_azimuth and n_rings must be >= 1")
        object.__setattr__(self, "primitives", tuple(self.primitives))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["primitives"] = [
            {"type": next(k for k, v in _KINDS.items() if isinstance(p, v)), **asdict(p)} for p in self.primitives
        ]
        return d

    @classmethod
    def from_dict(cls, data: dict) -> SceneSpec:
        data = dict(data)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown scene field(s): {', '.join(sorted(unknown))}")
        prims = []
        for i, p in enumerate(data.pop("primitives", [])):
            p = dict(p)
            kind = p.pop("type", None)
            if kind not in _KINDS:
                raise ValueError(f"primitives[{i}].type: expected one of {sorted(_KINDS)}, got {kind!r}")
            try:
                prims.append(_KINDS[kind](**{k: _tuplify(v) for k, v in p.items()}))
            except TypeError as exc:
                raise ValueError(f"primitives[{i}]: {exc}") from None
        return cls(primitives=prims, **{k: _tuplify(v) for k, v in data.items()})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _tuplify(v):
    return tuple(v) if isinstance(v, list) else v


def ray_directions(scene: SceneSpec) -> np.ndarray:
    """Unit ray directions in the sensor frame, ring-major and azimuth-minor."""
    lo, hi = np.radians(scene.elevation_deg)
    elev = np.linspace(lo, hi, scene.n_rings) if scene.n_rings > 1 else np.array([0.5 * (lo + hi)])
    az = np.arange(scene.n_azimuth) * (2 * np.pi / scene.n_azimuth)
    el, a = np.meshgrid(elev, az, indexing="ij")
    return np.stack([np.cos(el) * np.cos(a), np.cos(el) * np.sin(a), np.sin(el)], axis=-1).reshape(-1, 3)


def cast(scene: SceneSpec, sensor_pose: Pose):
    """First-hit ranges and world-frame normals for every ray; misses get ``inf``."""
    if not scene.primitives:
        raise ValueError("scene has no primitives")
    dirs_s = ray_directions(scene)
    dirs_w = dirs_s @ sensor_pose.rotation.T
    origin = sensor_pose.translation
    best_t = np.full(len(dirs_s), np.inf)
    best_n = np.zeros_like(dirs_s)
    boxes = [p for p in scene.primitives if isinstance(p, Box)]
    others = [p for p in scene.primitives if not isinstance(p, Box)]
    hits = [p.intersect(origin, dirs_w) for p in others]
    if boxes:
        hits.append(_intersect_boxes(boxes, origin, dirs_w))
    for t, n in hits:
        closer = (t > _T_MIN) & (t < best_t)
        best_t = np.where(closer, t, best_t)
        best_n = np.where(closer[:, None], n, best_n)
    best_t = np.where(best_t <= scene.max_range, best_t, np.inf)
    return dirs_s, dirs_w, best_t, best_n


def render_sweep(
    scene: SceneSpec,
    sensor_pose: Pose = None,
    frame_id: int = 0,
    movers: bool = False,
) -> PointCloud:
    """Render one sweep in the sensor frame.

    Normals are the analytic surface normals turned toward the sensor.
    Noise (and, with ``movers=True``, mover selection) is drawn from a
    generator seeded by ``(scene.seed, frame_id)``.
    """
    sensor_pose = Pose.identity() if sensor_pose is None else sensor_pose
    dirs_s, dirs_w, t, n_w = cast(scene, sensor_pose)
    hit = np.isfinite(t)
    pos = dirs_s[hit] * t[hit, None]
    n_s = n_w[hit] @ sensor_pose.rotation
    n_s = np.where((np.einsum("nd,nd->n", n_s, dirs_s[hit]) > 0)[:, None], -n_s, n_s)
    rng = np.random.default_rng([scene.seed, frame_id])
    if movers and scene.mover_fraction > 0 and len(pos):
        count = int(math.floor(scene.mover_fraction * len(pos)))
        chosen = rng.choice(len(pos), size=count, replace=False)
        pos = pos.copy()
        pos[chosen] += sensor_pose.rotation.T @ np.asarray(scene.mover_offset, dtype=np.float64)
    if scene.noise_sigma > 0 and len(pos):
        pos = pos + rng.normal(scale=scene.noise_sigma, size=pos.shape)
    return PointCloud(pos, n_s, np.ones(len(pos)), frame_id)


def mover_indices(scene: SceneSpec, n_points: int, frame_id: int = 1) -> np.ndarray:
    """Indices :func:`render_sweep` displaces for a sweep of ``n_points`` hits."""
    count = int(math.floor(scene.mover_fraction * n_points))
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    return np.random.default_rng([scene.seed, frame_id]).choice(n_points, size=count, replace=False)


def render_pair(scene: SceneSpec, motion: Pose, resample: bool = True):
    """Render ``(prev, curr, gt)``: ``prev`` at the origin, ``curr`` at sensor pose ``motion``.

    With ``resample`` (the default) ``curr`` is ray-cast afresh, so the two
    sweeps sample surfaces at different places. Without it, ``curr`` observes
    exactly the surface points hit by ``prev``, so every static point of
    ``curr`` is the matching ``prev`` point moved by the ego-motion. Movers and
    noise are applied to ``curr`` only. ``gt`` is ``motion`` itself.
    """
    if resample:
        prev = render_sweep(scene, Pose.identity(), frame_id=0)
        curr = render_sweep(scene, motion, frame_id=1, movers=True)
        return prev, curr, motion
    clean = replace(scene, noise_sigma=0.0)
    world = render_sweep(clean, Pose.identity(), frame_id=0)
    ego = motion.inverse()
    pos = ego.apply(world.positions)
    rng = np.random.default_rng([scene.seed, 1])
    if scene.mover_fraction > 0 and len(pos):
        chosen = rng.choice(len(pos), size=int(math.floor(scene.mover_fraction * len(pos))), replace=False)
        pos[chosen] += ego.rotation @ np.asarray(scene.mover_offset, dtype=np.float64)
    if scene.noise_sigma > 0 and len(pos):
        pos = pos + rng.normal(scale=scene.noise_sigma, size=pos.shape)
    curr = PointCloud(pos, world.normals @ ego.rotation.T, world.reflectance, 1)
    prev = render_sweep(scene, Pose.identity(), frame_id=0)
    return prev, curr, motion


def render_sequence(scene: SceneSpec, sensor_poses) -> list[PointCloud]:
    return [render_sweep(scene, p, frame_id=k, movers=k > 0) for k, p in enumerate(sensor_poses)]


def constant_motion_poses(step: Pose, frames: int) -> list[Pose]:
    poses = [Pose.identity()]
    for _ in range(frames - 1):
        poses.append(poses[-1].compose(step))
    return poses


def street_scene(seed: int = 0, length: float = 60.0, **overrides) -> SceneSpec:
    """Ground plane, two facades with gaps, parked boxes and spherical shrubs.

    Objects are scattered over ``x`` in ``[-30, length + 30]`` so a sensor
    driving along +x keeps seeing structure in every direction.
    """
    rng = np.random.default_rng(seed)
    prims = [Plane((0.0, 0.0, -1.73), (0.0, 0.0, 1.0))]
    x = -30.0
    while x < length + 30.0:
        seg = rng.uniform(6.0, 14.0)
        for side in (-1.0, 1.0):
            if rng.uniform() < 0.85:
                depth = rng.uniform(2.0, 4.0)
                prims.append(
                    Box(
                        (x + seg / 2, side * (rng.uniform(9.0, 13.0) + depth), rng.uniform(1.0, 4.0)),
                        (seg / 2 - 0.5, depth, 6.0),
                        float(rng.uniform(-0.08, 0.08)),
                    )
                )
        x += seg
    for _ in range(int((length + 60.0) / 6.0)):
        cx = rng.uniform(-30.0, length + 30.0)
        side = rng.choice([-1.0, 1.0])
        if rng.uniform() < 0.5:
            prims.append(
                Box((cx, side * rng.uniform(3.5, 7.0), -1.73 + 0.8), (rng.uniform(1.8, 2.4), 0.9, 0.8),
                    float(rng.uniform(-0.4, 0.4)))
            )
        else:
            r = rng.uniform(0.5, 1.5)
            prims.append(Sphere((cx, side * rng.uniform(3.5, 8.0), -1.73 + r * 0.8), r))
    defaults = dict(primitives=prims, n_azimuth=360, n_rings=32, max_range=60.0, seed=seed)
    defaults.update(overrides)
    return SceneSpec(**defaults)
