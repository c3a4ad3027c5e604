"""Synthetic LiDAR: box-union vehicle shapes, scenes and an exact spherical range-image renderer.

Range-image geometry: pixel (v, u) looks along azimuth ``-pi + u * 2pi / W`` and
elevation ``el_min + v * (el_max - el_min) / (H - 1)``; row 0 is the lowest beam.
A point projects to the nearest pixel center.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import Box7, PointCloud, RigidTransform, yaw_matrix

NO_RETURN = -1.0
RANGE_MAGIC = b"OCRI"


class FormatError(ValueError):
    """A binary artifact has the wrong magic or is truncated."""


# ---------------------------------------------------------------------------
# shapes


@dataclass(frozen=True, eq=False)
class ShapePrimitiveSet:
    """Union of axis-aligned boxes in an object's local frame."""

    centers: np.ndarray  # (K, 3)
    half_extents: np.ndarray  # (K, 3)
    archetype: str = "custom"

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=np.float64).reshape(-1, 3)
        h = np.asarray(self.half_extents, dtype=np.float64).reshape(-1, 3)
        if len(c) == 0:
            raise ValueError("shape needs at least one part")
        if len(c) != len(h) or np.any(h <= 0):
            raise ValueError("parts need matching centers and positive half extents")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "half_extents", h)

    def __len__(self):
        return len(self.centers)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return (self.centers - self.half_extents).min(0), (self.centers + self.half_extents).max(0)

    def fits(self, dims, tol: float = 1e-9) -> bool:
        lo, hi = self.bounds()
        half = np.asarray(dims, dtype=np.float64) / 2
        return bool(np.all(lo >= -half - tol) and np.all(hi <= half + tol))

    def contains(self, local_points: np.ndarray) -> np.ndarray:
        """Closed point-in-union test for (N, 3) box-local points."""
        p = np.asarray(local_points, dtype=np.float64)
        inside = np.zeros(len(p), dtype=bool)
        for c, h in zip(self.centers, self.half_extents):
            inside |= np.all(np.abs(p - c) <= h, axis=1)
        return inside

    def surface_distance(self, local_points: np.ndarray) -> np.ndarray:
        """Distance from each point to the nearest part surface (boundary of any part)."""
        p = np.asarray(local_points, dtype=np.float64)
        best = np.full(len(p), np.inf)
        for c, h in zip(self.centers, self.half_extents):
            q = np.abs(p - c) - h
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
            inside = -np.max(q, axis=1)
            best = np.minimum(best, np.where(np.all(q <= 0, axis=1), inside, outside))
        return best

    def to_json(self) -> dict:
        return {
            "archetype": self.archetype,
            "centers": self.centers.tolist(),
            "half_extents": self.half_extents.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "ShapePrimitiveSet":
        return cls(d["centers"], d["half_extents"], d.get("archetype", "custom"))


ARCHETYPES = ("sedan", "truck", "crane", "bus", "pickup", "trailer")


def _part(x0, x1, y0, y1, z0, z1):
    return [(x0 + x1) / 2, (y0 + y1) / 2, (z0 + z1) / 2], [(x1 - x0) / 2, (y1 - y0) / 2, (z1 - z0) / 2]


def _wheels(xs, width, radius=0.33, thick=0.26):
    parts = []
    for x in xs:
        for side in (-1, 1):
            y = side * (width / 2 - thick / 2)
            parts.append(_part(x - radius, x + radius, y - thick / 2, y + thick / 2, 0.0, 2 * radius))
    return parts


def make_shape(archetype: str, rng: np.random.Generator) -> tuple[ShapePrimitiveSet, np.ndarray]:
    """Procedural vehicle of the given archetype; returns (shape, tight box dims).

    Parts are generated with the ground at z = 0 and then recentred so the union's
    bounding box is centered at the origin. Every part is at least 0.25 m thick.
    """
    u = rng.uniform
    parts = []
    if archetype == "sedan":
        L, W, H = u(4.2, 4.9), u(1.75, 1.9), u(1.4, 1.55)
        body_top = u(0.8, 0.95)
        parts.append(_part(0, L, 0, W, 0.25, body_top))
        cab = u(0.45, 0.55) * L
        x0 = u(0.25, 0.35) * L
        parts.append(_part(x0, x0 + cab, 0.06, W - 0.06, body_top, H))
        parts += _wheels([0.75, L - 0.8], W)
    elif archetype == "truck":
        W = u(2.3, 2.5)
        cab_l, cab_h = u(1.8, 2.2), u(2.5, 2.9)
        box_l, box_h = u(4.0, 6.0), u(3.2, 3.6)
        parts.append(_part(0.0, box_l, 0, W, 0.6, box_h))
        parts.append(_part(box_l + 0.2, box_l + 0.2 + cab_l, 0.1, W - 0.1, 0.35, cab_h))
        parts += _wheels([0.9, box_l - 0.6, box_l + 0.2 + cab_l - 0.6], W, radius=0.45, thick=0.3)
    elif archetype == "crane":
        W = u(2.4, 2.6)
        deck_l = u(7.0, 9.0)
        deck_h = u(1.4, 1.7)
        cab_l, cab_h = u(2.0, 2.5), u(2.8, 3.2)
        boom_z = u(3.4, 3.9)
        boom_w = u(0.5, 0.7)
        parts.append(_part(0.0, deck_l, 0, W, 0.4, deck_h))
        parts.append(_part(deck_l, deck_l + cab_l, 0.05, W - 0.05, 0.4, cab_h))
        # turret + boom reaching forward past the cab
        parts.append(_part(0.6, 2.4, 0.4, W - 0.4, deck_h, boom_z - 0.3))
        boom_len = u(0.85, 1.0) * (deck_l + cab_l)
        yb = W / 2 - boom_w / 2
        parts.append(_part(0.8, 0.8 + boom_len, yb, yb + boom_w, boom_z - 0.3, boom_z + 0.3))
        parts += _wheels([1.2, 3.0, deck_l - 1.0, deck_l + cab_l - 0.7], W, radius=0.5, thick=0.35)
    elif archetype == "bus":
        L, W, H = u(10.0, 12.0), u(2.45, 2.55), u(3.0, 3.2)
        parts.append(_part(0, L, 0, W, 0.35, H))
        parts += _wheels([2.0, L - 2.4], W, radius=0.5, thick=0.3)
    elif archetype == "pickup":
        W = u(1.9, 2.05)
        cab_l, H = u(2.4, 2.8), u(1.75, 1.9)
        bed_l = u(1.7, 2.1)
        floor_z = u(0.75, 0.9)
        wall_h = u(0.45, 0.6)
        t = 0.25
        parts.append(_part(bed_l, bed_l + cab_l, 0, W, 0.3, H))
        parts.append(_part(0, bed_l, 0, W, 0.3, floor_z))  # bed floor
        parts.append(_part(0, bed_l, 0, t, floor_z, floor_z + wall_h))
        parts.append(_part(0, bed_l, W - t, W, floor_z, floor_z + wall_h))
        parts.append(_part(0, t, t, W - t, floor_z, floor_z + wall_h))  # tailgate
        parts += _wheels([0.8, bed_l + cab_l - 0.8], W, radius=0.4, thick=0.28)
    elif archetype == "trailer":
        W = u(2.45, 2.55)
        tr_l, tr_h = u(6.0, 8.0), u(3.6, 4.0)
        cab_l, cab_h = u(2.3, 2.7), u(2.9, 3.3)
        gap = u(0.4, 0.7)
        parts.append(_part(0.0, tr_l, 0, W, 1.1, tr_h))
        parts.append(_part(tr_l + gap, tr_l + gap + cab_l, 0.1, W - 0.1, 0.4, cab_h))
        parts.append(_part(tr_l - 1.5, tr_l + gap + 0.3, 0.5, W - 0.5, 0.5, 1.1))  # fifth wheel / chassis
        parts += _wheels([0.9, 2.0, tr_l + gap + cab_l - 0.7], W, radius=0.5, thick=0.3)
    else:
        raise ValueError(f"unknown archetype {archetype!r}")
    c = np.array([p[0] for p in parts])
    h = np.array([p[1] for p in parts])
    lo, hi = (c - h).min(0), (c + h).max(0)
    c = c - (lo + hi) / 2
    return ShapePrimitiveSet(c, h, archetype), hi - lo


# ---------------------------------------------------------------------------
# sensor


@dataclass(frozen=True)
class SensorModel:
    rows: int
    cols: int
    el_min: float
    el_max: float
    max_range: float = 80.0

    def __post_init__(self):
        if self.rows < 2 or self.cols < 2:
            raise ValueError("sensor needs at least 2 rows and 2 columns")
        if not self.el_min < self.el_max:
            raise ValueError("el_min must be below el_max")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")

    @classmethod
    def from_resolution(cls, deg: float, el_min_deg: float, el_max_deg: float, max_range: float = 80.0):
        """Sensor with ``deg`` spacing in both axes; el bounds are snapped to the lattice."""
        rows = int(round((el_max_deg - el_min_deg) / deg)) + 1
        cols = int(round(360.0 / deg))
        return cls(rows, cols, math.radians(el_min_deg), math.radians(el_min_deg + (rows - 1) * deg), max_range)

    @property
    def d_el(self) -> float:
        return (self.el_max - self.el_min) / (self.rows - 1)

    @property
    def d_az(self) -> float:
        return 2.0 * math.pi / self.cols

    def azimuths(self) -> np.ndarray:
        return -math.pi + np.arange(self.cols) * self.d_az

    def elevations(self) -> np.ndarray:
        return self.el_min + np.arange(self.rows) * self.d_el

    def directions(self, rows=None, cols=None) -> np.ndarray:
        """Unit ray directions (len(rows), len(cols), 3) in the sensor frame."""
        el = self.elevations() if rows is None else self.el_min + np.asarray(rows) * self.d_el
        az = self.azimuths() if cols is None else -math.pi + np.asarray(cols) * self.d_az
        ce = np.cos(el)[:, None]
        return np.stack(
            [ce * np.cos(az)[None, :], ce * np.sin(az)[None, :], np.broadcast_to(np.sin(el)[:, None], (len(el), len(az)))],
            axis=-1,
        )

    def project(self, points_sensor: np.ndarray):
        """Nearest-pixel projection. Returns (v, u, range, in_fov)."""
        p = np.asarray(points_sensor, dtype=np.float64)
        r = np.linalg.norm(p, axis=1)
        az = np.arctan2(p[:, 1], p[:, 0])
        el = np.arctan2(p[:, 2], np.hypot(p[:, 0], p[:, 1]))
        u = np.floor((az + math.pi) / self.d_az + 0.5).astype(np.int64) % self.cols
        vf = np.floor((el - self.el_min) / self.d_el + 0.5)
        in_fov = (vf >= 0) & (vf <= self.rows - 1) & (r > 0)
        v = np.clip(vf, 0, self.rows - 1).astype(np.int64)
        return v, u, r, in_fov

    def to_json(self) -> dict:
        return {"rows": self.rows, "cols": self.cols, "el_min": self.el_min, "el_max": self.el_max, "max_range": self.max_range}

    @classmethod
    def from_json(cls, d: dict) -> "SensorModel":
        if "resolution_deg" in d:
            return cls.from_resolution(d["resolution_deg"], d["el_min_deg"], d["el_max_deg"], d.get("max_range", 80.0))
        if "el_min_deg" in d:
            return cls(d["rows"], d["cols"], math.radians(d["el_min_deg"]), math.radians(d["el_max_deg"]), d.get("max_range", 80.0))
        return cls(d["rows"], d["cols"], d["el_min"], d["el_max"], d.get("max_range", 80.0))


# ---------------------------------------------------------------------------
# scenes


@dataclass
class Actor:
    track_id: int
    shape: ShapePrimitiveSet
    poses: list[Box7]


@dataclass
class Scene:
    ego_poses: list[RigidTransform]
    actors: list[Actor]
    frame_period: float = 0.1
    sensor_mount: RigidTransform = field(default_factory=lambda: RigidTransform(np.eye(3), [0.0, 0.0, 1.8]))

    def __post_init__(self):
        T = len(self.ego_poses)
        if T < 1:
            raise ValueError("scene needs at least one frame")
        ids = [a.track_id for a in self.actors]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate track ids")
        for a in self.actors:
            if len(a.poses) != T:
                raise ValueError(f"actor {a.track_id} has {len(a.poses)} poses, expected {T}")

    @property
    def num_frames(self) -> int:
        return len(self.ego_poses)

    def sensor_pose(self, frame: int) -> RigidTransform:
        """Sensor → world at ``frame``."""
        p = self.ego_poses[frame].compose(self.sensor_mount)
        return RigidTransform(p.rotation, p.translation, "sensor", "world")

    def to_json(self) -> dict:
        def pose4(t: RigidTransform):
            return [*t.translation.tolist(), math.atan2(t.rotation[1, 0], t.rotation[0, 0])]

        return {
            "frame_period": self.frame_period,
            "mount": self.sensor_mount.translation.tolist(),
            "ego": [pose4(t) for t in self.ego_poses],
            "actors": [
                {
                    "track_id": a.track_id,
                    "shape": a.shape.to_json(),
                    "poses": [[*b.center.tolist(), b.yaw] for b in a.poses],
                    "dims": a.poses[0].dims.tolist(),
                }
                for a in self.actors
            ],
        }


def scene_from_json(doc: dict) -> Scene:
    """Build a scene from an explicit document, or expand a ``procedural`` block."""
    if "procedural" in doc:
        p = doc["procedural"]
        return random_scene(
            p.get("seed", doc.get("seed", 0)),
            num_frames=p.get("num_frames", 32),
            num_actors=p.get("num_actors", 5),
            frame_period=p.get("frame_period", 0.1),
        )
    rng = np.random.default_rng(doc.get("seed", 0))
    ego = [RigidTransform.from_yaw(e[3], e[:3]) for e in doc["ego"]]
    actors = []
    for a in doc["actors"]:
        if "shape" in a:
            shape = ShapePrimitiveSet.from_json(a["shape"])
            dims = np.asarray(a["dims"], dtype=np.float64)
        else:
            shape, dims = make_shape(a["archetype"], np.random.default_rng(a.get("shape_seed", rng.integers(1 << 31))))
        if not shape.fits(dims):
            raise ValueError(f"actor {a['track_id']}: shape does not fit its box")
        poses = [Box7(p[:3], dims, p[3]) for p in a["poses"]]
        actors.append(Actor(int(a["track_id"]), shape, poses))
    mount = RigidTransform(np.eye(3), doc.get("mount", [0.0, 0.0, 1.8]))
    return Scene(ego, actors, doc.get("frame_period", 0.1), mount)


LANES = (-13.5, -9.0, -4.5, 4.5, 9.0, 13.5)


def random_scene(seed: int, num_frames: int = 32, num_actors: int = 5, frame_period: float = 0.1) -> Scene:
    """Straight-road scene: ego drives +x in lane 0, actors occupy distinct side lanes."""
    rng = np.random.default_rng(seed)
    num_actors = min(num_actors, len(LANES))
    ts = np.arange(num_frames) * frame_period
    ego_speed = rng.uniform(0.0, 10.0)
    ego = [RigidTransform.from_yaw(0.0, [ego_speed * t, 0.0, 0.0]) for t in ts]
    lanes = rng.choice(len(LANES), size=num_actors, replace=False)
    t_mid = ts[-1] / 2
    actors = []
    for k, lane in enumerate(sorted(lanes)):
        arch = ARCHETYPES[rng.integers(len(ARCHETYPES))]
        shape, dims = make_shape(arch, rng)
        heading = 1.0 if rng.uniform() < 0.5 else -1.0
        speed = 0.0 if rng.uniform() < 0.25 else rng.uniform(3.0, 12.0)
        rel_mid = rng.uniform(-15.0, 15.0)
        x_mid = ego_speed * t_mid + rel_mid
        y = LANES[lane] + rng.uniform(-0.3, 0.3)
        yaw = 0.0 if heading > 0 else math.pi
        yaw += rng.uniform(-0.03, 0.03)
        poses = []
        for t in ts:
            x = x_mid + heading * speed * (t - t_mid)
            poses.append(Box7([x, y, dims[2] / 2], dims, yaw))
        actors.append(Actor(k + 1, shape, poses))
    return Scene(ego, actors, frame_period)


def scene_hash(scene: Scene) -> str:
    blob = json.dumps(scene.to_json(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# rendering


@dataclass
class RangeImage:
    depths: np.ndarray  # (H, W), NO_RETURN where empty
    sensor_pose: RigidTransform
    sensor: SensorModel

    def effective(self) -> np.ndarray:
        """Depths with no-return pixels read as max_range."""
        return np.where(self.depths < 0, self.sensor.max_range, self.depths)


def _world_parts(scene: Scene, frame: int):
    """Yield (center_world, rotation_world, half_extents) for every actor part at ``frame``."""
    for a in scene.actors:
        b = a.poses[frame]
        rot = yaw_matrix(b.yaw)
        for c, h in zip(a.shape.centers, a.shape.half_extents):
            yield b.center + rot @ c, rot, h


def ray_box_entry(origin_local: np.ndarray, dirs_local: np.ndarray, half: np.ndarray) -> np.ndarray:
    """Entry distance of rays into an origin-centered AABB; inf where missed or started inside."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs_local
        t1 = (-half - origin_local) * inv
        t2 = (half - origin_local) * inv
    # axis-parallel rays: inside the slab → (-inf, inf), outside → empty
    par = dirs_local == 0
    miss = np.zeros(t1.shape[:-1], dtype=bool)
    if np.any(par):
        outside = np.broadcast_to(np.abs(origin_local) > half, par.shape)
        miss = np.any(par & outside, axis=-1)
        t1 = np.where(par, -np.inf, t1)
        t2 = np.where(par, np.inf, t2)
    tmin = np.minimum(t1, t2).max(axis=-1)
    tmax = np.maximum(t1, t2).min(axis=-1)
    hit = (tmax >= tmin) & (tmin > 0) & ~miss
    return np.where(hit, tmin, np.inf)


def _cull_window(center_s, rot_s, half, sm: SensorModel):
    """Conservative (rows, cols) index arrays for pixels whose rays may hit the part."""
    if abs(rot_s[2, 2] - 1.0) > 1e-12:
        return np.arange(sm.rows), np.arange(sm.cols)
    corners_xy = np.array([[sx, sy] for sx in (-1, 1) for sy in (-1, 1)]) * half[:2]
    xy = corners_xy @ rot_s[:2, :2].T + center_s[:2]
    # horizontal distance from the sensor axis to the footprint rectangle
    o_local = rot_s[:2, :2].T @ (-center_s[:2])
    q = np.maximum(np.abs(o_local) - half[:2], 0.0)
    rho_min = float(np.hypot(*q))
    rho_max = float(np.hypot(xy[:, 0], xy[:, 1]).max())
    z0, z1 = center_s[2] - half[2], center_s[2] + half[2]
    el_hi = math.atan2(z1, rho_min) if z1 >= 0 else math.atan2(z1, rho_max)
    el_lo = math.atan2(z0, rho_min) if z0 <= 0 else math.atan2(z0, rho_max)
    v0 = max(0, math.floor((el_lo - sm.el_min) / sm.d_el) - 1)
    v1 = min(sm.rows - 1, math.ceil((el_hi - sm.el_min) / sm.d_el) + 1)
    if v0 > v1:
        return np.arange(0), np.arange(0)
    rows = np.arange(v0, v1 + 1)
    if rho_min <= 0.0:
        return rows, np.arange(sm.cols)
    az_c = math.atan2(center_s[1], center_s[0])
    rel = np.arctan2(np.sin(np.arctan2(xy[:, 1], xy[:, 0]) - az_c), np.cos(np.arctan2(xy[:, 1], xy[:, 0]) - az_c))
    a0, a1 = az_c + rel.min(), az_c + rel.max()
    u0 = math.floor((a0 + math.pi) / sm.d_az) - 1
    u1 = math.ceil((a1 + math.pi) / sm.d_az) + 1
    if u1 - u0 + 1 >= sm.cols:
        return rows, np.arange(sm.cols)
    return rows, np.arange(u0, u1 + 1) % sm.cols


def render_range_image(scene: Scene, frame: int, sm: SensorModel) -> RangeImage:
    """Nearest hit over all actor parts for every pixel-center ray; NO_RETURN beyond max_range."""
    if not 0 <= frame < scene.num_frames:
        raise IndexError(f"frame {frame} out of range")
    pose = scene.sensor_pose(frame)
    inv = pose.inverse()
    depth = np.full((sm.rows, sm.cols), np.inf)
    for cw, rw, half in _world_parts(scene, frame):
        c_s = inv.apply(cw)
        r_s = inv.rotation @ rw
        rows, cols = _cull_window(c_s, r_s, half, sm)
        if len(rows) == 0 or len(cols) == 0:
            continue
        d_s = sm.directions(rows, cols)
        o_local = r_s.T @ (-c_s)
        d_local = d_s @ r_s  # (r_s.T @ d) for each ray
        t = ray_box_entry(o_local, d_local, half)
        sub = depth[np.ix_(rows, cols)]
        depth[np.ix_(rows, cols)] = np.minimum(sub, t)
    depth = np.where(depth <= sm.max_range, depth, NO_RETURN)
    return RangeImage(depth, pose, sm)


def render_brute_force(scene: Scene, frame: int, sm: SensorModel) -> np.ndarray:
    """Reference renderer: every pixel against every part, no culling."""
    pose = scene.sensor_pose(frame)
    inv = pose.inverse()
    dirs = sm.directions()
    depth = np.full((sm.rows, sm.cols), np.inf)
    for cw, rw, half in _world_parts(scene, frame):
        c_s = inv.apply(cw)
        r_s = inv.rotation @ rw
        depth = np.minimum(depth, ray_box_entry(r_s.T @ (-c_s), dirs @ r_s, half))
    return np.where(depth <= sm.max_range, depth, NO_RETURN)


def range_image_pixels(ri: RangeImage):
    """(v, u, depth) of every returning pixel, row-major order."""
    v, u = np.nonzero(ri.depths >= 0)
    return v, u, ri.depths[v, u]


def range_image_to_points(ri: RangeImage, sm: Optional[SensorModel] = None) -> PointCloud:
    sm = sm or ri.sensor
    v, u, d = range_image_pixels(ri)
    dirs = sm.directions()[v, u]
    pts_s = dirs * d[:, None]
    return PointCloud(ri.sensor_pose.apply(pts_s), "world")


# ---------------------------------------------------------------------------
# simulation log


@dataclass
class SimFrame:
    index: int
    timestamp: float
    range_image: RangeImage
    points: PointCloud
    boxes: dict[int, Box7]
    ego_pose: RigidTransform


@dataclass
class SimLog:
    sensor: SensorModel
    frames: list[SimFrame]
    shapes: dict[int, ShapePrimitiveSet]
    frame_period: float
    scene_hash: str = ""
    seed: int = 0

    @property
    def track_ids(self) -> list[int]:
        return sorted(self.shapes)

    def track_boxes(self, track_id: int) -> list[Box7]:
        if track_id not in self.shapes:
            raise KeyError(f"unknown track id {track_id}")
        return [f.boxes[track_id] for f in self.frames]


def simulate(scene: Scene, sm: SensorModel, seed: int = 0, depth_noise: float = 0.0) -> SimLog:
    """Render every frame; ``depth_noise`` (m, Gaussian) is drawn from ``seed`` and off by default."""
    rng = np.random.default_rng(seed)
    frames = []
    for t in range(scene.num_frames):
        ri = render_range_image(scene, t, sm)
        if depth_noise > 0:
            hit = ri.depths >= 0
            noisy = ri.depths + rng.normal(0.0, depth_noise, ri.depths.shape)
            ri.depths = np.where(hit, np.clip(noisy, 1e-3, sm.max_range), NO_RETURN)
        frames.append(
            SimFrame(
                t,
                t * scene.frame_period,
                ri,
                range_image_to_points(ri, sm),
                {a.track_id: a.poses[t] for a in scene.actors},
                scene.ego_poses[t],
            )
        )
    return SimLog(sm, frames, {a.track_id: a.shape for a in scene.actors}, scene.frame_period, scene_hash(scene), seed)


def shape_voxelize(shape: ShapePrimitiveSet, box: Box7, voxel: float) -> np.ndarray:
    """Boolean (nx, ny, nz) grid: voxel occupied iff its center lies in the union of parts."""
    from .annotation import grid_dims, voxel_centers

    if voxel <= 0:
        raise ValueError("voxel must be positive")
    dims = grid_dims(box.dims, voxel)
    centers = voxel_centers(box.dims, voxel)
    return shape.contains(centers.reshape(-1, 3)).reshape(dims)


# ---------------------------------------------------------------------------
# binary formats


def write_range_image(path, ri: RangeImage) -> None:
    sm = ri.sensor
    header = RANGE_MAGIC + struct.pack("<IIfff", sm.rows, sm.cols, sm.el_min, sm.el_max, sm.max_range)
    Path(path).write_bytes(header + ri.depths.astype("<f4").tobytes())


def read_range_image(path, sensor_pose: Optional[RigidTransform] = None) -> RangeImage:
    """Read an OCRI file. The header's f32 sensor fields are widened back to float64."""
    blob = Path(path).read_bytes()
    if blob[:4] != RANGE_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {RANGE_MAGIC!r}")
    rows, cols, el_min, el_max, max_range = struct.unpack_from("<IIfff", blob, 4)
    n = rows * cols
    if len(blob) != 24 + 4 * n:
        raise FormatError(f"{path}: expected {24 + 4 * n} bytes, found {len(blob)}")
    depths = np.frombuffer(blob, dtype="<f4", offset=24).astype(np.float64).reshape(rows, cols)
    sm = SensorModel(rows, cols, float(el_min), float(el_max), float(max_range))
    return RangeImage(depths, sensor_pose or RigidTransform.identity("sensor", "world"), sm)


def _pose_json(t: RigidTransform) -> list:
    return t.as_matrix().tolist()


def _pose_from_json(m, source=None, target=None) -> RigidTransform:
    m = np.asarray(m, dtype=np.float64)
    return RigidTransform(m[:3, :3], m[:3, 3], source, target)


def save_simlog(log: SimLog, out_dir) -> list[Path]:
    """Write log.json + one OCRI file per frame. Returns the written paths."""
    out = Path(out_dir)
    (out / "range").mkdir(parents=True, exist_ok=True)
    written = []
    frames = []
    for f in log.frames:
        p = out / "range" / f"{f.index:06d}.ocri"
        write_range_image(p, f.range_image)
        written.append(p)
        frames.append(
            {
                "index": f.index,
                "timestamp": f.timestamp,
                "range_image": p.relative_to(out).as_posix(),
                "sensor_pose": _pose_json(f.range_image.sensor_pose),
                "ego_pose": _pose_json(f.ego_pose),
                "boxes": {str(k): b.to_array().tolist() for k, b in sorted(f.boxes.items())},
            }
        )
    doc = {
        "format": "occforge-simlog/1",
        "sensor": log.sensor.to_json(),
        "frame_period": log.frame_period,
        "scene_hash": log.scene_hash,
        "seed": log.seed,
        "shapes": {str(k): s.to_json() for k, s in sorted(log.shapes.items())},
        "frames": frames,
    }
    p = out / "log.json"
    p.write_text(json.dumps(doc, indent=1, sort_keys=True))
    written.append(p)
    return written


def load_simlog(path) -> SimLog:
    root = Path(path)
    doc = json.loads((root / "log.json").read_text())
    sm = SensorModel.from_json(doc["sensor"])
    frames = []
    for f in doc["frames"]:
        pose = _pose_from_json(f["sensor_pose"], "sensor", "world")
        ri = read_range_image(root / f["range_image"], pose)
        # keep the log's float64 sensor geometry; the file header only carries f32 copies
        ri.sensor = sm
        frames.append(
            SimFrame(
                f["index"],
                f["timestamp"],
                ri,
                range_image_to_points(ri, sm),
                {int(k): Box7.from_array(v) for k, v in f["boxes"].items()},
                _pose_from_json(f["ego_pose"]),
            )
        )
    shapes = {int(k): ShapePrimitiveSet.from_json(v) for k, v in doc["shapes"].items()}
    return SimLog(sm, frames, shapes, doc["frame_period"], doc["scene_hash"], doc["seed"])


def scene_from_log(log: SimLog) -> Scene:
    """Reconstruct the renderable scene (actors + sensor poses) from a log, for oracles."""
    ego = [f.ego_pose for f in log.frames]
    mount = log.frames[0].ego_pose.inverse().compose(log.frames[0].range_image.sensor_pose)
    mount = RigidTransform(mount.rotation, mount.translation)
    actors = [Actor(k, s, log.track_boxes(k)) for k, s in sorted(log.shapes.items())]
    return Scene(ego, actors, log.frame_period, mount)
