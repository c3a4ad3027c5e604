"""Rigid transforms, yaw-only 7-DoF boxes, framed point clouds and rotated-box IoU.

Box frame convention used across the package: origin at the box center,
+x along the heading (yaw), +y to the left, +z up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

FRAMES = ("sensor", "world", "box-local")

_ORTHO_TOL = 1e-9


class GeometryError(ValueError):
    """Raised for invalid transforms, degenerate boxes and frame mismatches."""


def wrap_angle(a):
    """Normalize angle(s) into (-pi, pi]."""
    return math.pi - np.mod(math.pi - np.asarray(a, dtype=np.float64), 2.0 * math.pi)


def yaw_matrix(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """p' = rotation @ p + translation.

    ``source``/``target`` optionally tag the frames the transform maps between;
    when ``source`` is set, :func:`transform_points` refuses clouds in any other frame.
    """

    rotation: np.ndarray
    translation: np.ndarray
    source: Optional[str] = None
    target: Optional[str] = None

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise GeometryError("invalid transform: non-finite entries")
        if np.abs(r.T @ r - np.eye(3)).max() > _ORTHO_TOL or abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
            raise GeometryError("invalid transform: rotation is not orthonormal with det +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls, source=None, target=None) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3), source, target)

    @classmethod
    def from_yaw(cls, yaw: float, translation, source=None, target=None) -> "RigidTransform":
        return cls(yaw_matrix(yaw), translation, source, target)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation, self.target, self.source)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
            other.source,
            self.target,
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


@dataclass(frozen=True, eq=False)
class Box7:
    """Yaw-only 3D box: center (m), dims length/width/height (m), yaw (rad)."""

    center: np.ndarray
    dims: np.ndarray
    yaw: float = 0.0

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        d = np.asarray(self.dims, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(c)) or not np.all(np.isfinite(d)) or not math.isfinite(self.yaw):
            raise GeometryError("box has non-finite fields")
        if np.any(d <= 0):
            raise GeometryError(f"box dims must be strictly positive, got {d.tolist()}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "dims", d)
        object.__setattr__(self, "yaw", float(wrap_angle(self.yaw)))

    @classmethod
    def from_array(cls, a) -> "Box7":
        a = np.asarray(a, dtype=np.float64).reshape(7)
        return cls(a[:3], a[3:6], float(a[6]))

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.center, self.dims, [self.yaw]])

    @property
    def volume(self) -> float:
        return float(np.prod(self.dims))

    def corners_bev(self) -> np.ndarray:
        """Footprint corners (4, 2), counter-clockwise."""
        l, w = self.dims[0] / 2, self.dims[1] / 2
        local = np.array([[l, w], [-l, w], [-l, -w], [l, -w]])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + self.center[:2]

    def corners(self) -> np.ndarray:
        """All eight corners (8, 3) in the box's parent frame."""
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
        return box_to_local(self).inverse().apply(signs * self.dims / 2)


@dataclass
class PointCloud:
    points: np.ndarray
    frame: str = "world"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise GeometryError("point cloud has non-finite coordinates")
        if self.frame not in FRAMES:
            raise GeometryError(f"unknown frame tag {self.frame!r}")
        self.points = pts

    def __len__(self) -> int:
        return len(self.points)


def transform_points(t: RigidTransform, pc: PointCloud) -> PointCloud:
    if t.source is not None and t.source != pc.frame:
        raise GeometryError(f"frame mismatch: transform expects {t.source!r}, cloud is {pc.frame!r}")
    return PointCloud(t.apply(pc.points), t.target or pc.frame)


def box_to_local(b: Box7) -> RigidTransform:
    """World (parent) → box-local transform."""
    rt = yaw_matrix(b.yaw).T
    return RigidTransform(rt, -rt @ b.center, "world", "box-local")


def local_coords(points: np.ndarray, b: Box7) -> np.ndarray:
    """Array-level shortcut for box_to_local(b).apply(points)."""
    c, s = math.cos(b.yaw), math.sin(b.yaw)
    d = np.asarray(points, dtype=np.float64) - b.center
    out = np.empty_like(d)
    out[:, 0] = c * d[:, 0] + s * d[:, 1]
    out[:, 1] = -s * d[:, 0] + c * d[:, 1]
    out[:, 2] = d[:, 2]
    return out


def in_box_mask(points: np.ndarray, b: Box7, margin: float = 0.0) -> np.ndarray:
    loc = local_coords(points, b)
    half = b.dims / 2 + margin
    return np.all(np.abs(loc) <= half, axis=1)


def points_in_box(pc: PointCloud, b: Box7, margin: float = 0.0) -> PointCloud:
    """Points of a world-frame cloud inside ``b`` grown by ``margin`` (boundary inclusive)."""
    if pc.frame != "world":
        raise GeometryError(f"frame mismatch: points_in_box needs a world cloud, got {pc.frame!r}")
    return PointCloud(pc.points[in_box_mask(pc.points, b, margin)], "world")


def relative_pose(src: Box7, dst: Box7) -> RigidTransform:
    """Transform taking ``src``-local coordinates to ``dst``-local coordinates."""
    return box_to_local(dst).compose(box_to_local(src).inverse())


# ---------------------------------------------------------------------------
# rotated-box IoU


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_convex(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by convex CCW polygon ``clipper``."""
    out = [tuple(p) for p in subject]
    n = len(clipper)
    for i in range(n):
        if not out:
            break
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, out = out, []
        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    t = sp / (sp - sc)
                    out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                out.append(cur)
            elif sp >= 0:
                t = sp / (sp - sc)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, sp = cur, sc
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def box_intersection_volume(a: Box7, b: Box7) -> float:
    za0, za1 = a.center[2] - a.dims[2] / 2, a.center[2] + a.dims[2] / 2
    zb0, zb1 = b.center[2] - b.dims[2] / 2, b.center[2] + b.dims[2] / 2
    dz = min(za1, zb1) - max(za0, zb0)
    if dz <= 0:
        return 0.0
    # cheap reject on circumscribed circles
    ra = 0.5 * math.hypot(a.dims[0], a.dims[1])
    rb = 0.5 * math.hypot(b.dims[0], b.dims[1])
    if math.hypot(*(a.center[:2] - b.center[:2])) > ra + rb:
        return 0.0
    area = polygon_area(clip_convex(a.corners_bev(), b.corners_bev()))
    return area * dz


def box_iou_3d(a: Box7, b: Box7) -> float:
    va, vb = a.volume, b.volume
    if va <= 0 or vb <= 0:
        raise GeometryError("degenerate box in IoU")
    # canonical argument order keeps iou(a, b) == iou(b, a) bit-exactly
    if tuple(b.to_array()) < tuple(a.to_array()):
        a, b = b, a
        va, vb = vb, va
    inter = box_intersection_volume(a, b)
    union = va + vb - inter
    return float(min(max(inter / union, 0.0), 1.0))


def box_iou_matrix(a: list[Box7], b: list[Box7]) -> np.ndarray:
    out = np.zeros((len(a), len(b)))
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            out[i, j] = box_iou_3d(x, y)
    return out
