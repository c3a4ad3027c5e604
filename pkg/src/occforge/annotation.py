"""Object-centric occupancy annotation: aggregate → voxelize → occlusion reasoning."""

from __future__ import annotations

import json
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import Box7, in_box_mask, local_coords, yaw_matrix
from .simulator import FormatError, SensorModel, SimLog

FREE, OCCUPIED, UNOBSERVED = 0, 1, 2
GRID_MAGIC = b"OCOG"
DEFAULT_VOXEL = 0.2

# guards ceil() against l / voxel landing a hair above an integer (4.0 / 0.2 = 20.000000000000004)
_CEIL_EPS = 1e-9


def grid_dims(box_dims, voxel: float) -> tuple[int, int, int]:
    d = np.asarray(box_dims, dtype=np.float64) / voxel
    return tuple(max(1, int(math.ceil(x - _CEIL_EPS))) for x in d)


def voxel_centers(box_dims, voxel: float) -> np.ndarray:
    """(nx, ny, nz, 3) voxel centers in the box frame."""
    dims = np.asarray(box_dims, dtype=np.float64)
    nx, ny, nz = grid_dims(dims, voxel)
    axes = [-dims[a] / 2 + (np.arange(n) + 0.5) * voxel for a, n in enumerate((nx, ny, nz))]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def voxel_index(local_points: np.ndarray, box_dims, voxel: float):
    """Half-open cell index of each point and whether it falls inside the grid."""
    dims = np.asarray(box_dims, dtype=np.float64)
    shape = np.array(grid_dims(dims, voxel))
    idx = np.floor((np.asarray(local_points, dtype=np.float64) + dims / 2) / voxel).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < shape), axis=1)
    return idx, inside


@dataclass
class OccGrid:
    """Tri-state grid; ``cells`` holds FREE / OCCUPIED / UNOBSERVED codes, shape (nx, ny, nz)."""

    cells: np.ndarray
    voxel: float
    box_dims: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.uint8)
        self.box_dims = np.asarray(self.box_dims, dtype=np.float64).reshape(3)
        if self.cells.ndim != 3:
            raise ValueError("cells must be 3-D")
        if np.any(self.cells > UNOBSERVED):
            raise ValueError("cells hold an invalid state code")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.cells.shape)

    def centers(self) -> np.ndarray:
        c = voxel_centers(self.box_dims, self.voxel)
        if c.shape[:3] != self.cells.shape:
            raise ValueError("grid dims do not follow box_dims / voxel")
        return c

    def counts(self) -> dict[str, int]:
        return {
            "free": int(np.sum(self.cells == FREE)),
            "occupied": int(np.sum(self.cells == OCCUPIED)),
            "unobserved": int(np.sum(self.cells == UNOBSERVED)),
        }

    @classmethod
    def from_mask(cls, occupied: np.ndarray, voxel: float, box_dims, fill: int = FREE) -> "OccGrid":
        cells = np.where(occupied, OCCUPIED, fill).astype(np.uint8)
        return cls(cells, voxel, box_dims)


@dataclass
class AggregatedObjectCloud:
    points: np.ndarray  # (N, 3) box-local
    frame_ids: list[int]
    margin: float = 0.0


def aggregate_object_points(log: SimLog, track_id: int, margin: float = 0.0) -> AggregatedObjectCloud:
    """Concatenate every frame's in-box points, each mapped into that frame's box frame."""
    boxes = log.track_boxes(track_id)
    chunks, ids = [], []
    for f, b in zip(log.frames, boxes):
        pts = f.points.points
        sel = pts[in_box_mask(pts, b, margin)]
        if len(sel):
            chunks.append(local_coords(sel, b))
            ids.append(f.index)
    pts = np.concatenate(chunks) if chunks else np.zeros((0, 3))
    return AggregatedObjectCloud(pts, ids, margin)


def voxelize(cloud, box_dims, voxel: float) -> np.ndarray:
    """Occupied mask: a cell is occupied iff at least one point falls in [min, min + voxel)."""
    if voxel <= 0:
        raise ValueError("voxel must be positive")
    pts = cloud.points if isinstance(cloud, AggregatedObjectCloud) else np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    mask = np.zeros(grid_dims(box_dims, voxel), dtype=bool)
    if len(pts) == 0:
        return mask
    idx, inside = voxel_index(pts, box_dims, voxel)
    idx = idx[inside]
    mask[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return mask


def free_evidence(centers_local: np.ndarray, box: Box7, range_image, sm: SensorModel) -> np.ndarray:
    """True where a voxel center lies strictly in front of the range reading at its pixel."""
    world = centers_local @ yaw_matrix(box.yaw).T + box.center
    sensor_pts = range_image.sensor_pose.inverse().apply(world)
    v, u, r, in_fov = sm.project(sensor_pts)
    depth = range_image.effective()[v, u]
    return in_fov & (r < depth)


def occlusion_reason(
    mask: np.ndarray,
    log: SimLog,
    track_id: int,
    sm: Optional[SensorModel] = None,
    voxel: float = DEFAULT_VOXEL,
    frames=None,
) -> OccGrid:
    """Split unoccupied voxels into Free (seen through in some frame) and Unobserved.

    ``frames`` restricts the evidence to a subset of frame positions (default: all).
    """
    sm = sm or log.sensor
    boxes = log.track_boxes(track_id)
    dims = boxes[0].dims
    if tuple(mask.shape) != grid_dims(dims, voxel):
        raise ValueError(f"mask shape {mask.shape} does not match box dims {dims.tolist()} at voxel {voxel}")
    centers = voxel_centers(dims, voxel).reshape(-1, 3)
    flat = mask.reshape(-1)
    todo = np.nonzero(~flat)[0]
    free = np.zeros(len(flat), dtype=bool)
    for t in range(len(log.frames)) if frames is None else frames:
        f = log.frames[t]
        if f.range_image is None:
            raise ValueError(f"frame {t} has no range image")
        if len(todo) == 0:
            break
        seen = free_evidence(centers[todo], boxes[t], f.range_image, sm)
        free[todo[seen]] = True
        todo = todo[~seen]
    cells = np.full(len(flat), UNOBSERVED, dtype=np.uint8)
    cells[free] = FREE
    cells[flat] = OCCUPIED
    return OccGrid(cells.reshape(mask.shape), voxel, dims)


def annotate_track(log: SimLog, track_id: int, voxel: float = DEFAULT_VOXEL, frames=None) -> OccGrid:
    """aggregate → voxelize → occlusion_reason for one track (optionally a subset of frame positions)."""
    if frames is None:
        cloud = aggregate_object_points(log, track_id)
    else:
        boxes = log.track_boxes(track_id)
        pts = [local_coords(log.frames[t].points.points[in_box_mask(log.frames[t].points.points, boxes[t])], boxes[t]) for t in frames]
        cloud = AggregatedObjectCloud(np.concatenate(pts) if pts else np.zeros((0, 3)), list(frames))
    dims = log.track_boxes(track_id)[0].dims
    grid = occlusion_reason(voxelize(cloud, dims, voxel), log, track_id, voxel=voxel, frames=frames)
    grid.meta = {
        "track_id": int(track_id),
        "frame_span": [int(log.frames[0].index), int(log.frames[-1].index)],
        "scene_hash": log.scene_hash,
        "num_points": int(len(cloud.points)),
    }
    return grid


def annotate_objects(log: SimLog, voxel: float = DEFAULT_VOXEL, workers: int = 1) -> dict[int, OccGrid]:
    """Per-track tri-state grids; results do not depend on ``workers``."""
    ids = log.track_ids
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            grids = list(ex.map(lambda k: annotate_track(log, k, voxel), ids))
    else:
        grids = [annotate_track(log, k, voxel) for k in ids]
    return dict(zip(ids, grids))


# ---------------------------------------------------------------------------
# OCOG files


def pack_cells(cells: np.ndarray) -> bytes:
    flat = np.asarray(cells, dtype=np.uint8).reshape(-1, order="F")
    pad = (-len(flat)) % 4
    flat = np.concatenate([flat, np.zeros(pad, dtype=np.uint8)]).reshape(-1, 4)
    packed = flat[:, 0] | (flat[:, 1] << 2) | (flat[:, 2] << 4) | (flat[:, 3] << 6)
    return packed.astype(np.uint8).tobytes()


def unpack_cells(blob: bytes, dims) -> np.ndarray:
    n = int(np.prod(dims))
    b = np.frombuffer(blob, dtype=np.uint8)
    flat = np.stack([(b >> s) & 3 for s in (0, 2, 4, 6)], axis=1).reshape(-1)[:n]
    return flat.reshape(tuple(dims), order="F")


def grid_to_bytes(g: OccGrid) -> bytes:
    nx, ny, nz = g.dims
    header = GRID_MAGIC + struct.pack("<HHHf3f", nx, ny, nz, g.voxel, *g.box_dims)
    return header + pack_cells(g.cells)


def grid_from_bytes(blob: bytes, name: str = "<bytes>") -> OccGrid:
    if blob[:4] != GRID_MAGIC:
        raise FormatError(f"{name}: bad magic {blob[:4]!r}, expected {GRID_MAGIC!r}")
    nx, ny, nz, voxel, l, w, h = struct.unpack_from("<HHHf3f", blob, 4)
    n = nx * ny * nz
    body = blob[26:]
    if len(body) != (n + 3) // 4:
        raise FormatError(f"{name}: expected {(n + 3) // 4} cell bytes, found {len(body)}")
    cells = unpack_cells(body, (nx, ny, nz))
    if np.any(cells == 3):
        raise FormatError(f"{name}: reserved cell code present")
    return OccGrid(cells, float(voxel), [l, w, h])


def write_grid(path, g: OccGrid, sidecar: bool = True) -> list[Path]:
    path = Path(path)
    path.write_bytes(grid_to_bytes(g))
    out = [path]
    if sidecar and g.meta:
        side = path.with_suffix(".json")
        side.write_text(json.dumps(g.meta, indent=1, sort_keys=True))
        out.append(side)
    return out


def read_grid(path) -> OccGrid:
    path = Path(path)
    g = grid_from_bytes(path.read_bytes(), str(path))
    side = path.with_suffix(".json")
    if side.exists():
        g.meta = json.loads(side.read_text())
    return g


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("OCCFORGE_THREADS", "1")))
    except ValueError:
        return 1
