"""Noisy tracklet generation, length regularization, RoI↔GT matching and query sampling."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .annotation import FREE, OCCUPIED, OccGrid
from .geometry import Box7, box_iou_3d, in_box_mask, relative_pose
from .simulator import FormatError, SimLog

CROP_MARGIN = 1.0
SOURCE_MARGIN = 2.0


@dataclass
class TrackFrame:
    frame_id: int
    timestamp: float
    points: np.ndarray  # (N, 3) world frame
    proposal: Box7
    valid: bool = True
    gt_track: Optional[int] = None


@dataclass
class Tracklet:
    track_id: str
    frames: list[TrackFrame]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ts = [f.timestamp for f in self.frames]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError(f"tracklet {self.track_id}: timestamps must be strictly increasing")

    def __len__(self):
        return len(self.frames)

    @property
    def valid_mask(self) -> np.ndarray:
        return np.array([f.valid for f in self.frames], dtype=bool)


@dataclass(frozen=True)
class NoiseConfig:
    """Per-frame proposal noise. ``center_rel`` scales with box dims per axis."""

    center_rel: float = 0.1
    size_log_sigma: float = 0.05
    yaw_sigma_deg: float = 2.0
    drift_sigma: float = 0.0  # per-frame random-walk step on the center (m)
    p_drop: float = 0.05

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"noise parameter {k} must be non-negative, got {v}")
        if self.p_drop > 1:
            raise ValueError("p_drop must be a probability")

    @classmethod
    def clean(cls) -> "NoiseConfig":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_json(cls, d: dict) -> "NoiseConfig":
        return cls(**{k: float(v) for k, v in d.items() if k in cls.__dataclass_fields__})


def gt_tracklet(log: SimLog, track_id: int, margin: float = SOURCE_MARGIN) -> Tracklet:
    """Ground-truth tracklet: proposals are the GT boxes, points cropped to box + margin."""
    frames = []
    for f, b in zip(log.frames, log.track_boxes(track_id)):
        pts = f.points.points
        frames.append(TrackFrame(f.index, f.timestamp, pts[in_box_mask(pts, b, margin)], b, True, track_id))
    return Tracklet(f"{track_id}", frames, {"gt_track": int(track_id), "scene_hash": log.scene_hash})


def perturb_tracklet(gt: Tracklet, noise: NoiseConfig, seed: int) -> Tracklet:
    """Independent per-frame box noise (+ optional drift and frame drops); points untouched."""
    rng = np.random.default_rng(seed)
    T = len(gt.frames)
    z = rng.standard_normal((T, 3))
    s = rng.standard_normal((T, 3))
    y = rng.standard_normal(T)
    w = rng.standard_normal((T, 3))
    drop = rng.uniform(size=T) < noise.p_drop
    if drop.all():
        drop[-1] = False
    drift = np.cumsum(w * noise.drift_sigma, axis=0)
    frames = []
    for t, f in enumerate(gt.frames):
        b = f.proposal
        center = b.center + z[t] * noise.center_rel * b.dims + drift[t]
        dims = b.dims * np.exp(noise.size_log_sigma * s[t])
        yaw = b.yaw + math.radians(noise.yaw_sigma_deg) * y[t]
        nb = Box7(center, dims, yaw)
        frames.append(replace(f, proposal=nb, valid=f.valid and not drop[t]))
    meta = dict(gt.meta, noise=asdict(noise), seed=int(seed))
    return Tracklet(gt.track_id, frames, meta)


def crop_to_proposals(t: Tracklet, margin: float = CROP_MARGIN) -> Tracklet:
    frames = [replace(f, points=f.points[in_box_mask(f.points, f.proposal, margin)]) for f in t.frames]
    return Tracklet(t.track_id, frames, dict(t.meta, crop_margin=margin))


def make_input_tracklet(source: Tracklet, noise: NoiseConfig, seed: int, margin: float = CROP_MARGIN) -> Tracklet:
    """Network input: perturb a wide-margin GT tracklet then crop around the noisy proposals."""
    return crop_to_proposals(perturb_tracklet(source, noise, seed), margin)


@dataclass
class PaddedWindow:
    """Fixed-length slice of a tracklet; ``frames[i] is None`` marks front padding."""

    frames: list[Optional[TrackFrame]]
    mask: np.ndarray  # 1 = real frame, 0 = padding
    start: int  # index of the first real frame in the source tracklet


def regularize_length(t: Tracklet, max_len: int = 32) -> list[PaddedWindow]:
    """Cut into consecutive max_len windows; front-pad the last (or only) short one."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    out = []
    for start in range(0, len(t.frames), max_len):
        chunk = t.frames[start : start + max_len]
        pad = max_len - len(chunk)
        mask = np.array([0] * pad + [1] * len(chunk), dtype=np.int8)
        out.append(PaddedWindow([None] * pad + list(chunk), mask, start))
    return out


def match_roi_to_gt(proposal: Box7, gts: Sequence[Box7]) -> Optional[tuple[int, float]]:
    """Index and IoU of the best-overlapping GT, or None when nothing overlaps."""
    best, best_iou = None, 0.0
    for i, g in enumerate(gts):
        iou = box_iou_3d(proposal, g)
        if iou > best_iou:
            best, best_iou = i, iou
    return None if best is None else (best, best_iou)


@dataclass
class QueryBatch:
    positions: np.ndarray  # (n, 3) RoI-local
    labels: np.ndarray  # (n,) 1 occupied, 0 free
    extrapolated: np.ndarray  # (n,) position lies outside the RoI extents


class QueryPool:
    """Occupied / free voxel centers of one GT grid, precomputed for repeated sampling."""

    def __init__(self, gt_grid: OccGrid):
        cells = gt_grid.cells.reshape(-1)
        self.occ = np.nonzero(cells == OCCUPIED)[0]
        self.free = np.nonzero(cells == FREE)[0]
        if len(self.occ) == 0 and len(self.free) == 0:
            raise ValueError("grid has neither occupied nor free voxels")
        self.centers = gt_grid.centers().reshape(-1, 3)

    def sample(self, roi: Box7, gt_box: Box7, n: int, rng: np.random.Generator) -> QueryBatch:
        half = n // 2
        if len(self.occ) == 0:
            counts = (0, n)
        elif len(self.free) == 0:
            counts = (n, 0)
        else:
            counts = (half, n - half)
        picks = [rng.choice(pool, size=k, replace=len(pool) < k) for pool, k in zip((self.occ, self.free), counts) if k]
        idx = np.concatenate(picks)
        labels = np.concatenate([np.ones(counts[0]), np.zeros(counts[1])])
        pos = relative_pose(gt_box, roi).apply(self.centers[idx])
        outside = np.any(np.abs(pos) > roi.dims / 2, axis=1)
        return QueryBatch(pos, labels, outside)


def sample_queries(gt_grid: OccGrid, roi: Box7, gt_box: Box7, n: int = 1024, seed=0) -> QueryBatch:
    """Balanced occupied/free voxel centers of the GT grid, expressed in the RoI frame.

    A class with fewer voxels than its half is drawn with replacement; when one class
    is empty the other fills all ``n`` slots. Unobserved voxels are never drawn.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return QueryPool(gt_grid).sample(roi, gt_box, n, rng)


# ---------------------------------------------------------------------------
# dataset on disk


def _frame_blob(f: TrackFrame) -> bytes:
    pts = np.asarray(f.points, dtype="<f4").reshape(-1, 3)
    return (
        struct.pack("<I", len(pts))
        + pts.tobytes()
        + np.asarray(f.proposal.to_array(), dtype="<f4").tobytes()
        + struct.pack("<B", 1 if f.valid else 0)
    )


def _parse_frame_blob(blob: bytes, name: str):
    if len(blob) < 4:
        raise FormatError(f"{name}: truncated frame blob")
    (n,) = struct.unpack_from("<I", blob, 0)
    need = 4 + 12 * n + 28 + 1
    if len(blob) != need:
        raise FormatError(f"{name}: expected {need} bytes, found {len(blob)}")
    pts = np.frombuffer(blob, dtype="<f4", count=3 * n, offset=4).astype(np.float64).reshape(n, 3)
    box = np.frombuffer(blob, dtype="<f4", count=7, offset=4 + 12 * n).astype(np.float64)
    valid = blob[-1] == 1
    return pts, box, valid


def quantize_tracklet(t: Tracklet) -> Tracklet:
    """Round points and proposals through float32, as stored on disk."""
    frames = []
    for f in t.frames:
        pts, box, valid = _parse_frame_blob(_frame_blob(f), "<memory>")
        frames.append(replace(f, points=pts, proposal=Box7.from_array(box), valid=valid))
    return Tracklet(t.track_id, frames, dict(t.meta))


def save_tracklets(tracklets: Sequence[Tracklet], out_dir, noise: Optional[NoiseConfig] = None, extra=None) -> list[Path]:
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    written, entries = [], []
    for t in tracklets:
        tdir = root / "frames" / t.track_id
        tdir.mkdir(parents=True, exist_ok=True)
        frames = []
        for f in t.frames:
            p = tdir / f"{f.frame_id:06d}.bin"
            p.write_bytes(_frame_blob(f))
            written.append(p)
            frames.append({"frame_id": f.frame_id, "timestamp": f.timestamp, "file": p.relative_to(root).as_posix(), "gt_track": f.gt_track})
        entries.append({"name": t.track_id, "num_frames": len(t.frames), "meta": t.meta, "frames": frames})
    index = {
        "format": "occforge-tracklets/1",
        "noise": asdict(noise) if noise else None,
        "tracklets": entries,
        **(extra or {}),
    }
    p = root / "index.json"
    p.write_text(json.dumps(index, indent=1, sort_keys=True))
    written.append(p)
    return written


def load_tracklets(path) -> list[Tracklet]:
    root = Path(path)
    index = json.loads((root / "index.json").read_text())
    out = []
    for e in index["tracklets"]:
        frames = []
        for fr in e["frames"]:
            pts, box, valid = _parse_frame_blob((root / fr["file"]).read_bytes(), str(root / fr["file"]))
            frames.append(TrackFrame(fr["frame_id"], fr["timestamp"], pts, Box7.from_array(box), valid, fr.get("gt_track")))
        out.append(Tracklet(e["name"], frames, e.get("meta", {})))
    return out
