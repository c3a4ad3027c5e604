"""Occupancy IoU with hit/miss semantics, mIoU aggregation, and detection AP/APH."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .annotation import OCCUPIED, UNOBSERVED, OccGrid, grid_dims, voxel_centers
from .geometry import Box7, box_iou_3d, box_iou_matrix, local_coords, wrap_angle, yaw_matrix

RANGE_BINS = {"[0,30)": (0.0, 30.0), "[30,50)": (30.0, 50.0), "[50,inf)": (50.0, math.inf)}
DIFFICULTIES = ("L1", "L2", "all")


@dataclass
class OccEvalRecord:
    track_id: str
    frame_id: int
    iou: float
    intersection: int
    union: int
    ignored: int
    missed: int

    def __post_init__(self):
        if not 0.0 <= self.iou <= 1.0 or self.intersection > self.union:
            raise ValueError(f"inconsistent record {self}")


def occupancy_iou(pred: OccGrid, roi: Box7, gt: OccGrid, gt_box: Box7, track_id: str = "", frame_id: int = 0) -> Optional[OccEvalRecord]:
    """Two-step IoU of a RoI-frame prediction against a GT-frame grid.

    Each GT voxel center is carried into the RoI frame. Centers landing inside the
    prediction grid take the containing cell's state; centers outside it count as
    Free. GT-Unobserved voxels are skipped. Returns None when the RoI does not
    intersect the GT box (the pair is excluded, not scored).
    """
    if box_iou_3d(roi, gt_box) <= 0.0:
        return None
    if tuple(pred.cells.shape) != grid_dims(roi.dims, pred.voxel):
        raise ValueError(f"prediction grid {pred.cells.shape} does not follow RoI dims {roi.dims.tolist()}")
    g = gt.cells.reshape(-1)
    keep = g != UNOBSERVED
    centers = voxel_centers(gt.box_dims, gt.voxel).reshape(-1, 3)[keep]
    world = centers @ yaw_matrix(gt_box.yaw).T + gt_box.center
    local = local_coords(world, roi)
    idx = np.floor((local + roi.dims / 2) / pred.voxel).astype(np.int64)
    shape = np.array(pred.cells.shape)
    hit = np.all((idx >= 0) & (idx < shape), axis=1)
    p = np.zeros(len(local), dtype=bool)
    h = idx[hit]
    p[hit] = pred.cells[h[:, 0], h[:, 1], h[:, 2]] == OCCUPIED
    t = g[keep] == OCCUPIED
    inter = int(np.sum(p & t))
    union = int(np.sum(p | t))
    # empty-vs-empty agreement scores as perfect
    iou = inter / union if union else 1.0
    return OccEvalRecord(track_id, int(frame_id), iou, inter, union, int(np.sum(~keep)), int(np.sum(~hit)))


def aggregate_miou(records: Sequence[OccEvalRecord]) -> dict:
    recs = list(records)
    if not recs:
        raise ValueError("no records to aggregate")
    inter = sum(r.intersection for r in recs)
    union = sum(r.union for r in recs)
    by_track: dict[str, list[float]] = {}
    for r in recs:
        by_track.setdefault(r.track_id, []).append(r.iou)
    return {
        "IoU": inter / union if union else 1.0,
        "mIoU_box": float(np.mean([r.iou for r in recs])),
        "mIoU_track": float(np.mean([np.mean(v) for v in by_track.values()])),
        "num_records": len(recs),
        "num_tracks": len(by_track),
    }


# ---------------------------------------------------------------------------
# detection


@dataclass
class DetEvalRecord:
    frame_id: int
    det_boxes: list
    det_scores: np.ndarray
    gt_boxes: list
    gt_points: np.ndarray
    gt_ranges: np.ndarray
    det_ranges: Optional[np.ndarray] = None

    def __post_init__(self):
        self.det_scores = np.asarray(self.det_scores, dtype=np.float64).reshape(-1)
        self.gt_points = np.asarray(self.gt_points, dtype=np.int64).reshape(-1)
        self.gt_ranges = np.asarray(self.gt_ranges, dtype=np.float64).reshape(-1)
        if len(self.det_scores) != len(self.det_boxes) or len(self.gt_points) != len(self.gt_boxes):
            raise ValueError("box and attribute lengths differ")
        if np.any((self.det_scores < 0) | (self.det_scores > 1)):
            raise ValueError("scores must lie in [0, 1]")
        if self.det_ranges is None:
            self.det_ranges = np.array([math.hypot(b.center[0], b.center[1]) for b in self.det_boxes])


def heading_weight(det: Box7, gt: Box7) -> float:
    d = abs(float(wrap_angle(det.yaw - gt.yaw)))
    return min(1.0, max(0.0, 1.0 - d / math.pi))


def _gt_selected(rec: DetEvalRecord, difficulty: str, range_bin) -> np.ndarray:
    n = rec.gt_points
    if difficulty == "L1":
        sel = n > 5
    elif difficulty == "L2":
        sel = (n >= 1) & (n <= 5)
    elif difficulty == "all":
        sel = n >= 1
    else:
        raise ValueError(f"unknown difficulty {difficulty!r}")
    if range_bin is not None:
        lo, hi = RANGE_BINS[range_bin] if isinstance(range_bin, str) else range_bin
        sel &= (rec.gt_ranges >= lo) & (rec.gt_ranges < hi)
    return sel


def _in_bin(r: float, range_bin) -> bool:
    if range_bin is None:
        return True
    lo, hi = RANGE_BINS[range_bin] if isinstance(range_bin, str) else range_bin
    return lo <= r < hi


def match_frame(rec: DetEvalRecord, iou_thr: float):
    """Greedy score-descending assignment; returns the matched GT index per detection (-1 if none)."""
    order = sorted(range(len(rec.det_boxes)), key=lambda i: (-rec.det_scores[i], i))
    ious = box_iou_matrix(rec.det_boxes, rec.gt_boxes) if rec.gt_boxes else np.zeros((len(rec.det_boxes), 0))
    used = np.zeros(len(rec.gt_boxes), dtype=bool)
    match = np.full(len(rec.det_boxes), -1)
    for i in order:
        best, bj = -1.0, -1
        for j in range(len(rec.gt_boxes)):
            if not used[j] and ious[i, j] >= iou_thr and ious[i, j] > best:
                best, bj = ious[i, j], j
        if bj >= 0:
            used[bj] = True
            match[i] = bj
    return match


def detection_ap(
    records: Sequence[DetEvalRecord],
    iou_thr: float = 0.7,
    heading_weighted: bool = False,
    difficulty: str = "all",
    range_bin=None,
) -> float:
    """101-point interpolated AP (or APH) over all frames.

    GTs outside the difficulty / range filter are ignored; a detection matched to an
    ignored GT is dropped, and an unmatched detection counts as a false positive when
    its own range falls in the bin.
    """
    if not 0.0 < iou_thr < 1.0:
        raise ValueError("iou_thr must be in (0, 1)")
    entries = []  # (score, is_tp, heading weight)
    n_gt = 0
    for rec in records:
        sel = _gt_selected(rec, difficulty, range_bin)
        n_gt += int(sel.sum())
        match = match_frame(rec, iou_thr)
        for i, j in enumerate(match):
            s = float(rec.det_scores[i])
            if j >= 0:
                if sel[j]:
                    entries.append((s, True, heading_weight(rec.det_boxes[i], rec.gt_boxes[j])))
            elif _in_bin(float(rec.det_ranges[i]), range_bin):
                entries.append((s, False, 0.0))
    if n_gt == 0:
        return 0.0
    entries.sort(key=lambda e: -e[0])
    curve = []
    tp = fp = 0
    weights: list[float] = []
    for k, (s, is_tp, w) in enumerate(entries):
        if is_tp:
            tp += 1
            weights.append(w)
        else:
            fp += 1
        # one PR point per distinct score
        if k + 1 == len(entries) or entries[k + 1][0] != s:
            hits = math.fsum(weights) if heading_weighted else tp
            curve.append((hits / n_gt, hits / (tp + fp)))
    total = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        ps = [p for rc, p in curve if rc >= r]
        total += max(ps) if ps else 0.0
    return total / 101


def detection_report(records: Sequence[DetEvalRecord], iou_thr: float = 0.7) -> dict:
    out = {"iou_thr": iou_thr, "num_frames": len(records)}
    for diff in DIFFICULTIES:
        for rb in [None, *RANGE_BINS]:
            key = f"{diff}/{rb or 'overall'}"
            out[key] = {
                "AP": detection_ap(records, iou_thr, False, diff, rb),
                "APH": detection_ap(records, iou_thr, True, diff, rb),
                "num_gt": int(sum(_gt_selected(r, diff, rb).sum() for r in records)),
            }
    return out


def mean_box_iou(pairs: Iterable[tuple]) -> float:
    vals = [box_iou_3d(a, b) for a, b in pairs]
    if not vals:
        raise ValueError("no box pairs")
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# reports


def write_occ_report(path, summary: dict, records: Sequence[OccEvalRecord]) -> list[Path]:
    path = Path(path)
    path.write_text(json.dumps(summary, indent=1, sort_keys=True))
    csv_path = path.with_suffix(".csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(OccEvalRecord.__dataclass_fields__))
        w.writeheader()
        for r in records:
            w.writerow(asdict(r))
    return [path, csv_path]
