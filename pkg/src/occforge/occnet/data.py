"""Training examples: GT sources, per-epoch noisy windows, and batch assembly."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from ..annotation import OccGrid, annotate_objects
from ..simulator import SensorModel, SimLog, random_scene, simulate
from ..tracklets import (
    NoiseConfig,
    QueryPool,
    TrackFrame,
    Tracklet,
    crop_to_proposals,
    gt_tracklet,
    match_roi_to_gt,
    perturb_tracklet,
    regularize_length,
)
from .config import ModelConfig
from .features import box_features, frame_inputs, residual_target
from .losses import Targets
from .model import BOX_DIM, POINT_DIM, BatchArrays


@dataclass
class TrackSample:
    """One annotated object: wide-margin GT tracklet, per-frame GT boxes, and its GT grid."""

    name: str
    source: Tracklet
    gt_boxes: list
    grid: OccGrid
    pool: QueryPool


def build_track_samples(log: SimLog, grids: dict, prefix: str = "") -> list[TrackSample]:
    """Samples for every track whose grid holds at least one occupied voxel."""
    out = []
    for k in log.track_ids:
        g = grids[k]
        if g.counts()["occupied"] == 0:
            continue
        src = gt_tracklet(log, k)
        out.append(TrackSample(f"{prefix}{k}", src, log.track_boxes(k), g, QueryPool(g)))
    return out


@dataclass
class Window:
    """A run of consecutive real frames plus their GT boxes, ready for batching."""

    frames: list
    gt_boxes: list
    sample: Optional[TrackSample] = None


def input_tracklet(sample: TrackSample, noise: NoiseConfig, seed: int) -> Tracklet:
    return crop_to_proposals(perturb_tracklet(sample.source, noise, seed))


def sample_windows(sample: TrackSample, tracklet: Tracklet, cfg: ModelConfig, rng=None, crop_prob: float = 0.0) -> list[Window]:
    """Split into max_len windows; optionally replace each by a random contiguous sub-run."""
    out = []
    for w in regularize_length(tracklet, cfg.max_len):
        idx = [w.start + i for i in range(int(w.mask.sum()))]
        if rng is not None and rng.uniform() < crop_prob and len(idx) > 1:
            L = int(rng.integers(1, len(idx) + 1))
            s = int(rng.integers(0, len(idx) - L + 1))
            idx = idx[s : s + L]
        frames = [tracklet.frames[i] for i in idx]
        if not any(f.valid for f in frames):
            continue
        out.append(Window(frames, [sample.gt_boxes[i] for i in idx] if sample else [None] * len(idx), sample))
    return out


def thin_frames(t: Tracklet, prob: float, rng) -> Tracklet:
    """With probability ``prob`` per frame keep only a random 0-25% of its points."""
    if prob <= 0:
        return t
    frames = []
    for f in t.frames:
        if rng.uniform() < prob and len(f.points):
            keep = rng.permutation(len(f.points))[: int(len(f.points) * rng.uniform(0, 0.25))]
            f = replace(f, points=f.points[np.sort(keep)])
        frames.append(f)
    return Tracklet(t.track_id, frames, t.meta)


def epoch_windows(
    samples: Sequence[TrackSample], cfg: ModelConfig, noise: NoiseConfig, rng, clean_fraction: float, crop_prob: float, sparse_prob: float = 0.0
) -> list[Window]:
    out = []
    for s in samples:
        nz = NoiseConfig.clean() if rng.uniform() < clean_fraction else noise
        t = thin_frames(input_tracklet(s, nz, int(rng.integers(1 << 31))), sparse_prob, rng)
        out.extend(sample_windows(s, t, cfg, rng, crop_prob))
    return out


def window_inputs(frames: Sequence[TrackFrame], cfg: ModelConfig, rng=None):
    """Per-slot arrays for one window of real frames, positions counted from its first frame."""
    T, P = len(frames), cfg.points_per_frame
    ref = next(f.proposal for f in frames if f.valid)
    local = np.zeros((T, P, POINT_DIM))
    glob = np.zeros((T, P, POINT_DIM))
    pmask = np.zeros((T, P), dtype=bool)
    boxes = np.zeros((T, BOX_DIM))
    valid = np.array([f.valid for f in frames], dtype=bool)
    for j, f in enumerate(frames):
        if f.valid:
            local[j], glob[j], pmask[j] = frame_inputs(f.points, f.proposal, ref.center, P, rng)
            boxes[j] = box_features(f.proposal, ref)
    return local, glob, pmask, boxes, np.arange(T), valid


def make_batch(windows: Sequence[Window], cfg: ModelConfig, rng=None, with_targets: bool = True):
    """Front-pad windows to a common length; build inputs and (optionally) supervision."""
    B = len(windows)
    T = max(len(w.frames) for w in windows)
    P = cfg.points_per_frame
    arr = BatchArrays(
        np.zeros((B, T, P, POINT_DIM)),
        np.zeros((B, T, P, POINT_DIM)),
        np.zeros((B, T, P), dtype=bool),
        np.zeros((B, T, BOX_DIM)),
        np.zeros((B, T), dtype=np.int64),
        np.zeros((B, T), dtype=bool),
    )
    occ_rows, queries, labels, det_t, score_rows, score_t = [], [], [], [], [], []
    for b, w in enumerate(windows):
        L = len(w.frames)
        pad = T - L
        local, glob, pmask, boxes, pos, valid = window_inputs(w.frames, cfg, rng)
        sl = slice(pad, T)
        arr.local[b, sl], arr.glob[b, sl], arr.pmask[b, sl] = local, glob, pmask
        arr.boxes[b, sl], arr.pos[b, sl], arr.valid[b, sl] = boxes, pos, valid
        if not with_targets:
            continue
        for j, f in enumerate(w.frames):
            if not f.valid:
                continue
            row = b * T + pad + j
            gt = w.gt_boxes[j]
            m = match_roi_to_gt(f.proposal, [gt])
            score_rows.append(row)
            score_t.append(0.0 if m is None else m[1])
            if m is None:
                continue
            qb = w.sample.pool.sample(f.proposal, gt, cfg.n_queries, rng)
            occ_rows.append(row)
            queries.append(qb.positions)
            labels.append(qb.labels)
            det_t.append(residual_target(f.proposal, gt))
    if not with_targets:
        return arr, None
    n = cfg.n_queries
    tg = Targets(
        np.array(occ_rows, dtype=np.int64),
        np.array(queries).reshape(-1, n, 3),
        np.array(labels).reshape(-1, n),
        np.array(det_t).reshape(-1, 7),
        np.array(score_rows, dtype=np.int64),
        np.array(score_t),
    )
    return arr, tg


def desk_sensor() -> SensorModel:
    """56 beams over [-22, 6] degrees, 1024 columns."""
    return SensorModel(56, 1024, math.radians(-22.0), math.radians(6.0), 80.0)


def synthetic_samples(seeds: Sequence[int], sm: Optional[SensorModel] = None, voxel: float = 0.2, num_actors: int = 5, num_frames: int = 32) -> list[TrackSample]:
    """Simulate and annotate one random scene per seed."""
    sm = sm or desk_sensor()
    out = []
    for s in seeds:
        log = simulate(random_scene(int(s), num_frames, num_actors), sm, seed=int(s))
        out.extend(build_track_samples(log, annotate_objects(log, voxel), prefix=f"s{s}/"))
    return out
