"""Per-frame network inputs: decorated points, box encodings, and detection residuals."""

from __future__ import annotations

from typing import Optional

import numpy as np

from ..geometry import Box7, PointCloud, local_coords, wrap_angle, yaw_matrix

LOCAL_SCALE = 0.25
GLOBAL_SCALE = 0.1
QUERY_SCALE = 0.25


def face_offsets(local: np.ndarray, dims) -> np.ndarray:
    """Signed distances to the six faces: (+x, -x, +y, -y, +z, -z), positive inside."""
    half = np.asarray(dims, dtype=np.float64) / 2
    out = np.empty((len(local), 6))
    out[:, 0::2] = half - local
    out[:, 1::2] = half + local
    return out


def decorate_points(pc, roi: Box7) -> np.ndarray:
    """N x 9: RoI-frame coordinates followed by the six face offsets.

    Accepts a world or box-local :class:`PointCloud`, or a raw world-frame array.
    """
    if isinstance(pc, PointCloud):
        local = pc.points if pc.frame == "box-local" else local_coords(pc.points, roi)
    else:
        local = local_coords(np.asarray(pc, dtype=np.float64).reshape(-1, 3), roi)
    return np.concatenate([local, face_offsets(local, roi.dims)], axis=1)


def subsample(n: int, k: int, rng: Optional[np.random.Generator]) -> np.ndarray:
    """Indices of at most k of n points: random without replacement, or evenly spaced."""
    if n <= k:
        return np.arange(n)
    if rng is None:
        return np.unique(np.linspace(0, n - 1, k).round().astype(np.int64))
    return np.sort(rng.choice(n, size=k, replace=False))


def frame_inputs(points_world: np.ndarray, roi: Box7, ref: np.ndarray, P: int, rng=None):
    """Padded (P, 9) local and global features plus a (P,) validity mask."""
    idx = subsample(len(points_world), P, rng)
    pts = np.asarray(points_world, dtype=np.float64)[idx]
    loc = np.zeros((P, 9))
    glob = np.zeros((P, 9))
    mask = np.zeros(P, dtype=bool)
    if len(pts):
        dec = decorate_points(pts, roi)
        loc[: len(pts)] = dec * LOCAL_SCALE
        glob[: len(pts), :3] = (pts - ref) * GLOBAL_SCALE
        glob[: len(pts), 3:] = dec[:, 3:] * LOCAL_SCALE
        mask[: len(pts)] = True
    return loc, glob, mask


def box_features(box: Box7, ref: Box7) -> np.ndarray:
    """7-vector fed to the box embedding: recentred center, dims, yaw relative to the reference."""
    return np.concatenate(
        [(box.center - ref.center) * GLOBAL_SCALE, box.dims * LOCAL_SCALE, [float(wrap_angle(box.yaw - ref.yaw))]]
    )


def box_diag(b: Box7) -> float:
    return float(np.linalg.norm(b.dims))


def residual_target(roi: Box7, gt: Box7) -> np.ndarray:
    """Center delta in the RoI frame over the RoI diagonal, log size ratios, wrapped yaw delta."""
    d = local_coords(gt.center[None], roi)[0] / box_diag(roi)
    return np.concatenate([d, np.log(gt.dims / roi.dims), [float(wrap_angle(gt.yaw - roi.yaw))]])


def apply_residual(roi: Box7, r) -> Box7:
    r = np.asarray(r, dtype=np.float64)
    center = roi.center + yaw_matrix(roi.yaw) @ (r[:3] * box_diag(roi))
    return Box7(center, roi.dims * np.exp(np.clip(r[3:6], -2, 2)), roi.yaw + float(r[6]))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1 / (1 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1 + np.exp(-np.abs(x))))


def logit_to_score(x: float) -> float:
    return float(sigmoid(x))
