"""Per-frame inference: dense occupancy decode, box refinement, and the non-learned baseline."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..annotation import OccGrid, voxel_centers, voxelize
from ..autodiff import Tensor
from ..geometry import Box7, local_coords, relative_pose
from ..tracklets import Tracklet
from .features import apply_residual, box_features, frame_inputs, logit_to_score
from .model import BOX_DIM, POINT_DIM, Model, causal_attend, decode_occupancy, detection_head, encode_roi, fuse_det, fuse_latents

THRESHOLD = 0.5


@dataclass
class FramePrediction:
    frame_id: int
    roi: Box7
    grid: OccGrid
    box: Box7
    score: float
    latent: Optional[np.ndarray] = None


def occupancy_probs(model: Model, z: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Decoder probabilities for (n, 3) RoI-frame queries under one latent."""
    dt = model.params["dec.0.wz"].data.dtype
    q = np.asarray(queries, dtype=np.float64).reshape(1, -1, 3)
    return decode_occupancy(model.params, model.cfg, Tensor(np.asarray(z, dtype=dt).reshape(1, -1)), q).data[0]


def _binarize(p: np.ndarray, shape, voxel, dims) -> OccGrid:
    return OccGrid.from_mask((p >= THRESHOLD).reshape(shape), voxel, dims)


def dense_decode(model: Model, z: np.ndarray, roi: Box7, voxel: Optional[float] = None) -> OccGrid:
    """Decode every voxel center of the RoI grid; Occupied where p >= 0.5, Free elsewhere."""
    voxel = voxel or model.cfg.voxel
    c = voxel_centers(roi.dims, voxel)
    return _binarize(occupancy_probs(model, z, c.reshape(-1, 3)), c.shape[:3], voxel, roi.dims)


def extrapolate_to_gt(model: Model, z: np.ndarray, roi: Box7, gt_box: Box7, voxel: Optional[float] = None) -> OccGrid:
    """Decode at every GT-box voxel center carried into the RoI frame, inside the RoI or not."""
    voxel = voxel or model.cfg.voxel
    c = voxel_centers(gt_box.dims, voxel)
    q = relative_pose(gt_box, roi).apply(c.reshape(-1, 3))
    return _binarize(occupancy_probs(model, z, q), c.shape[:3], voxel, gt_box.dims)


class _FrameEncoder:
    """Per-frame latents, each computed on its own so results never depend on neighbours."""

    def __init__(self, model: Model, t: Tracklet):
        self.model = model
        self.t = t
        self._local: dict = {}
        self._glob: dict = {}
        P = model.cfg.points_per_frame
        self._empty = {b: self._enc(np.zeros((P, POINT_DIM)), np.zeros(P, dtype=bool), b) for b in ("local", "global")}

    def _enc(self, feats, mask, branch):
        return encode_roi(self.model.params, self.model.cfg, feats[None], mask[None], branch).data[0]

    def _inputs(self, j, r):
        f = self.t.frames[j]
        return frame_inputs(f.points, f.proposal, self.t.frames[r].proposal.center, self.model.cfg.points_per_frame)

    def local(self, j):
        if not self.t.frames[j].valid:
            return self._empty["local"]
        if j not in self._local:
            loc, _, m = self._inputs(j, j)
            self._local[j] = self._enc(loc, m, "local")
        return self._local[j]

    def glob(self, j, r):
        if self.model.cfg.single_branch:
            return self.local(j)
        if not self.t.frames[j].valid:
            return self._empty["global"]
        if (j, r) not in self._glob:
            _, g, m = self._inputs(j, r)
            self._glob[(j, r)] = self._enc(g, m, "global")
        return self._glob[(j, r)]


def _run_span(model: Model, enc: _FrameEncoder, idx: list, causal: bool):
    """Latent Z and detection output for every slot of one contiguous span."""
    params, cfg = model.params, model.cfg
    frames = enc.t.frames
    r = next(j for j in idx if frames[j].valid)
    ref = frames[r].proposal
    valid = np.array([frames[j].valid for j in idx])
    boxes = np.zeros((len(idx), BOX_DIM))
    for i, j in enumerate(idx):
        if valid[i]:
            boxes[i] = box_features(frames[j].proposal, ref)
    Zl = Tensor(np.stack([enc.local(j) for j in idx])[None])
    Zg = Tensor(np.stack([enc.glob(j, r) for j in idx])[None])
    pos = (np.asarray(idx) - idx[0])[None]
    Zgp = causal_attend(params, cfg, Zg, pos, boxes[None], valid[None], causal)
    Z = fuse_latents(params, Zl, Zgp)
    det = detection_head(params, fuse_det(params, Z, Zg))
    return Z.data[0], det.data[0]


def infer_tracklet(
    model: Model,
    t: Tracklet,
    window: Optional[int] = None,
    offline: bool = False,
    decode: bool = True,
    keep_latent: bool = True,
) -> list[FramePrediction]:
    """Predictions for every valid frame.

    Online mode runs one causal pass per frame over the last ``window`` frames (all
    history when None), so a frame's output never sees later frames. Offline mode
    attends across the whole tracklet in both directions.
    """
    if not t.frames:
        raise ValueError(f"tracklet {t.track_id} is empty")
    if window is not None and window < 1:
        raise ValueError("window must be >= 1")
    enc = _FrameEncoder(model, t)
    n = len(t.frames)
    out = []
    if offline:
        idx = list(range(n))
        Z, det = _run_span(model, enc, idx, causal=False)
        rows = {j: (Z[j], det[j]) for j in idx if t.frames[j].valid}
    else:
        rows = {}
        for j in range(n):
            if not t.frames[j].valid:
                continue
            s = 0 if window is None else max(0, j - window + 1)
            Z, det = _run_span(model, enc, list(range(s, j + 1)), causal=True)
            rows[j] = (Z[-1], det[-1])
    for j, (z, d) in rows.items():
        f = t.frames[j]
        grid = dense_decode(model, z, f.proposal) if decode else None
        box = apply_residual(f.proposal, d[:7])
        out.append(FramePrediction(f.frame_id, f.proposal, grid, box, logit_to_score(float(d[7])), z.copy() if keep_latent else None))
    return out


def baseline_complete(t: Tracklet, voxel: float = 0.2, window: Optional[int] = None) -> list[FramePrediction]:
    """Accumulate history points in each frame's proposal frame and voxelize into the current RoI."""
    if not t.valid_mask.any():
        raise ValueError(f"tracklet {t.track_id} has no valid frame")
    local = [local_coords(f.points, f.proposal) if f.valid else np.zeros((0, 3)) for f in t.frames]
    out = []
    for j, f in enumerate(t.frames):
        if not f.valid:
            continue
        s = 0 if window is None else max(0, j - window + 1)
        pts = np.concatenate(local[s : j + 1])
        grid = OccGrid.from_mask(voxelize(pts, f.proposal.dims, voxel), voxel, f.proposal.dims)
        out.append(FramePrediction(f.frame_id, f.proposal, grid, f.proposal, 1.0))
    return out

