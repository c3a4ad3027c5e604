"""Training objective: occupancy BCE + weighted box L1 + weighted score BCE."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..autodiff import Tensor, ops
from .config import ModelConfig
from .model import BatchArrays, decode_occupancy, forward


@dataclass
class Targets:
    """Supervision for one batch; ``*_rows`` index the flattened B*T slots."""

    occ_rows: np.ndarray  # (M,) matched slots
    queries: np.ndarray  # (M, n, 3) RoI-frame positions
    labels: np.ndarray  # (M, n)
    det_targets: np.ndarray  # (M, 7)
    score_rows: np.ndarray  # (V,) valid slots
    score_targets: np.ndarray  # (V,) IoU of proposal vs matched GT, 0 if unmatched


def compute_loss(
    occ_probs: Optional[Tensor],
    occ_labels,
    residuals: Optional[Tensor],
    residual_targets,
    score_probs: Tensor,
    score_targets,
    cfg: ModelConfig,
) -> tuple[Tensor, dict]:
    """L = L_occ + lambda_det * L_det + lambda_score * L_score, each a mean over its elements.

    Occupancy and box terms come from matched frames only (pass None when there are
    none); the score term covers every valid frame.
    """
    if score_probs is None or score_probs.data.size == 0:
        raise ValueError("loss needs at least one valid frame")
    l_score = ops.binary_cross_entropy(score_probs, score_targets)
    total = ops.scale(l_score, cfg.lambda_score)
    parts = {"score": float(l_score.data)}
    if occ_probs is not None and occ_probs.data.size:
        l_occ = ops.binary_cross_entropy(occ_probs, occ_labels)
        l_det = ops.l1_loss(residuals, residual_targets)
        total = ops.add(ops.add(l_occ, ops.scale(l_det, cfg.lambda_det)), total)
        parts["occ"] = float(l_occ.data)
        parts["det"] = float(l_det.data)
    else:
        parts["occ"] = parts["det"] = 0.0
    parts["total"] = float(total.data)
    return total, parts


def batch_loss(params, cfg: ModelConfig, batch: BatchArrays, tg: Targets) -> tuple[Tensor, dict]:
    out = forward(params, cfg, batch, causal=True)
    B, T = batch.shape
    Z = ops.reshape(out.Z, (B * T, cfg.c))
    det = ops.reshape(out.det, (B * T, 8))
    occ = res = None
    if len(tg.occ_rows):
        occ = decode_occupancy(params, cfg, ops.take_rows(Z, tg.occ_rows), tg.queries)
        res = ops.slice_last(ops.take_rows(det, tg.occ_rows), 0, 7)
    score = ops.sigmoid(ops.reshape(ops.slice_last(ops.take_rows(det, tg.score_rows), 7, 8), (len(tg.score_rows),)))
    return compute_loss(occ, tg.labels, res, tg.det_targets, score, tg.score_targets, cfg)
