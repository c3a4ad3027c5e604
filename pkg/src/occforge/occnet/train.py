"""Seed-deterministic training loop with per-epoch noisy tracklets and validation IoU."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from ..autodiff import AdamState, NonFiniteGradient, Tape, adam_step, cosine_lr
from ..evaluation import occupancy_iou
from ..tracklets import NoiseConfig
from .config import ModelConfig, TrainConfig
from .data import TrackSample, epoch_windows, input_tracklet, make_batch
from .infer import dense_decode, infer_tracklet
from .losses import batch_loss
from .model import Model


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, checkpoint: Optional[Path] = None):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass
class TrainResult:
    model: Model
    history: list = field(default_factory=list)
    checkpoint: Optional[Path] = None

    @property
    def losses(self) -> list[float]:
        return [h["loss"] for h in self.history]


def validation_iou(model: Model, samples: Sequence[TrackSample], noise: NoiseConfig, seed: int = 0, stride: int = 4) -> float:
    """Mean two-step IoU over every ``stride``-th valid frame of noisy copies of ``samples``."""
    ious = []
    for k, s in enumerate(samples):
        t = input_tracklet(s, noise, seed + k)
        preds = infer_tracklet(model, t, decode=False)
        for p in preds[::stride]:
            i = next(i for i, f in enumerate(t.frames) if f.frame_id == p.frame_id)
            rec = occupancy_iou(dense_decode(model, p.latent, p.roi), p.roi, s.grid, s.gt_boxes[i])
            if rec is not None:
                ious.append(rec.iou)
    return float(np.mean(ious)) if ious else float("nan")


def _clip(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        f = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * f
    return norm


def train(
    train_samples: Sequence[TrackSample],
    val_samples: Sequence[TrackSample],
    cfg: ModelConfig,
    tcfg: TrainConfig,
    out_dir=None,
    log: Optional[Callable[[str], None]] = None,
) -> TrainResult:
    """Adam with cosine decay. Writes ``last.ckpt`` each epoch and ``model.ckpt`` at the end.

    A non-finite loss or gradient aborts with :class:`TrainingDiverged`, leaving the
    last finite-epoch checkpoint in place.
    """
    if not train_samples:
        raise ValueError("no training samples")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    model = Model.init(cfg, tcfg.seed)
    params = model.params
    state = AdamState()
    steps_per_epoch = None
    total = None
    result = TrainResult(model)
    last_good = None
    val = list(val_samples)[: tcfg.val_tracks]
    for epoch in range(tcfg.epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng([tcfg.seed, epoch])
        windows = epoch_windows(train_samples, cfg, tcfg.noise, rng, tcfg.clean_fraction, tcfg.crop_prob, tcfg.sparse_prob)
        order = rng.permutation(len(windows))
        batches = [order[i : i + tcfg.batch_size] for i in range(0, len(order), tcfg.batch_size)]
        if total is None:
            steps_per_epoch = len(batches)
            total = steps_per_epoch * tcfg.epochs
        sums: dict = {}
        for bi in batches:
            arr, tg = make_batch([windows[i] for i in bi], cfg, rng)
            with Tape() as tape:
                loss, parts = batch_loss(params, cfg, arr, tg)
            if not math.isfinite(parts["total"]):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}", last_good)
            raw = tape.backward(loss)
            grads = {t.name: g for t, g in raw.items() if t.name in params}
            _clip(grads, tcfg.clip_norm)
            try:
                adam_step(params, grads, state, cosine_lr(tcfg.lr, state.step, total, tcfg.min_lr), tcfg.betas)
            except NonFiniteGradient as exc:
                raise TrainingDiverged(str(exc), last_good) from exc
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
        entry = {"epoch": epoch + 1, "loss": sums["total"] / len(batches)}
        entry.update({k: v / len(batches) for k, v in sums.items() if k != "total"})
        entry["val_iou"] = validation_iou(model, val, tcfg.noise, seed=10_000, stride=tcfg.val_stride) if val else None
        entry["seconds"] = time.perf_counter() - t0
        result.history.append(entry)
        if log is not None:
            vi = "n/a" if entry["val_iou"] is None else f"{entry['val_iou']:.4f}"
            log(f"epoch {epoch + 1:3d}  loss {entry['loss']:.4f}  occ {entry['occ']:.4f}  det {entry['det']:.4f}  score {entry['score']:.4f}  val_iou {vi}  {entry['seconds']:.1f}s")
        if out is not None:
            last_good = model.save(out / "last.ckpt", {"epoch": epoch + 1})
    if out is not None:
        result.checkpoint = model.save(out / "model.ckpt", {"epochs": tcfg.epochs, "train": tcfg.to_json()})
    return result
