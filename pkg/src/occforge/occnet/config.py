"""Model and training configuration, with the desk-scale and full-scale presets."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

from ..tracklets import NoiseConfig


@dataclass(frozen=True)
class ModelConfig:
    e: int = 64
    c: Optional[int] = None  # fused dim; kept equal to e
    enc_widths: tuple = (64, 128)
    layers: int = 3
    heads: int = 2
    hidden: int = 128
    fuse_hidden: int = 128
    dec_widths: tuple = (128, 128)
    det_hidden: int = 128
    single_branch: bool = False
    max_len: int = 32
    n_queries: int = 256
    points_per_frame: int = 128
    lambda_det: float = 2.0
    lambda_score: float = 1.0
    voxel: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "enc_widths", tuple(int(w) for w in self.enc_widths))
        object.__setattr__(self, "dec_widths", tuple(int(w) for w in self.dec_widths))
        if self.c is None:
            object.__setattr__(self, "c", self.e)
        if self.e <= 0 or self.c <= 0:
            raise ValueError("e and c must be positive")
        if self.c != self.e:
            raise ValueError(f"fused dim c ({self.c}) must equal latent dim e ({self.e})")
        if self.hidden % self.heads:
            raise ValueError(f"heads ({self.heads}) must divide hidden ({self.hidden})")
        if self.layers < 1 or self.max_len < 1 or self.n_queries < 2 or self.points_per_frame < 1:
            raise ValueError("layers, max_len, n_queries and points_per_frame must be positive")

    def to_json(self) -> dict:
        d = asdict(self)
        d["enc_widths"] = list(self.enc_widths)
        d["dec_widths"] = list(self.dec_widths)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 80
    batch_size: int = 2
    lr: float = 1e-3
    min_lr: float = 1e-5
    betas: tuple = (0.9, 0.999)
    clean_fraction: float = 0.3
    crop_prob: float = 0.5
    sparse_prob: float = 0.3
    val_tracks: int = 16
    val_stride: int = 4
    clip_norm: float = 5.0
    seed: int = 0
    noise: NoiseConfig = field(default_factory=NoiseConfig)

    def to_json(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "noise" in d and isinstance(d["noise"], dict):
            d["noise"] = NoiseConfig.from_json(d["noise"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


DESK = ModelConfig()
DESK_TRAIN = TrainConfig()

# Full-scale settings reported for the original system. Accepted and recorded,
# but far beyond what trains on one CPU core.
FULL = ModelConfig(e=256, layers=3, heads=4, hidden=512, fuse_hidden=512, dec_widths=(512, 512), det_hidden=512, n_queries=1024, points_per_frame=512)
FULL_TRAIN = TrainConfig(epochs=24, batch_size=8, lr=1e-4, min_lr=0.0, sparse_prob=0.0)

PRESETS = {"desk": (DESK, DESK_TRAIN), "full": (FULL, FULL_TRAIN)}


def load_run_config(path) -> tuple[ModelConfig, TrainConfig, dict]:
    """Read a training config JSON: {"preset", "model": {...}, "train": {...}, ...}."""
    with open(path) as fh:
        doc = json.load(fh)
    base_m, base_t = PRESETS[doc.get("preset", "desk")]
    over = doc.get("model", {})
    base = base_m.to_json()
    if "e" in over and "c" not in over:
        base["c"] = None  # follow the new latent width
    m = ModelConfig.from_json({**base, **over})
    t = TrainConfig.from_json({**base_t.to_json(), **doc.get("train", {})})
    return m, t, doc
