"""Dual-branch RoI encoders, causal temporal attention, implicit decoder and box head."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from ..autodiff import Tensor, load_checkpoint, ops, save_checkpoint
from ..autodiff.tensor import ShapeError
from .config import ModelConfig
from .features import QUERY_SCALE

POINT_DIM = 9
BOX_DIM = 7
DET_DIM = 8  # 7 residual channels + 1 score logit
_PAD_FILL = -1e9


@dataclass
class BatchArrays:
    """Numpy inputs for B windows of T slots, P points per slot."""

    local: np.ndarray  # (B, T, P, 9)
    glob: np.ndarray  # (B, T, P, 9)
    pmask: np.ndarray  # (B, T, P) bool
    boxes: np.ndarray  # (B, T, 7)
    pos: np.ndarray  # (B, T) int, frame index relative to the window start
    valid: np.ndarray  # (B, T) bool, real and not dropped

    @property
    def shape(self):
        return self.valid.shape


# ---------------------------------------------------------------------------
# parameters


def _mlp_shapes(prefix, dims):
    return {f"{prefix}.{i}.w": (a, b) for i, (a, b) in enumerate(zip(dims, dims[1:]))} | {
        f"{prefix}.{i}.b": (b,) for i, b in enumerate(dims[1:])
    }


def param_shapes(cfg: ModelConfig) -> dict:
    e, c, h = cfg.e, cfg.c, cfg.hidden
    shapes = {}
    branches = ("enc_local",) if cfg.single_branch else ("enc_local", "enc_global")
    for br in branches:
        shapes |= _mlp_shapes(br, (POINT_DIM, *cfg.enc_widths, e))
        shapes[f"{br}.empty"] = (e,)
    shapes |= _mlp_shapes("phi", (BOX_DIM, e, e))
    for l in range(cfg.layers):
        p = f"attn.{l}"
        for n in ("q", "k", "v"):
            shapes[f"{p}.w{n}"] = (e, h)
            shapes[f"{p}.b{n}"] = (h,)
        shapes[f"{p}.wo"] = (h, e)
        shapes[f"{p}.bo"] = (e,)
        shapes |= _mlp_shapes(f"{p}.ffn", (e, h, e))
        for n in ("ln1", "ln2"):
            shapes[f"{p}.{n}.g"] = (e,)
            shapes[f"{p}.{n}.b"] = (e,)
    shapes |= _mlp_shapes("fuse", (2 * e, cfg.fuse_hidden, c))
    shapes |= _mlp_shapes("fuse_det", (c + e, cfg.fuse_hidden, c))
    dec = (c, *cfg.dec_widths, 1)
    shapes["dec.0.wz"] = (c, dec[1])
    shapes["dec.0.wq"] = (3, dec[1])
    shapes["dec.0.b"] = (dec[1],)
    for i, (a, b) in enumerate(zip(dec[1:], dec[2:]), start=1):
        shapes[f"dec.{i}.w"] = (a, b)
        shapes[f"dec.{i}.b"] = (b,)
    shapes |= _mlp_shapes("det", (c, cfg.det_hidden, DET_DIM))
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in sorted(param_shapes(cfg).items()):
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("g",):
            a = np.ones(shape)
        elif len(shape) == 1 and leaf != "empty":
            a = np.zeros(shape)
        elif leaf == "empty":
            a = rng.normal(0.0, 0.1, shape)
        else:
            fan_in = shape[0]
            a = rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)
            if name.startswith("det.1") or (name.startswith("dec.") and name.endswith(f".{len(cfg.dec_widths)}.w")):
                a *= 0.1
        params[name] = Tensor(a.astype(dtype), requires_grad=True, name=name)
    return params


# ---------------------------------------------------------------------------
# building blocks


def _mlp(params, prefix, x, n_layers, final_act=False):
    return ops.mlp(x, [(params[f"{prefix}.{i}.w"], params[f"{prefix}.{i}.b"]) for i in range(n_layers)], final_act)


def _dtype(params):
    return next(iter(params.values())).data.dtype


def encode_roi(params, cfg: ModelConfig, feats: np.ndarray, mask: np.ndarray, branch: str = "local") -> Tensor:
    """Per-point MLP then masked max-pool: (N, P, 9) -> (N, e). Empty sets get the learned empty token."""
    prefix = "enc_local" if branch == "local" or cfg.single_branch else "enc_global"
    feats = np.asarray(feats)
    mask = np.asarray(mask, dtype=bool)
    if feats.ndim != 3 or feats.shape[-1] != POINT_DIM or mask.shape != feats.shape[:2]:
        raise ShapeError(f"encode_roi: features {feats.shape} vs mask {mask.shape}")
    N, P, _ = feats.shape
    dt = _dtype(params)
    x = Tensor(feats.reshape(N * P, POINT_DIM).astype(dt))
    x = _mlp(params, prefix, x, len(cfg.enc_widths) + 1, final_act=True)
    x = ops.reshape(x, (N, P, cfg.e))
    x = ops.add(x, Tensor(np.where(mask, 0.0, _PAD_FILL)[..., None].astype(dt)))
    pooled = ops.max_reduce(x, 1)
    has = mask.any(axis=1)[:, None].astype(dt)
    return ops.add(ops.mul(pooled, Tensor(has)), ops.mul(params[f"{prefix}.empty"], Tensor(1.0 - has)))


def attention_mask(valid: np.ndarray, causal: bool = True) -> np.ndarray:
    """Additive (B, 1, T, T) mask: 0 where slot t may read slot t', -inf elsewhere.

    Slot t reads valid slots t' <= t (any valid slot when not causal); the diagonal is
    always open so padded rows stay finite (their outputs are zeroed afterwards).
    """
    valid = np.asarray(valid, dtype=bool)
    B, T = valid.shape
    allow = np.broadcast_to(valid[:, None, :], (B, T, T)).copy()
    if causal:
        allow &= np.tril(np.ones((T, T), dtype=bool))[None]
    allow |= np.eye(T, dtype=bool)[None]
    return np.where(allow, 0.0, -np.inf)[:, None]


def causal_attend(params, cfg: ModelConfig, Zg: Tensor, pos, boxes, valid, causal: bool = True, weights_out: Optional[list] = None) -> Tensor:
    """Z'_g: attention over (Z_g + sinusoidal(pos) + phi(box)), zeroed at invalid slots."""
    B, T, e = Zg.shape
    valid = np.asarray(valid, dtype=bool)
    boxes = np.asarray(boxes)
    if valid.shape != (B, T) or boxes.shape != (B, T, BOX_DIM) or np.shape(pos) != (B, T):
        raise ShapeError(f"causal_attend: latents {Zg.shape}, mask {valid.shape}, boxes {boxes.shape}, pos {np.shape(pos)}")
    dt = Zg.data.dtype
    H = cfg.heads
    dh = cfg.hidden // H
    pe = ops.positional_encoding(pos, e, dtype=dt)
    x = ops.add(ops.add(Zg, pe), _mlp(params, "phi", Tensor(boxes.astype(dt)), 2))
    mask = attention_mask(valid, causal).astype(dt)
    for l in range(cfg.layers):
        p = f"attn.{l}"

        def heads(name, order):
            y = ops.linear(x, params[f"{p}.w{name}"], params[f"{p}.b{name}"])
            return ops.transpose(ops.reshape(y, (B, T, H, dh)), order)

        q = heads("q", (0, 2, 1, 3))
        k = heads("k", (0, 2, 3, 1))
        v = heads("v", (0, 2, 1, 3))
        a = ops.softmax(ops.scale(ops.matmul(q, k), 1.0 / math.sqrt(dh)), mask)
        if weights_out is not None:
            weights_out.append(a.data)
        o = ops.reshape(ops.transpose(ops.matmul(a, v), (0, 2, 1, 3)), (B, T, cfg.hidden))
        o = ops.linear(o, params[f"{p}.wo"], params[f"{p}.bo"])
        x = _affine_ln(params, f"{p}.ln1", ops.add(x, o))
        f = _mlp(params, f"{p}.ffn", x, 2)
        x = _affine_ln(params, f"{p}.ln2", ops.add(x, f))
    return ops.mul(x, Tensor(valid[..., None].astype(dt)))


def _affine_ln(params, prefix, x):
    return ops.add(ops.mul(ops.layer_norm(x), params[f"{prefix}.g"]), params[f"{prefix}.b"])


def fuse_latents(params, Zl: Tensor, Zg_prime: Tensor) -> Tensor:
    return _mlp(params, "fuse", ops.concat([Zl, Zg_prime]), 2)


def fuse_det(params, Z: Tensor, Zg: Tensor) -> Tensor:
    return _mlp(params, "fuse_det", ops.concat([Z, Zg]), 2)


def decode_occupancy(params, cfg: ModelConfig, z: Tensor, queries: np.ndarray) -> Tensor:
    """Occupancy probabilities for (M, n, 3) RoI-frame queries given (M, c) latents.

    The first layer acts on concat(z, q); its weight is stored as the z rows and q rows
    separately so z's contribution is computed once per latent instead of once per query.
    """
    q = np.asarray(queries)
    M, c = z.shape
    if q.ndim != 3 or q.shape[0] != M or q.shape[2] != 3:
        raise ShapeError(f"decode_occupancy: latents {z.shape} vs queries {q.shape}")
    n = q.shape[1]
    dt = z.data.dtype
    w0 = params["dec.0.wz"].shape[1]
    hz = ops.reshape(ops.matmul(z, params["dec.0.wz"]), (M, 1, w0))
    hq = ops.reshape(ops.matmul(Tensor((q.reshape(M * n, 3) * QUERY_SCALE).astype(dt)), params["dec.0.wq"]), (M, n, w0))
    h = ops.relu(ops.add(ops.add(hq, hz), params["dec.0.b"]))
    depth = len(cfg.dec_widths)
    for i in range(1, depth + 1):
        h = ops.linear(h, params[f"dec.{i}.w"], params[f"dec.{i}.b"])
        if i < depth:
            h = ops.relu(h)
    return ops.sigmoid(ops.reshape(h, (M, n)))


def detection_head(params, Zdet: Tensor) -> Tensor:
    """(..., c) -> (..., 8): seven box residuals then one score logit."""
    return _mlp(params, "det", Zdet, 2)


# ---------------------------------------------------------------------------
# full forward


@dataclass
class ForwardOut:
    Zl: Tensor
    Zg: Tensor
    Zg_prime: Tensor
    Z: Tensor
    Zdet: Tensor
    det: Tensor


def forward(params, cfg: ModelConfig, batch: BatchArrays, causal: bool = True, weights_out=None) -> ForwardOut:
    B, T = batch.shape
    P = batch.local.shape[2]
    flat_mask = batch.pmask.reshape(B * T, P)
    Zl = ops.reshape(encode_roi(params, cfg, batch.local.reshape(B * T, P, POINT_DIM), flat_mask, "local"), (B, T, cfg.e))
    if cfg.single_branch:
        Zg = Zl
    else:
        Zg = ops.reshape(encode_roi(params, cfg, batch.glob.reshape(B * T, P, POINT_DIM), flat_mask, "global"), (B, T, cfg.e))
    Zgp = causal_attend(params, cfg, Zg, batch.pos, batch.boxes, batch.valid, causal, weights_out)
    Z = fuse_latents(params, Zl, Zgp)
    Zdet = fuse_det(params, Z, Zg)
    return ForwardOut(Zl, Zg, Zgp, Z, Zdet, detection_head(params, Zdet))


# ---------------------------------------------------------------------------
# model container


class Model:
    """Weights plus config; read-only during inference."""

    def __init__(self, cfg: ModelConfig, params: dict):
        expected = param_shapes(cfg)
        got = {k: tuple(v.shape) for k, v in params.items()}
        if got != expected:
            missing = sorted(set(expected) - set(got))
            extra = sorted(set(got) - set(expected))
            raise ValueError(f"parameter manifest mismatch; missing {missing[:5]}, unexpected {extra[:5]}")
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> "Model":
        return cls(cfg, init_params(cfg, seed, dtype))

    def manifest(self) -> dict:
        return {k: list(v.shape) for k, v in sorted(self.params.items())}

    def num_params(self) -> int:
        return int(sum(v.data.size for v in self.params.values()))

    def save(self, path, extra: Optional[dict] = None) -> Path:
        return save_checkpoint(path, self.cfg.to_json(), {k: v.data for k, v in self.params.items()}, extra)

    @classmethod
    def load(cls, path) -> "Model":
        cfg, tensors, _ = load_checkpoint(path)
        return cls(ModelConfig.from_json(cfg), {k: Tensor(v, name=k) for k, v in tensors.items()})
