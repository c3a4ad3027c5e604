"""Tiny models and simulated tracks shared by the network tests."""

import numpy as np

from occforge.autodiff import Tape
from occforge.autodiff.gradcheck import rel_error
from occforge.occnet.config import ModelConfig
from occforge.occnet.data import build_track_samples, make_batch, sample_windows
from occforge.occnet.losses import batch_loss
from occforge.occnet.model import init_params
from occforge.annotation import annotate_objects
from occforge.simulator import SensorModel, random_scene, simulate

TINY = ModelConfig(
    e=8, enc_widths=(8,), layers=1, heads=2, hidden=8, fuse_hidden=8,
    dec_widths=(8,), det_hidden=8, n_queries=8, points_per_frame=16,
)
SMALL = ModelConfig(
    e=16, enc_widths=(16,), layers=2, heads=2, hidden=16, fuse_hidden=16,
    dec_widths=(16,), det_hidden=16, n_queries=32, points_per_frame=32,
)
SENSOR = SensorModel.from_resolution(0.4, -20, 6, 80)


def tiny_samples(seed=3, num_frames=10, num_actors=3):
    log = simulate(random_scene(seed, num_frames=num_frames, num_actors=num_actors), SENSOR)
    return build_track_samples(log, annotate_objects(log))


def gt_batch(cfg, samples, seed=0):
    rng = np.random.default_rng(seed)
    windows = [w for s in samples for w in sample_windows(s, s.source, cfg)]
    return make_batch(windows, cfg, rng)


def full_model_grad_error(samples, h=1e-6, per_param=6):
    """Relative error of the TINY model's loss gradient vs central differences (float64)."""
    params = init_params(TINY, 0, np.float64)
    arr, tg = gt_batch(TINY, samples[:2])
    with Tape() as tape:
        loss, _ = batch_loss(params, TINY, arr, tg)
    grads = {t.name: g for t, g in tape.backward(loss).items()}

    def f():
        return float(batch_loss(params, TINY, arr, tg)[0].data)

    rng = np.random.default_rng(0)
    ana, num = [], []
    for name, p in sorted(params.items()):
        flat = p.data.reshape(-1)
        for i in rng.choice(flat.size, size=min(per_param, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + h
            fp = f()
            flat[i] = old - h
            fm = f()
            flat[i] = old
            num.append((fp - fm) / (2 * h))
            ana.append(grads.get(name, np.zeros_like(p.data)).reshape(-1)[i])
    return rel_error(np.array(ana), np.array(num))
