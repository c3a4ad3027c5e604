"""Random occupancy-IoU triples and detection instances shared by the evaluation and acceptance tests."""

import math

import numpy as np

from occforge.annotation import FREE, OCCUPIED, UNOBSERVED, OccGrid, grid_dims
from occforge.evaluation import DetEvalRecord
from occforge.geometry import Box7, box_iou_3d


def random_iou_triple(rng):
    """Random pred/GT grids (<= 8x6x4) with intersecting, randomly posed boxes."""
    v = 0.2
    gshape = tuple(int(x) for x in rng.integers(2, [9, 7, 5]))
    gdims = np.array(gshape) * v - rng.uniform(0, 0.05, 3)
    gt_box = Box7(rng.uniform(-5, 5, 3), gdims, rng.uniform(-math.pi, math.pi))
    while True:
        rdims = gdims * rng.uniform(0.7, 1.3, 3)
        if all(grid_dims(rdims, v)[i] <= [8, 6, 4][i] for i in range(3)):
            break
    while True:
        roi = Box7(gt_box.center + rng.uniform(-0.3, 0.3, 3) * gdims, rdims, gt_box.yaw + rng.uniform(-0.6, 0.6))
        if box_iou_3d(roi, gt_box) > 0:
            break
    gcells = rng.choice([FREE, OCCUPIED, UNOBSERVED], size=gshape, p=[0.4, 0.35, 0.25]).astype(np.uint8)
    pcells = rng.choice([FREE, OCCUPIED], size=grid_dims(rdims, v)).astype(np.uint8)
    return OccGrid(pcells, v, rdims), roi, OccGrid(gcells, v, gdims), gt_box


def random_box(rng):
    return Box7(rng.uniform(-8, 8, 3) * [1, 1, 0.1], rng.uniform(1.5, 4.5, 3), rng.uniform(-math.pi, math.pi))


def random_det_instance(rng, max_boxes=20):
    frames = []
    for _ in range(int(rng.integers(1, 4))):
        gts = [random_box(rng) for _ in range(int(rng.integers(1, max_boxes // 2 + 1)))]
        dets = []
        for g in gts:
            if rng.uniform() < 0.8:
                dets.append(Box7(g.center + rng.normal(0, 0.15, 3), g.dims * np.exp(rng.normal(0, 0.05, 3)), g.yaw + rng.choice([0, math.pi]) + rng.normal(0, 0.2)))
        while len(dets) < max_boxes // 2 and rng.uniform() < 0.5:
            dets.append(random_box(rng))
        scores = np.round(rng.uniform(0, 1, len(dets)), 1)  # coarse scores create ties
        frames.append((dets, scores, gts))
    return frames


def det_records(frames):
    return [DetEvalRecord(i, d, s, g, np.full(len(g), 10), np.full(len(g), 10.0)) for i, (d, s, g) in enumerate(frames)]
