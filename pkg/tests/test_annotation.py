import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from occforge.annotation import (
    FREE,
    OCCUPIED,
    UNOBSERVED,
    OccGrid,
    aggregate_object_points,
    annotate_objects,
    annotate_track,
    grid_dims,
    grid_from_bytes,
    grid_to_bytes,
    occlusion_reason,
    read_grid,
    voxelize,
    write_grid,
)
from occforge.geometry import Box7, RigidTransform
from occforge.simulator import (
    NO_RETURN,
    Actor,
    FormatError,
    RangeImage,
    Scene,
    SensorModel,
    ShapePrimitiveSet,
    SimFrame,
    SimLog,
    random_scene,
    shape_voxelize,
    simulate,
)
from occforge.geometry import PointCloud

SM = SensorModel.from_resolution(0.2, -20, 6, 80)


def _one_actor_scene(shape, dims, centers, ego=None):
    T = len(centers)
    actor = Actor(1, shape, [Box7(c, dims, 0.0) for c in centers])
    ego = ego or [RigidTransform.identity()] * T
    return Scene(ego, [actor], 0.1)


def test_grid_dims_rule():
    assert grid_dims([4.0, 2.0, 1.5], 0.2) == (20, 10, 8)
    assert grid_dims([4.01, 2.0, 1.5], 0.2) == (21, 10, 8)


def test_voxelize_examples():
    dims = [4.0, 2.0, 2.0]
    m = voxelize(np.zeros((1, 3)), dims, 0.2)
    assert m.sum() == 1 and m[10, 5, 5]
    assert not voxelize(np.zeros((0, 3)), dims, 0.2).any()


def test_voxelize_matches_per_point_floor():
    rng = np.random.default_rng(0)
    dims = np.array([3.3, 1.7, 1.1])
    pts = rng.uniform(-dims / 2 - 0.3, dims / 2 + 0.3, (10_000, 3))
    got = voxelize(pts, dims, 0.2)
    shape = grid_dims(dims, 0.2)
    want = np.zeros(shape, dtype=bool)
    for p in pts:
        idx = [math.floor((p[a] + dims[a] / 2) / 0.2) for a in range(3)]
        if all(0 <= idx[a] < shape[a] for a in range(3)):
            want[tuple(idx)] = True
    np.testing.assert_array_equal(got, want)


def _synthetic_log(depth_value, center_dist):
    """One frame; the actor's box sits on the boresight at ``center_dist``; every pixel reads ``depth_value``."""
    sm = SensorModel(11, 720, math.radians(-5), math.radians(5), 80.0)
    pose = RigidTransform.identity("sensor", "world")
    depths = np.full((sm.rows, sm.cols), depth_value)
    box = Box7([center_dist, 0, 0], [0.2, 0.2, 0.2])
    shape = ShapePrimitiveSet([[0, 0, 0]], [[0.1, 0.1, 0.1]])
    frame = SimFrame(0, 0.0, RangeImage(depths, pose, sm), PointCloud(np.zeros((0, 3))), {1: box}, RigidTransform.identity())
    return SimLog(sm, [frame], {1: shape}, 0.1)


def test_free_when_center_in_front_of_reading():
    log = _synthetic_log(10.0, 5.0)
    g = occlusion_reason(np.zeros((1, 1, 1), dtype=bool), log, 1, voxel=0.2)
    assert g.cells[0, 0, 0] == FREE


def test_unobserved_when_center_behind_reading():
    log = _synthetic_log(10.0, 12.0)
    g = occlusion_reason(np.zeros((1, 1, 1), dtype=bool), log, 1, voxel=0.2)
    assert g.cells[0, 0, 0] == UNOBSERVED


def test_sentinel_reads_as_max_range():
    log = _synthetic_log(NO_RETURN, 12.0)
    assert occlusion_reason(np.zeros((1, 1, 1), dtype=bool), log, 1, voxel=0.2).cells[0, 0, 0] == FREE
    log = _synthetic_log(NO_RETURN, 85.0)
    assert occlusion_reason(np.zeros((1, 1, 1), dtype=bool), log, 1, voxel=0.2).cells[0, 0, 0] == UNOBSERVED


def test_missing_range_image_rejected():
    log = _synthetic_log(10.0, 5.0)
    log.frames[0].range_image = None
    with pytest.raises(ValueError, match="range image"):
        occlusion_reason(np.zeros((1, 1, 1), dtype=bool), log, 1, voxel=0.2)


def test_unknown_track_rejected():
    log = simulate(random_scene(0, num_frames=1, num_actors=1), SM)
    with pytest.raises(KeyError):
        aggregate_object_points(log, 99)


def test_track_never_hit_is_empty():
    shape = ShapePrimitiveSet([[0, 0, 0]], [[1, 1, 1]])
    log = simulate(_one_actor_scene(shape, [2, 2, 2], [[0, 0, 30.0]]), SM)  # far above the field of view
    assert len(aggregate_object_points(log, 1).points) == 0


def test_static_scene_duplicates_points():
    shape = ShapePrimitiveSet([[0, 0, 0]], [[1, 0.5, 0.5]])
    log = simulate(_one_actor_scene(shape, [2, 1, 1], [[8, 2, 0.5]] * 2), SM)
    a = aggregate_object_points(log, 1).points
    n = len(a) // 2
    assert n > 0 and len(a) == 2 * n
    np.testing.assert_array_equal(a[:n], a[n:])


def test_moving_object_clouds_lie_on_surface():
    sc = random_scene(4, num_frames=6, num_actors=3)
    log = simulate(sc, SM)
    for k in log.track_ids:
        cloud = aggregate_object_points(log, k)
        if len(cloud.points):
            assert log.shapes[k].surface_distance(cloud.points).max() < 0.1


def test_cube_actor_occupied_shell_and_interior_unobserved():
    shape = ShapePrimitiveSet([[0, 0, 0]], [[1.0, 1.0, 1.0]])
    log = simulate(_one_actor_scene(shape, [2, 2, 2], [[8, 0, 1.0]]), SM)
    g = annotate_track(log, 1, 0.2)
    solid = shape_voxelize(shape, log.track_boxes(1)[0], 0.2)
    occ = g.cells == OCCUPIED
    assert occ.any() and np.all(solid[occ])
    # the core is never traversed by a ray
    assert np.all(g.cells[3:7, 3:7, 3:7] == UNOBSERVED)


def test_out_of_range_actor_has_no_evidence():
    shape = ShapePrimitiveSet([[0, 0, 0]], [[1.0, 1.0, 1.0]])
    log = simulate(_one_actor_scene(shape, [2, 2, 2], [[120, 0, 1.0]]), SM)
    g = annotate_track(log, 1)
    assert g.counts()["occupied"] == 0 and g.counts()["free"] == 0


def test_default_voxel_is_02():
    import inspect

    assert inspect.signature(annotate_track).parameters["voxel"].default == 0.2


def test_partition_and_monotone_in_frames():
    sc = random_scene(8, num_frames=5, num_actors=3)
    log = simulate(sc, SM)
    for k in log.track_ids:
        prev = None
        for n in range(1, 6):
            g = annotate_track(log, k, 0.2, frames=list(range(n)))
            assert set(np.unique(g.cells)) <= {FREE, OCCUPIED, UNOBSERVED}
            if prev is not None:
                assert not np.any((prev == OCCUPIED) & (g.cells != OCCUPIED))
                assert not np.any((prev == FREE) & (g.cells == UNOBSERVED))
            prev = g.cells


def test_occupied_within_dilated_shape():
    from scipy.ndimage import binary_dilation

    sc = random_scene(12, num_frames=4, num_actors=4)
    log = simulate(sc, SM)
    grids = annotate_objects(log, 0.2)
    for k, g in grids.items():
        solid = shape_voxelize(log.shapes[k], log.track_boxes(k)[0], 0.2)
        dil = binary_dilation(solid, np.ones((3, 3, 3), dtype=bool))
        assert np.all(dil[g.cells == OCCUPIED])


def test_workers_do_not_change_results():
    log = simulate(random_scene(1, num_frames=3, num_actors=3), SM)
    a, b = annotate_objects(log, 0.2, 1), annotate_objects(log, 0.2, 3)
    for k in a:
        np.testing.assert_array_equal(a[k].cells, b[k].cells)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 9), st.integers(0, 10**6))
def test_grid_bytes_roundtrip(nx, ny, nz, seed):
    cells = np.random.default_rng(seed).integers(0, 3, (nx, ny, nz)).astype(np.uint8)
    g = OccGrid(cells, 0.2, [nx * 0.2, ny * 0.2, nz * 0.2])
    back = grid_from_bytes(grid_to_bytes(g))
    np.testing.assert_array_equal(back.cells, cells)


def test_grid_file_errors(tmp_path):
    g = OccGrid(np.zeros((2, 2, 2), dtype=np.uint8), 0.2, [0.4, 0.4, 0.4], {"track_id": 1})
    p = tmp_path / "g.ocog"
    write_grid(p, g)
    assert read_grid(p).meta == {"track_id": 1}
    blob = bytearray(p.read_bytes())
    p.write_bytes(b"XXXX" + bytes(blob[4:]))
    with pytest.raises(FormatError, match="g.ocog"):
        read_grid(p)
    blob[-1] = 0xFF  # reserved code 3 in every slot
    p.write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        read_grid(p)
