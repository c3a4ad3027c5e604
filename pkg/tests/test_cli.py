import json
import math
import shutil
import subprocess
import sys

import numpy as np
import pytest

from occforge.annotation import DEFAULT_VOXEL, read_grid
from occforge.cli import EXIT_DATA, EXIT_USAGE, LOCK, MANIFEST, main, ply_text
from occforge.occnet import Model
from occcases import TINY
from demo import GOLDEN, SCENE, demo_pipeline, run


@pytest.fixture(scope="module")
def demo(tmp_path_factory):
    return demo_pipeline(tmp_path_factory.mktemp("demo"))


def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["annotate", "--log", "x", "--out", "y", "--bogus"])
    assert exc.value.code == EXIT_USAGE
    assert "usage:" in capsys.readouterr().err


def test_missing_subcommand_and_bad_window(capsys):
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main(["infer", "--ckpt", "a", "--tracklets", "b", "--out", "c", "--window", "0"])
    assert exc.value.code == EXIT_USAGE


def test_console_script_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "occforge.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "eval-occ" in r.stdout


def test_annotate_default_voxel(demo):
    assert DEFAULT_VOXEL == 0.2
    idx = json.loads((demo / "grids" / "index.json").read_text())
    assert idx["voxel"] == 0.2
    g = read_grid(demo / "grids" / next(iter(idx["grids"].values())))
    assert math.isclose(g.voxel, 0.2, rel_tol=1e-6)


def test_manifests_chain(demo):
    sim = json.loads((demo / "sim" / MANIFEST).read_text())
    grids = json.loads((demo / "grids" / MANIFEST).read_text())
    assert grids["inputs"][str((demo / "sim").resolve())] == sim["digest"]
    assert grids["subcommand"] == "annotate" and "wall_time" in grids
    assert not (demo / "grids" / LOCK).exists()


def test_golden_metrics(demo):
    got = json.loads((demo / "metrics" / "metrics.json").read_text())
    want = json.loads(GOLDEN.read_text())
    assert set(got) == set(want)
    for k, v in want.items():
        assert got[k] == pytest.approx(v, abs=1e-6), k


def test_modified_output_detected(demo, tmp_path, capsys):
    copy = tmp_path / "sim"
    shutil.copytree(demo / "sim", copy)
    f = next((copy / "range").iterdir())
    f.write_bytes(f.read_bytes()[:-4] + b"\0\0\0\0")
    rc = main(["annotate", "--log", str(copy), "--out", str(tmp_path / "g")])
    assert rc == EXIT_DATA
    assert f.name in capsys.readouterr().err


def test_stale_upstream_is_hard_error(tmp_path, capsys):
    r = tmp_path
    run(["simulate", "--scene", SCENE, "--out", r / "sim"])
    run(["annotate", "--log", r / "sim", "--out", r / "grids"])
    run(["tracklets", "--log", r / "sim", "--out", r / "trk"])
    run(["baseline", "--tracklets", r / "trk", "--out", r / "base"])
    # regenerate the log with different content; the grids now describe an older log
    run(["simulate", "--scene", SCENE, "--out", r / "sim", "--depth-noise", "0.05", "--seed", "1"])
    rc = main(["eval-occ", "--pred", str(r / "base"), "--grids", str(r / "grids"), "--log", str(r / "sim"), "--out", str(r / "m")])
    assert rc == EXIT_DATA
    assert "changed since" in capsys.readouterr().err


def test_corrupt_magic_names_file(tmp_path, capsys):
    bad = tmp_path / "bad.ocog"
    bad.write_bytes(b"NOPE" + bytes(40))
    assert main(["export-ply", "--grid", str(bad), "--out", str(tmp_path / "ply")]) == EXIT_DATA
    assert "bad.ocog" in capsys.readouterr().err
    ck = tmp_path / "ck" / "m.ckpt"
    ck.parent.mkdir()
    ck.write_bytes(b"XXXX" + bytes(16))
    (tmp_path / "trk").mkdir()
    assert main(["infer", "--ckpt", str(ck), "--tracklets", str(tmp_path / "trk"), "--out", str(tmp_path / "p")]) == EXIT_DATA
    err = capsys.readouterr().err
    assert "m.ckpt" in err or "trk" in err


def test_invalid_json_names_file(tmp_path, capsys):
    s = tmp_path / "scene.json"
    s.write_text("{not json")
    assert main(["simulate", "--scene", str(s), "--out", str(tmp_path / "o")]) == EXIT_DATA
    assert "scene.json" in capsys.readouterr().err


def test_lock_file_blocks_second_instance(tmp_path, capsys):
    out = tmp_path / "o"
    out.mkdir()
    (out / LOCK).write_text("123")
    assert main(["simulate", "--scene", str(SCENE), "--out", str(out)]) == EXIT_DATA
    assert "in use" in capsys.readouterr().err


def test_window_nesting_cli(tmp_path):
    scene = tmp_path / "short.json"
    scene.write_text(json.dumps({"procedural": {"seed": 4, "num_frames": 5, "num_actors": 2}, "sensor": json.loads(SCENE.read_text())["sensor"]}))
    ck = tmp_path / "ck" / "m.ckpt"
    ck.parent.mkdir()
    Model.init(TINY, 0).save(ck)
    run(["simulate", "--scene", scene, "--out", tmp_path / "sim"])
    run(["tracklets", "--log", tmp_path / "sim", "--out", tmp_path / "trk"])
    run(["infer", "--ckpt", ck, "--tracklets", tmp_path / "trk", "--out", tmp_path / "a", "--window", "8"])
    run(["infer", "--ckpt", ck, "--tracklets", tmp_path / "trk", "--out", tmp_path / "b", "--window", "inf"])
    pa = json.loads((tmp_path / "a" / "predictions.json").read_text())["predictions"]
    pb = json.loads((tmp_path / "b" / "predictions.json").read_text())["predictions"]
    assert pa == pb and len(pa) > 0
    for r in pa:
        assert (tmp_path / "a" / r["grid"]).read_bytes() == (tmp_path / "b" / r["grid"]).read_bytes()


def test_baseline_eval_det_and_ply(demo, tmp_path):
    run(["baseline", "--tracklets", demo / "trk", "--out", tmp_path / "base"])
    run(["eval-occ", "--pred", tmp_path / "base", "--grids", demo / "grids", "--log", demo / "sim", "--out", tmp_path / "mb"])
    run(["eval-det", "--pred", demo / "pred", "--log", demo / "sim", "--out", tmp_path / "det"])
    run(["eval-det", "--pred", demo / "pred", "--log", demo / "sim", "--out", tmp_path / "det0", "--use-proposals"])
    rep = json.loads((tmp_path / "det" / "det_metrics.json").read_text())
    assert 0 <= rep["all/overall"]["APH"] <= rep["all/overall"]["AP"] <= 1
    assert (tmp_path / "mb" / "metrics.csv").exists()
    grid = next((demo / "grids" / "grids").glob("*.ocog"))
    run(["export-ply", "--grid", grid, "--out", tmp_path / "ply"])
    text = (tmp_path / "ply" / f"{grid.stem}.ply").read_text()
    n = int((read_grid(grid).cells == 1).sum())
    assert f"element vertex {8 * n}" in text and f"element face {6 * n}" in text
    body = text.split("end_header\n")[1].splitlines()
    assert len(body) == 14 * n


def test_ply_cube_geometry():
    from occforge.annotation import OccGrid

    cells = np.zeros((2, 1, 1), dtype=np.uint8)
    cells[1, 0, 0] = 1
    g = OccGrid(cells, 0.5, [1.0, 0.5, 0.5])
    lines = ply_text(g).split("end_header\n")[1].splitlines()
    v = np.array([[float(x) for x in ln.split()] for ln in lines[:8]])
    np.testing.assert_allclose(v.min(axis=0), [0.0, -0.25, -0.25])
    np.testing.assert_allclose(v.max(axis=0), [0.5, 0.25, 0.25])
