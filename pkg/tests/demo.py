"""Runs the bundled demo pipeline through the CLI entry point."""

from pathlib import Path

from occforge.cli import main

DATA = Path(__file__).resolve().parents[1] / "src" / "occforge" / "data"
SCENE = DATA / "demo_scene.json"
TRAIN = DATA / "demo_train.json"
GOLDEN = Path(__file__).resolve().parent / "data" / "demo_metrics.json"


def run(argv):
    rc = main([str(a) for a in argv])
    if rc != 0:
        raise AssertionError(f"occforge {' '.join(map(str, argv))} exited {rc}")


def demo_pipeline(root: Path, seed: int = 0) -> Path:
    """simulate -> annotate -> tracklets -> train -> infer -> eval-occ under ``root``."""
    r = Path(root)
    run(["simulate", "--scene", SCENE, "--out", r / "sim", "--seed", seed])
    run(["annotate", "--log", r / "sim", "--out", r / "grids", "--voxel-size", "0.2"])
    run(["tracklets", "--log", r / "sim", "--out", r / "trk", "--seed", seed])
    run(["train", "--data", r / "sim", r / "grids", "--val", r / "sim", r / "grids", "--config", TRAIN, "--out", r / "run", "--seed", seed, "--quiet"])
    run(["infer", "--ckpt", r / "run" / "model.ckpt", "--tracklets", r / "trk", "--out", r / "pred"])
    run(["eval-occ", "--pred", r / "pred", "--grids", r / "grids", "--log", r / "sim", "--out", r / "metrics"])
    return r


BINARY_SUFFIXES = (".ocri", ".ocog", ".bin", ".ckpt")


def binary_artifacts(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(Path(root).rglob("*")) if p.suffix in BINARY_SUFFIXES}
