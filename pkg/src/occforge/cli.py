"""occforge command line: file-based pipeline stages linked by hashed manifests.

    occforge simulate  --scene scene.json --out sim/
    occforge annotate  --log sim/ --out grids/ --voxel-size 0.2
    occforge tracklets --log sim/ --out trk/ --noise noise.json --seed 0
    occforge train     --data sim/ grids/ --config train.json --out run/
    occforge infer     --ckpt run/model.ckpt --tracklets trk/ --out pred/ [--window 8 | --offline]
    occforge baseline  --tracklets trk/ --out base/
    occforge eval-occ  --pred pred/ --grids grids/ --log sim/ --out metrics/
    occforge eval-det  --pred pred/ --log sim/ --out metrics/
    occforge export-ply --grid grids/grids/1.ocog --out ply/

Exit codes: 0 success, 1 usage error, 2 data error (the message names the file).
"""

from __future__ import annotations

import os

# BLAS threading is fixed before numpy loads so runs are reproducible.
_THREADS = os.environ.get("OCCFORGE_THREADS", "1")
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _THREADS)

import argparse  # noqa: E402
import hashlib  # noqa: E402
import json  # noqa: E402
import math  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402
from contextlib import contextmanager  # noqa: E402
from dataclasses import asdict, replace  # noqa: E402
from importlib import resources  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import __version__  # noqa: E402
from .annotation import annotate_objects, default_workers, read_grid, write_grid  # noqa: E402
from .autodiff.checkpoint import CheckpointError  # noqa: E402
from .evaluation import (  # noqa: E402
    DetEvalRecord,
    aggregate_miou,
    detection_report,
    mean_box_iou,
    occupancy_iou,
    write_occ_report,
)
from .geometry import Box7, in_box_mask  # noqa: E402
from .simulator import FormatError, SensorModel, load_simlog, save_simlog, scene_from_json, simulate  # noqa: E402
from .tracklets import NoiseConfig, gt_tracklet, load_tracklets, make_input_tracklet, save_tracklets  # noqa: E402

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
MANIFEST = "manifest.json"
LOCK = ".occforge.lock"


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# manifests and locking


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _digest(outputs: dict) -> str:
    return hashlib.sha256(json.dumps(outputs, sort_keys=True).encode()).hexdigest()


def read_json(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"{path}: file not found") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: not valid JSON ({exc})") from None


def _manifest_root(path: Path) -> Path:
    return path if path.is_dir() else path.parent


def artifact_digest(path) -> str:
    """Digest recorded for an upstream artifact: its stage manifest's, else the file's own hash."""
    path = Path(path)
    m = _manifest_root(path) / MANIFEST
    if m.exists():
        return read_json(m)["digest"]
    if path.is_file():
        return file_sha256(path)
    raise DataError(f"{path}: not a stage output (no {MANIFEST})")


def verify_artifact(path) -> str:
    """Check an upstream stage's files against its manifest, and that manifest's own inputs.

    A modified output or an upstream input that has since changed is a hard error.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: not found")
    root = _manifest_root(path)
    m = root / MANIFEST
    if not m.exists():
        return artifact_digest(path)
    doc = read_json(m)
    for rel, h in doc["outputs"].items():
        f = root / rel
        if not f.exists() or file_sha256(f) != h:
            raise DataError(f"{f}: stale or modified artifact (hash differs from {m})")
    for src, h in doc.get("inputs", {}).items():
        if Path(src).exists() and artifact_digest(src) != h:
            raise DataError(f"{m}: upstream input {src} changed since this stage ran; re-run it")
    return doc["digest"]


def write_manifest(out: Path, cmd: str, config: dict, inputs: dict, seed, started: float) -> Path:
    outputs = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name not in (MANIFEST, LOCK) and not p.name.endswith(".tmp"):
            outputs[p.relative_to(out).as_posix()] = file_sha256(p)
    doc = {
        "tool": "occforge",
        "version": __version__,
        "subcommand": cmd,
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
        "digest": _digest(outputs),
        "seed": seed,
        "wall_time": time.time() - started,
    }
    tmp = out / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(doc, indent=1, sort_keys=True))
    os.replace(tmp, out / MANIFEST)
    return out / MANIFEST


@contextmanager
def locked(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DataError(f"{lock}: output directory is in use by another occforge process") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        stale = out / MANIFEST
        if stale.exists():
            stale.unlink()
        yield out
    finally:
        lock.unlink(missing_ok=True)


def _write_json(path: Path, doc) -> Path:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return path


def _bundled(name: str) -> Path:
    return Path(str(resources.files("occforge") / "data" / name))


def _box_list(b: Box7) -> list:
    return [float(x) for x in b.to_array()]


# ---------------------------------------------------------------------------
# stages


def cmd_simulate(a) -> tuple[dict, dict]:
    doc = read_json(a.scene)
    scene = scene_from_json(doc)
    if "sensor" in doc:
        sm = SensorModel.from_json(doc["sensor"])
    else:
        from .occnet.data import desk_sensor

        sm = desk_sensor()
    log = simulate(scene, sm, seed=a.seed, depth_noise=a.depth_noise)
    save_simlog(log, a.out)
    return {"scene": doc, "sensor": sm.to_json(), "depth_noise": a.depth_noise}, {str(Path(a.scene).resolve()): verify_artifact(a.scene)}


def cmd_annotate(a):
    inputs = {str(Path(a.log).resolve()): verify_artifact(a.log)}
    log = load_simlog(a.log)
    grids = annotate_objects(log, a.voxel_size, a.workers or default_workers())
    gdir = Path(a.out) / "grids"
    gdir.mkdir(parents=True, exist_ok=True)
    index = {}
    for k, g in sorted(grids.items()):
        write_grid(gdir / f"{k}.ocog", g)
        index[str(k)] = f"grids/{k}.ocog"
    _write_json(Path(a.out) / "index.json", {"voxel": a.voxel_size, "scene_hash": log.scene_hash, "grids": index})
    return {"voxel_size": a.voxel_size}, inputs


def _load_noise(path):
    return NoiseConfig.from_json(read_json(path)) if path else NoiseConfig.from_json(read_json(_bundled("noise_default.json")))


def cmd_tracklets(a):
    inputs = {str(Path(a.log).resolve()): verify_artifact(a.log)}
    if a.noise:
        inputs[str(Path(a.noise).resolve())] = verify_artifact(a.noise)
    noise = NoiseConfig.clean() if a.clean else _load_noise(a.noise)
    log = load_simlog(a.log)
    out = [make_input_tracklet(gt_tracklet(log, k), noise, a.seed * 1000 + k) for k in log.track_ids]
    save_tracklets(out, a.out, noise, {"scene_hash": log.scene_hash, "seed": a.seed})
    return {"noise": asdict(noise)}, inputs


def _load_grid_index(gdir) -> dict:
    gdir = Path(gdir)
    idx = read_json(gdir / "index.json")
    return {int(k): read_grid(gdir / v) for k, v in idx["grids"].items()}


def _samples(pairs, prefix):
    from .occnet.data import build_track_samples

    out, inputs = [], {}
    for i, (logdir, gdir) in enumerate(pairs):
        for p in (logdir, gdir):
            inputs[str(Path(p).resolve())] = verify_artifact(p)
        log = load_simlog(logdir)
        out.extend(build_track_samples(log, _load_grid_index(gdir), prefix=f"{prefix}{i}/"))
    return out, inputs


def cmd_train(a):
    from .occnet.config import DESK, DESK_TRAIN, load_run_config
    from .occnet.train import TrainingDiverged, train

    inputs = {}
    if a.config:
        inputs[str(Path(a.config).resolve())] = verify_artifact(a.config)
        cfg, tcfg, _ = load_run_config(a.config)
    else:
        cfg, tcfg = DESK, DESK_TRAIN
    if a.seed is not None:
        tcfg = replace(tcfg, seed=a.seed)
    if a.epochs is not None:
        tcfg = replace(tcfg, epochs=a.epochs)
    tr, i1 = _samples(a.data, "train")
    va, i2 = _samples(a.val or [], "val")
    inputs |= i1 | i2
    if not tr:
        raise DataError(f"{a.data[0][1]}: no annotated tracks with occupied voxels")
    log = (lambda s: print(s, flush=True)) if not a.quiet else None
    try:
        res = train(tr, va, cfg, tcfg, out_dir=a.out, log=log)
    except TrainingDiverged as exc:
        raise DataError(f"{a.out}: training diverged ({exc}); last good checkpoint: {exc.checkpoint}") from None
    hist = [{k: v for k, v in h.items() if k != "seconds"} for h in res.history]
    _write_json(Path(a.out) / "train_log.json", {"history": hist})
    _write_json(Path(a.out) / "timing.json", {"seconds_per_epoch": [h["seconds"] for h in res.history]})
    return {"model": cfg.to_json(), "train": tcfg.to_json()}, inputs


def _window(s: str):
    if s in ("inf", "all", "-1"):
        return None
    try:
        k = int(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"window must be a positive integer or 'inf', got {s!r}") from None
    if k < 1:
        raise argparse.ArgumentTypeError("window must be >= 1")
    return k


def _positive(s: str) -> float:
    try:
        v = float(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {s!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def _unit_open(s: str) -> float:
    v = _positive(s)
    if not v < 1:
        raise argparse.ArgumentTypeError("must lie in (0, 1)")
    return v


def _write_predictions(out: Path, tracklets, preds_by_track, extra: dict):
    rows = []
    for t in tracklets:
        for p in preds_by_track[t.track_id]:
            rel = f"grids/{t.track_id}/{p.frame_id:06d}.ocog"
            (out / rel).parent.mkdir(parents=True, exist_ok=True)
            write_grid(out / rel, p.grid, sidecar=False)
            gt = next(f.gt_track for f in t.frames if f.frame_id == p.frame_id)
            rows.append(
                {"track": t.track_id, "gt_track": gt, "frame_id": p.frame_id, "roi": _box_list(p.roi), "box": _box_list(p.box), "score": float(p.score), "grid": rel}
            )
    _write_json(out / "predictions.json", {**extra, "predictions": rows})


def cmd_infer(a):
    from .occnet.infer import infer_tracklet
    from .occnet.model import Model

    inputs = {str(Path(p).resolve()): verify_artifact(p) for p in (a.ckpt, a.tracklets)}
    model = Model.load(a.ckpt)
    ts = load_tracklets(a.tracklets)
    preds = {t.track_id: infer_tracklet(model, t, window=a.window, offline=a.offline, keep_latent=False) for t in ts}
    _write_predictions(Path(a.out), ts, preds, {"method": "model", "window": a.window, "offline": a.offline})
    return {"window": a.window, "offline": a.offline}, inputs


def cmd_baseline(a):
    from .occnet.infer import baseline_complete

    inputs = {str(Path(a.tracklets).resolve()): verify_artifact(a.tracklets)}
    ts = load_tracklets(a.tracklets)
    preds = {t.track_id: baseline_complete(t, a.voxel_size, a.window) for t in ts}
    _write_predictions(Path(a.out), ts, preds, {"method": "baseline", "window": a.window})
    return {"voxel_size": a.voxel_size, "window": a.window}, inputs


def _load_predictions(pdir):
    pdir = Path(pdir)
    doc = read_json(pdir / "predictions.json")
    return doc, doc["predictions"]


def cmd_eval_occ(a):
    inputs = {str(Path(p).resolve()): verify_artifact(p) for p in (a.pred, a.grids, a.log)}
    _, rows = _load_predictions(a.pred)
    grids = _load_grid_index(a.grids)
    log = load_simlog(a.log)
    recs, excluded = [], 0
    for r in rows:
        k = r["gt_track"]
        if k not in grids:
            raise DataError(f"{Path(a.grids) / 'index.json'}: no grid for track {k}")
        gt_box = log.track_boxes(k)[r["frame_id"]]
        pred = read_grid(Path(a.pred) / r["grid"])
        rec = occupancy_iou(pred, Box7.from_array(r["roi"]), grids[k], gt_box, r["track"], r["frame_id"])
        if rec is None:
            excluded += 1
        else:
            recs.append(rec)
    if not recs:
        raise DataError(f"{Path(a.pred) / 'predictions.json'}: no prediction intersects its GT box")
    summary = aggregate_miou(recs) | {"num_excluded": excluded}
    write_occ_report(Path(a.out) / "metrics.json", summary, recs)
    return {}, inputs


def det_records(log, rows, use_proposals: bool = False) -> list[DetEvalRecord]:
    by_frame: dict = {}
    for r in rows:
        by_frame.setdefault(r["frame_id"], []).append(r)
    out = []
    for f in log.frames:
        ego = f.ego_pose.translation
        gts = [f.boxes[k] for k in sorted(f.boxes)]
        pts = f.points.points
        counts = [int(in_box_mask(pts, b).sum()) for b in gts]
        rng_of = lambda b: float(math.hypot(*(b.center[:2] - ego[:2])))  # noqa: E731
        dets = [Box7.from_array(r["roi" if use_proposals else "box"]) for r in by_frame.get(f.index, [])]
        scores = [1.0 if use_proposals else r["score"] for r in by_frame.get(f.index, [])]
        out.append(DetEvalRecord(f.index, dets, scores, gts, counts, [rng_of(b) for b in gts], np.array([rng_of(b) for b in dets])))
    return out


def cmd_eval_det(a):
    inputs = {str(Path(p).resolve()): verify_artifact(p) for p in (a.pred, a.log)}
    _, rows = _load_predictions(a.pred)
    log = load_simlog(a.log)
    recs = det_records(log, rows, a.use_proposals)
    report = detection_report(recs, a.iou_thr)
    key = "roi" if a.use_proposals else "box"
    report["mean_box_iou"] = mean_box_iou((Box7.from_array(r[key]), log.track_boxes(r["gt_track"])[r["frame_id"]]) for r in rows)
    _write_json(Path(a.out) / "det_metrics.json", report)
    return {"iou_thr": a.iou_thr, "use_proposals": a.use_proposals}, inputs


def ply_text(grid) -> str:
    """ASCII PLY with one axis-aligned cube (8 vertices, 6 quads) per occupied voxel, box frame."""
    from .annotation import OCCUPIED

    centers = grid.centers()[grid.cells == OCCUPIED]
    h = grid.voxel / 2
    corners = np.array([[x, y, z] for x in (-h, h) for y in (-h, h) for z in (-h, h)])
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {8 * len(centers)}",
        "property float x",
        "property float y",
        "property float z",
        f"element face {6 * len(centers)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    for c in centers:
        lines += [f"{v[0]:.6f} {v[1]:.6f} {v[2]:.6f}" for v in c + corners]
    for i in range(len(centers)):
        lines += ["4 " + " ".join(str(8 * i + k) for k in q) for q in quads]
    return "\n".join(lines) + "\n"


def cmd_export_ply(a):
    inputs = {str(Path(a.grid).resolve()): verify_artifact(a.grid)}
    g = read_grid(a.grid)
    (Path(a.out) / f"{Path(a.grid).stem}.ply").write_text(ply_text(g))
    return {}, inputs


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="occforge", description="Object-centric occupancy pipeline.")
    p.add_argument("--version", action="version", version=f"occforge {__version__}")
    sub = p.add_subparsers(dest="cmd", required=True, metavar="COMMAND")

    s = sub.add_parser("simulate", help="scene JSON -> simulated sensor log")
    s.add_argument("--scene", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--depth-noise", type=float, default=0.0)
    s.set_defaults(fn=cmd_simulate)

    s = sub.add_parser("annotate", help="sensor log -> tri-state occupancy grids")
    s.add_argument("--log", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--voxel-size", type=_positive, default=0.2)
    s.add_argument("--workers", type=int, default=None)
    s.set_defaults(fn=cmd_annotate)

    s = sub.add_parser("tracklets", help="sensor log + noise config -> input tracklets")
    s.add_argument("--log", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--noise", default=None, help="noise JSON (bundled default when omitted)")
    s.add_argument("--clean", action="store_true", help="ground-truth proposals, no noise")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_tracklets)

    s = sub.add_parser("train", help="logs + grids + config -> checkpoint")
    s.add_argument("--data", nargs=2, action="append", required=True, metavar=("LOG", "GRIDS"))
    s.add_argument("--val", nargs=2, action="append", metavar=("LOG", "GRIDS"))
    s.add_argument("--config", default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("infer", help="checkpoint + tracklets -> per-frame grids and refined boxes")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--tracklets", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--window", type=_window, default=None, help="frames of history incl. current, or 'inf'")
    s.add_argument("--offline", action="store_true", help="attend to future frames too")
    s.set_defaults(fn=cmd_infer)

    s = sub.add_parser("baseline", help="tracklets -> accumulated-points grids (no learning)")
    s.add_argument("--tracklets", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--voxel-size", type=_positive, default=0.2)
    s.add_argument("--window", type=_window, default=None)
    s.set_defaults(fn=cmd_baseline)

    s = sub.add_parser("eval-occ", help="predictions + GT grids -> IoU / mIoU report")
    s.add_argument("--pred", required=True)
    s.add_argument("--grids", required=True)
    s.add_argument("--log", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_eval_occ)

    s = sub.add_parser("eval-det", help="predictions + GT boxes -> AP / APH report")
    s.add_argument("--pred", required=True)
    s.add_argument("--log", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--iou-thr", type=_unit_open, default=0.7)
    s.add_argument("--use-proposals", action="store_true", help="score the input RoIs instead of refined boxes")
    s.set_defaults(fn=cmd_eval_det)

    s = sub.add_parser("export-ply", help="occupancy grid -> ASCII PLY of occupied voxel cubes")
    s.add_argument("--grid", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_export_ply)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    started = time.time()
    out = Path(args.out)
    try:
        with locked(out):
            config, inputs = args.fn(args)
            write_manifest(out, args.cmd, config, inputs, getattr(args, "seed", None), started)
    except (DataError, FormatError, CheckpointError) as exc:
        print(f"occforge {args.cmd}: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FileNotFoundError, IsADirectoryError, NotADirectoryError) as exc:
        print(f"occforge {args.cmd}: error: {exc.filename}: {exc.strerror}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, KeyError) as exc:
        print(f"occforge {args.cmd}: error: invalid input data: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
