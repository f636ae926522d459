"""``docdepth`` command line: one subcommand per stage plus ``annotate``,
``eval`` and ``synth``.

Exit codes: 0 success, 1 an evaluation threshold was violated, 2 bad
configuration or usage, 3 bad or missing input data.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import yaml

from . import calib, evaluation, scenes, synth
from . import io as dio
from .config import load_config
from .errors import ConfigError, DocDepthError
from .pipeline import STAGES, Pipeline
from .plotting import classification_bars, error_histogram, error_map

log = logging.getLogger("docdepth")

EXIT_OK, EXIT_THRESHOLD, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3

PRESETS = {
    "street": scenes.street_scene,
    "facade": scenes.facade_scene,
    "crossing": scenes.crossing_scene,
}


# ----------------------------------------------------------------------------
# helpers

def _output_root(default) -> Path:
    env = os.environ.get("DOCDEPTH_OUTPUT_ROOT")
    return Path(env) if env else Path(default)


def _print_table(rows: Sequence[Dict], keys: Sequence[str], out=None):
    """Tab-delimited table on stdout."""
    out = out or sys.stdout
    out.write("\t".join(keys) + "\n")
    for r in rows:
        vals = []
        for k in keys:
            v = r.get(k)
            vals.append(f"{v:.6g}" if isinstance(v, float) else ("" if v is None else str(v)))
        out.write("\t".join(vals) + "\n")


def _write_csv(path, rows: Sequence[Dict], keys: Sequence[str]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(keys), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, default=float))


def _pipeline(args) -> Pipeline:
    cfg = load_config(args.config, workers=args.workers, seed=args.seed, manifest=args.manifest)
    if cfg.manifest is None:
        raise ConfigError("no manifest given (positional argument or 'manifest' config key)")
    m = dio.read_manifest(cfg.manifest, output_root=args.output_root)
    return Pipeline(m, cfg, resume=args.resume, force=getattr(args, "force", False),
                    previews=not getattr(args, "no_previews", False))


def _stage_line(rep):
    state = "cached" if rep.cached else f"ran {rep.frames} items in {rep.wall_time:.2f} s ({rep.per_frame:.4f} s/item)"
    extra = "".join(f", {k} {v:.4f}" for k, v in rep.extra.items())
    return f"{rep.name}: {state}{extra}"


# ----------------------------------------------------------------------------
# stage commands

def cmd_calibrate(args) -> int:
    session = calib.read_session(args.session)
    res = calib.calibrate(session.views, iters=args.iters, inlier_tol=args.inlier_tol,
                          seed=args.seed if args.seed is not None else 0)
    rig = dio.CameraRig(session.K, res.C_cl, session.width, session.height, session.distortion)
    out = Path(args.out) if args.out else Path(args.session).with_name("rig.yaml")
    dio.write_rig(out, rig, res.report())
    rows = [{"view": i, "angle_residual_deg": float(a), "offset_residual_m": float(o)}
            for i, a, o in zip(res.used_views, res.angle_residuals_deg, res.offset_residuals_m)]
    _print_table(rows, ["view", "angle_residual_deg", "offset_residual_m"])
    if res.skipped_views:
        print(f"skipped views: {res.skipped_views}")
    print(f"rig written to {out}")
    return EXIT_OK


def _run_stages(args, stages) -> int:
    pipe = _pipeline(args)
    if stages[0] != "ground":
        pipe.check_upstream(stages[0])
    pipe.run(stages, on_stage=lambda rep: print(_stage_line(rep)))
    if "render" in stages:
        dens = pipe.density_table()
        if dens:
            print(f"mean density {np.mean([r['density'] for r in dens]):.4f} over {len(dens)} maps "
                  f"({pipe.out / 'density.csv'})")
    return EXIT_OK


def cmd_ground(args) -> int:
    return _run_stages(args, ["ground"])


def cmd_doc(args) -> int:
    return _run_stages(args, ["doc"])


def cmd_render(args) -> int:
    return _run_stages(args, ["render"])


def cmd_annotate(args) -> int:
    return _run_stages(args, list(STAGES))


# ----------------------------------------------------------------------------
# evaluation

def _pair_files(pred_dir, truth_dir, suffixes) -> List[tuple]:
    def index(d):
        found = {}
        for suf in suffixes:            # earlier suffixes win
            for p in sorted(Path(d).glob(f"*{suf}")):
                found.setdefault(p.stem, p)
        return found

    pred, truth = index(pred_dir), index(truth_dir)
    common = sorted(set(pred) & set(truth))
    if not common:
        raise DocDepthError(f"no matching files between {pred_dir} and {truth_dir}")
    return [(k, pred[k], truth[k]) for k in common]


def _eval_labels(args, out: Path):
    rows, total = [], evaluation.ClassificationReport(0, 0, 0, 0)
    for name, p, t in _pair_files(args.pred, args.truth, [".label"]):
        pred = dio.read_labels(p)
        truth = (dio.read_semantic_labels(t, len(pred)) if args.truth_format == "semantic"
                 else dio.read_labels(t, len(pred)))
        rep = evaluation.score_classification(pred, truth)
        total = total + rep
        rows.append({"frame": name, **rep.as_dict()})
    summary = {"frame": "all", **total.as_dict()}
    keys = ["frame", "SA", "DA", "F1", "F1_sa_da", "precision", "recall",
            "tp_static", "fp_static", "tp_dynamic", "fp_dynamic"]
    classification_bars({"sequence": summary}, out / "classification.png")
    checks = []
    if args.min_sa is not None:
        checks.append(("SA", summary["SA"], ">=", args.min_sa))
    if args.min_da is not None:
        checks.append(("DA", summary["DA"], ">=", args.min_da))
    if args.min_f1 is not None:
        checks.append(("F1", summary["F1"], ">=", args.min_f1))
    return rows, summary, keys, checks


def _eval_depth(args, out: Path):
    rows, errs = [], []
    worst = None
    for name, p, t in _pair_files(args.pred, args.truth, [".bin", ".png"]):
        pred, truth = dio.read_depth(p), dio.read_depth(t)
        rep = evaluation.score_depth(pred, truth, mode=args.mode)
        if args.point_to_point:
            # every reference point to its nearest predicted point
            rep.point_to_point = evaluation.point_to_point(
                evaluation.deproject(truth, args._K), evaluation.deproject(pred, args._K))
        rows.append({"frame": name, **rep.as_dict()})
        both = pred.valid & truth.valid if args.mode == "both" else truth.valid
        d = np.where(pred.valid, pred.depth, 0.0)
        errs.append((d - np.where(truth.valid, truth.depth, 0.0))[both])
        if worst is None or rep.rmse > worst[0]:
            worst = (rep.rmse, name, pred, truth)
    e = np.concatenate(errs)
    summary = {"frame": "all", "rmse": float(np.sqrt(np.mean(e ** 2))), "mae": float(np.mean(np.abs(e))),
               "absrel": float(np.mean([r["absrel"] for r in rows])),
               "density": float(np.mean([r["density"] for r in rows])), "n": int(e.size)}
    if args.point_to_point:
        summary["point_to_point"] = float(np.mean([r["point_to_point"] for r in rows]))
    error_histogram(e, out / "depth_errors.png")
    error_map(worst[2], worst[3], out / f"error_map_{worst[1]}.png", title=f"{worst[1]} (worst RMSE)")
    keys = ["frame", "rmse", "mae", "absrel", "density", "n", "point_to_point", "coverage"]
    checks = []
    if args.max_rmse is not None:
        checks.append(("rmse", summary["rmse"], "<=", args.max_rmse))
    if args.min_density is not None:
        checks.append(("density", summary["density"], ">=", args.min_density))
    if args.max_point_to_point is not None and args.point_to_point:
        checks.append(("point_to_point", summary["point_to_point"], "<=", args.max_point_to_point))
    return rows, summary, keys, checks


def _eval_cross(args, out: Path):
    """Dense maps (camera times) against the time-aligned frame of a second LiDAR."""
    rig_b = dio.read_rig(args.rig_b)
    times = dio.read_times(args.camera_times)
    traj_b = dio.read_poses(args.poses_b, args.pose_format)
    clouds = sorted(Path(args.clouds_b).glob("*.bin"))
    if len(clouds) != len(traj_b):
        raise DocDepthError(f"{len(clouds)} sensor-B clouds but {len(traj_b)} poses")
    rows, pairs = [], []
    for j, t in enumerate(times):
        p = Path(args.pred) / f"{j:06d}.bin"
        if not p.exists():
            p = p.with_suffix(".png")
        if not p.exists():
            continue
        k = int(np.argmin(np.abs(traj_b.times - t)))
        if abs(traj_b.times[k] - t) > args.max_time_offset:
            log.warning("map %d: no sensor-B frame within %.3f s, skipped", j, args.max_time_offset)
            continue
        pair = (dio.read_depth(p), dio.read_cloud_bin(clouds[k]))
        rep = evaluation.cross_lidar_validate([pair], rig_b, args.occlusion_margin)
        rows.append({"frame": f"{j:06d}", "b_frame": k, **rep.as_dict()})
        pairs.append(pair)
    if not pairs:
        raise DocDepthError("no time-aligned sensor-B frames")
    total = evaluation.cross_lidar_validate(pairs, rig_b, args.occlusion_margin)
    summary = {"frame": "all", **total.as_dict()}
    errs = []
    for dense, cloud in pairs:
        r, c, z = evaluation.project_sparse(cloud.points, rig_b)
        d = dense.depth[r, c]
        ok = np.isfinite(d) & ~(z - d > args.occlusion_margin)
        errs.append(d[ok] - z[ok])
    error_histogram(np.concatenate(errs), out / "cross_errors.png", title="dense depth - sensor B")
    keys = ["frame", "b_frame", "rmse", "mae", "absrel", "density", "n"]
    checks = []
    if args.max_rmse is not None:
        checks.append(("rmse", summary["rmse"], "<=", args.max_rmse))
    return rows, summary, keys, checks


def cmd_eval(args) -> int:
    out = Path(args.out) if args.out else _output_root(Path(args.pred).parent) / f"eval_{args.mode_name}"
    if args.mode_name == "depth" and args.point_to_point:
        if not args.rig:
            raise ConfigError("--point-to-point needs --rig for the intrinsics")
        args._K = dio.read_rig(args.rig).K
    fn = {"labels": _eval_labels, "depth": _eval_depth, "cross": _eval_cross}[args.mode_name]
    rows, summary, keys, checks = fn(args, out)
    _print_table(rows + [summary], keys)
    _write_csv(out / "report.csv", rows + [summary], keys)
    failed = []
    for name, val, op, lim in checks:
        ok = val is not None and (val >= lim if op == ">=" else val <= lim)
        print(f"{'PASS' if ok else 'FAIL'}\t{name} {val if val is None else f'{val:.6g}'} {op} {lim}")
        if not ok:
            failed.append(name)
    _write_json(out / "report.json", {"summary": summary, "frames": rows,
                                      "thresholds": [dict(zip(("metric", "value", "op", "limit"), c)) for c in checks],
                                      "failed": failed})
    print(f"reports and figures in {out}")
    return EXIT_THRESHOLD if failed else EXIT_OK


# ----------------------------------------------------------------------------
# synthetic data

def cmd_synth(args) -> int:
    out = Path(args.out)
    if args.preset == "calibration":
        truth = synth.forward_camera_extrinsic((0.1, -0.05, -0.08), yaw=0.02, pitch=-0.03)
        views, _ = scenes.synthetic_calibration(truth, n_views=args.views, noise_sigma=args.noise,
                                                seed=args.seed or 0)
        K = np.array([[900.0, 0.0, 640.0], [0.0, 900.0, 360.0], [0.0, 0.0, 1.0]])
        calib.write_session(out / "session.yaml", calib.CalibrationSession(K, 1280, 720, views))
        dio.write_rig(out / "rig_truth.yaml", dio.CameraRig(K, truth, 1280, 720))
        print(f"calibration session written to {out / 'session.yaml'}")
        return EXIT_OK
    if args.script:
        data = yaml.safe_load(Path(args.script).read_text())
    else:
        kw = {}
        if args.frames is not None:
            kw["n_frames"] = args.frames
        if args.noise:
            kw["noise_sigma"] = args.noise
        if args.preset == "street" and args.second_sensor:
            kw["second_sensor"] = True
        data = PRESETS[args.preset](**kw)
    if args.seed is not None:
        data["seed"] = args.seed
    out.mkdir(parents=True, exist_ok=True)
    (out / "scene.yaml").write_text(yaml.safe_dump(data, sort_keys=False))
    t0 = time.perf_counter()
    m = synth.generate_sequence(synth.script_from_dict(data), out, write_depth=not args.no_depth)
    print(f"{len(m.clouds)} frames written to {out} in {time.perf_counter() - t0:.1f} s (manifest {out / 'manifest.yaml'})")
    return EXIT_OK


# ----------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="docdepth", description="Dense depth ground truth from LiDAR sequences.")
    ap.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-vv for per-frame timings)")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, manifest=True):
        if manifest:
            p.add_argument("manifest", nargs="?", help="sequence manifest (YAML)")
        p.add_argument("--config", help="pipeline configuration (YAML)")
        p.add_argument("--workers", type=int, help="worker threads per stage")
        p.add_argument("--seed", type=int, help="random seed")
        p.add_argument("--resume", action="store_true", help="keep per-frame outputs of an interrupted stage")
        p.add_argument("--output-root", help="override the output directory (also DOCDEPTH_OUTPUT_ROOT)")

    p = sub.add_parser("calibrate", help="camera/LiDAR extrinsic from a calibration session")
    p.add_argument("session")
    p.add_argument("--out", help="rig file to write (default: rig.yaml next to the session)")
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--inlier-tol", type=float, default=0.02)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_calibrate)

    for name, fn, hlp in (("ground", cmd_ground, "label ground points"),
                          ("doc", cmd_doc, "classify static / dynamic points"),
                          ("render", cmd_render, "render dense depth maps"),
                          ("annotate", cmd_annotate, "run all stages, skipping cached ones")):
        p = sub.add_parser(name, help=hlp)
        common(p)
        p.add_argument("--force", action="store_true", help="ignore cached stage outputs")
        p.add_argument("--no-previews", action="store_true", help="skip preview figures")
        p.set_defaults(func=fn)

    p = sub.add_parser("eval", help="score predictions against references")
    esub = p.add_subparsers(dest="mode_name", required=True)
    pl = esub.add_parser("labels", help="per-point classification")
    pl.add_argument("pred")
    pl.add_argument("truth")
    pl.add_argument("--truth-format", choices=["labels", "semantic"], default="labels")
    pl.add_argument("--min-sa", type=float)
    pl.add_argument("--min-da", type=float)
    pl.add_argument("--min-f1", type=float)
    pd = esub.add_parser("depth", help="depth maps against reference maps")
    pd.add_argument("pred")
    pd.add_argument("truth")
    pd.add_argument("--mode", choices=["both", "truth"], default="both")
    pd.add_argument("--point-to-point", action="store_true", help="also report 3D point-to-point distance")
    pd.add_argument("--rig", help="rig file (intrinsics for --point-to-point)")
    pd.add_argument("--max-rmse", type=float)
    pd.add_argument("--min-density", type=float)
    pd.add_argument("--max-point-to-point", type=float)
    pc = esub.add_parser("cross", help="dense maps against a second, time-aligned LiDAR")
    pc.add_argument("pred", help="directory of dense maps indexed like the camera times")
    pc.add_argument("camera_times")
    pc.add_argument("clouds_b", help="directory of sensor-B clouds")
    pc.add_argument("poses_b")
    pc.add_argument("rig_b", help="rig whose extrinsic maps the camera into sensor B")
    pc.add_argument("--pose-format", default="tum", choices=["tum", "kitti_matrix"])
    pc.add_argument("--occlusion-margin", type=float, default=0.5)
    pc.add_argument("--max-time-offset", type=float, default=0.005)
    pc.add_argument("--max-rmse", type=float)
    for q in (pl, pd, pc):
        q.add_argument("--out", help="report directory")
        q.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic sequence")
    p.add_argument("out")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--script", help="scene script (YAML)")
    g.add_argument("--preset", choices=[*PRESETS, "calibration"], default="street")
    p.add_argument("--frames", type=int)
    p.add_argument("--noise", type=float, default=0.0, help="range noise sigma (m)")
    p.add_argument("--second-sensor", action="store_true", help="street preset: add a second LiDAR")
    p.add_argument("--views", type=int, default=5, help="calibration preset: number of board views")
    p.add_argument("--no-depth", action="store_true", help="skip analytic depth maps")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DocDepthError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
