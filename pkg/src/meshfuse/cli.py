"""Command-line entry point: ``meshfuse <command> [options]``.

Exit codes: 0 success, 1 numeric failure (divergence, non-finite
gradients, failed gradient check), 2 input or configuration error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import body_model as bm
from . import io as mio
from . import metrics, occupancy as occ
from .body_model import ModelError
from .fit import FitError, PosePriorMoG, PriorError
from .geometry import GeometryError, GridSpec, RigidTransform
from .gradcheck import check_gradient, format_rows
from .lidar_sim import SensorSpec, SensorSpecError
from .pipeline import fit_person
from .synthetic import default_camera, make_scene, random_problem, toy_pose_prior
from .visibility import VisibilityConfigError

log = logging.getLogger("meshfuse")

INPUT_ERRORS = (mio.InputError, mio.ConfigError, ModelError, GeometryError, SensorSpecError,
                PriorError, VisibilityConfigError, occ.OccupancyError, metrics.MetricError)


class NumericFailure(RuntimeError):
    pass


def _setup_logging():
    level = os.environ.get("MESHFUSE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)


def _pool_map(fn, items, threads):
    """Ordered map over independent work items."""
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def _load_model(path):
    if path is None:
        return bm.make_toy_model()
    try:
        return bm.load_model(path)
    except OSError as exc:
        raise mio.InputError(f"{path}: cannot read ({exc.strerror or exc})") from exc


def _load_prior(path, model):
    if path is None:
        return None
    if path == "toy":
        return toy_pose_prior(model)
    try:
        return PosePriorMoG.load(path)
    except OSError as exc:
        raise mio.InputError(f"{path}: cannot read ({exc.strerror or exc})") from exc
    except (KeyError, ValueError) as exc:
        raise mio.InputError(f"{path}: invalid pose prior: {exc}") from exc


# ---------------------------------------------------------------------------
# make-toy-model


def cmd_make_toy_model(args, cfg):
    model = bm.make_toy_model(args.density)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bm.save_model(model, out / "toy_model.bma")
    mio.write_json(out / "toy_pose_prior.json", toy_pose_prior(model).to_dict())
    print(f"wrote {out / 'toy_model.bma'} (V={model.n_vertices}, J={model.n_joints}, "
          f"B={model.n_betas}) and {out / 'toy_pose_prior.json'}")
    return 0


# ---------------------------------------------------------------------------
# simulate


def _sensor_from_args(args, cfg) -> SensorSpec:
    if args.sensor_file:
        d = mio.read_json(args.sensor_file)
        try:
            return SensorSpec(**d)
        except TypeError as exc:
            raise mio.InputError(f"{args.sensor_file}: invalid sensor spec: {exc}") from exc
    return cfg.sensor(args.sensor)


def _simulate_one(job):
    model, model_path, spec, seed, args, truth, camera, out = job
    part_ids = [_part_id(model, p) for p in args.occlude]
    prior = toy_pose_prior(model)
    scene = make_scene(model, seed, spec, noiseless=args.noiseless, occluded_parts=part_ids,
                       camera=camera, truth=truth)
    out.mkdir(parents=True, exist_ok=True)
    mio.save_cloud(out / "cloud.csv", scene.lidar)
    mio.save_params(out / "truth_params.json", scene.truth)
    mio.save_params(out / "init_params.json", scene.init)
    mio.save_keypoints(out / "keypoints.json", scene.keypoints)
    mio.save_camera(out / "camera.json", scene.camera)
    mio.write_json(out / "pose_prior.json", prior.to_dict())
    manifest = {
        "format": "meshfuse-scene/1", "seed": seed,
        "sensor": spec.noiseless().to_dict() if args.noiseless else spec.to_dict(),
        "noiseless": bool(args.noiseless), "model": model_path,
        "occluded_parts": part_ids, "n_points": int(len(scene.lidar)),
        "truth": scene.truth.to_dict(),
        "files": {"cloud": "cloud.csv", "truth": "truth_params.json", "init": "init_params.json",
                  "keypoints": "keypoints.json", "camera": "camera.json",
                  "pose_prior": "pose_prior.json"},
    }
    mio.write_json(out / "manifest.json", manifest)
    log.info("[seed %d] %d points -> %s", seed, len(scene.lidar), out)
    return out


def _part_id(model, p):
    if str(p).isdigit():
        return int(p)
    if p in model.part_names:
        return model.part_names.index(p)
    raise mio.InputError(f"unknown body part {p!r}; known: {list(model.part_names)}")


def cmd_simulate(args, cfg):
    spec = _sensor_from_args(args, cfg)
    model = _load_model(args.model)
    model_path = str(Path(args.model).resolve()) if args.model else None
    truth = mio.load_params(args.params) if args.params else None
    camera = mio.load_camera(args.camera) if args.camera else default_camera()
    out = Path(args.out_dir)
    seeds = [args.seed + i for i in range(args.count)]
    jobs = [(model, model_path, spec, s, args, truth, camera,
             out / f"scene_{s:04d}" if args.count > 1 else out) for s in seeds]
    for d in _pool_map(_simulate_one, jobs, args.threads):
        print(f"wrote {d}")
    return 0


# ---------------------------------------------------------------------------
# fit


def _fit_inputs(args, bundle):
    """Resolve the input files of one fit job from a bundle and/or flags."""
    files = {}
    truth = None
    model_path = args.model
    if bundle is not None:
        b = Path(bundle)
        man = mio.read_json(b / "manifest.json")
        for k, v in man.get("files", {}).items():
            files[k] = b / v
        model_path = model_path or man.get("model")
        truth = man.get("truth")
    for k in ("init", "keypoints", "cloud", "camera", "pose_prior"):
        v = getattr(args, k.replace("-", "_"), None)
        if v:
            files[k] = Path(v)
    for k in ("init", "keypoints", "cloud", "camera"):
        if k not in files:
            raise mio.InputError(f"missing --{k} (or a --bundle providing it)")
        if not files[k].exists():
            raise mio.InputError(f"{files[k]}: no such file")
    return files, model_path, truth


def _fit_one(job):
    args, cfg, bundle, out = job
    files, model_path, truth = _fit_inputs(args, bundle)
    model = _load_model(model_path)
    init = mio.load_params(files["init"])
    kp = mio.load_keypoints(files["keypoints"])
    cloud, _ = mio.load_cloud(files["cloud"])
    camera = mio.load_camera(files["camera"])
    prior = _load_prior(str(files["pose_prior"]) if "pose_prior" in files else None,
                        model)
    dcfg = cfg.dataset(args.weights_section)
    opt = cfg.optimizer if args.max_iters is None else replace(cfg.optimizer, max_iters=args.max_iters)
    tag = Path(bundle).name if bundle else "fit"
    outcome = fit_person(model, init, kp, camera, cloud, dcfg, opt_config=opt, pose_prior=prior)
    out.mkdir(parents=True, exist_ok=True)
    mio.save_params(out / "params.json", outcome.params)
    res = outcome.result
    stages = {"mode": outcome.mode, "losses": outcome.stage_losses, "icp_rmse": outcome.icp_rmse,
              "status": res.status, "iterations": res.iterations,
              "visible_vertices": int(len(outcome.visible)),
              "occluded_parts": sorted(int(p) for p in outcome.occluded_parts),
              "occluded_joints": list(outcome.occluded_joints),
              "weights_section": args.weights_section}
    if truth is not None:
        gt = bm.pose_mesh(model, bm.BodyParams.from_dict(truth))
        pred = bm.pose_mesh(model, outcome.params)
        stages["truth_pve_mm"] = metrics.pve(pred[0], gt[0])
        stages["truth_mpjpe_mm"] = metrics.mpjpe(pred[1], gt[1])
    mio.write_json(out / "stages.json", stages)
    mio.write_json(out / "trace.json", res.trace)
    if args.dump_meshes:
        for name, p in (("init", init), ("icp", outcome.after_icp), ("final", outcome.params)):
            mio.save_obj(out / f"mesh_{name}.obj", bm.pose_mesh(model, p)[0], model.faces)
    log.info("[%s] %s after %d iterations, loss %.6g", tag, res.status, res.iterations, res.loss)
    return out, res.status, stages


def cmd_fit(args, cfg):
    out = Path(args.out_dir)
    bundles = args.bundle or [None]
    jobs = [(args, cfg, b, out / Path(b).name if len(bundles) > 1 else out) for b in bundles]
    failed = False
    for d, status, stages in _pool_map(_fit_one, jobs, args.threads):
        extra = f", PVE {stages['truth_pve_mm']:.2f} mm" if "truth_pve_mm" in stages else ""
        print(f"{d}: {status} after {stages['iterations']} iterations{extra}")
        failed |= status == "diverged"
    if failed:
        print("error: optimisation diverged", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# fuse


def _grid_from(d, default: GridSpec):
    if d is None:
        return default
    try:
        return GridSpec(d["min"], d["max"], d["resolution"])
    except (KeyError, TypeError) as exc:
        raise mio.InputError(f"invalid grid block in manifest: {exc}") from exc


def _transform(d):
    if d is None:
        return RigidTransform()
    return RigidTransform(d["rotation"], d["translation"])


def _frame_humans(frame, base, spec, model_cache):
    cells, vels = [], {}
    for h in frame.get("humans", []):
        inst = int(h["instance"])
        if "mesh" in h:
            V, F = mio.load_obj(base / h["mesh"])
        else:
            mp = h.get("model")
            if mp not in model_cache:
                model_cache[mp] = _load_model(base / mp if mp else None)
            model = model_cache[mp]
            V, F = bm.pose_mesh(model, mio.load_params(base / h["params"]))[0], model.faces
        from .geometry import TriangleMesh
        cells.append(occ.rasterize_human(TriangleMesh(V, F), inst, spec, fill=bool(h.get("fill"))))
        if "velocity" in h:
            vels[inst] = tuple(float(v) for v in h["velocity"])
    return occ.merge_human_cells(*cells), vels


def cmd_fuse(args, cfg):
    man_path = Path(args.manifest)
    man = mio.read_json(man_path)
    base = man_path.parent
    frames = man.get("frames", [])
    if not frames:
        raise mio.InputError(f"{man_path}: manifest lists no frames")
    spec = _grid_from(man.get("grid"), cfg.grid)
    carve = bool(man.get("carve_max_range", False))
    ground = man.get("ground_threshold")
    with_vel = any("velocity" in h for f in frames for h in f.get("humans", []))

    loaded = []
    for f in frames:
        pts, labels = mio.load_cloud(base / f["cloud"])
        if labels is None:
            raise mio.InputError(f"{base / f['cloud']}: static fusion needs a label column")
        boxes = [occ.Box3D(b["center"], b["size"], b.get("yaw", 0.0)) for b in f.get("boxes", [])]
        # boxes are given in the frame's sensor coordinates
        keep = ~occ.dynamic_point_mask(pts, boxes)
        loaded.append((f, _transform(f.get("pose")), pts, labels, keep))

    def partial(item):
        f, pose, pts, labels, keep = item
        rep = occ.AccumulationReport()
        c = occ.accumulate_frame(pose, pts[keep], labels[keep], spec, None, ground, rep)
        return c, rep

    parts = _pool_map(partial, loaded, args.threads)
    counts = occ.LabelCounts()
    for c, rep in parts:
        counts = counts.merge(c)
        if rep.out_of_bounds or rep.below_ground:
            log.info("static map skipped %d out-of-bounds, %d below-ground points",
                     rep.out_of_bounds, rep.below_ground)
    voted = occ.vote_static(counts)
    out = Path(args.out_dir)
    model_cache = {}

    def assemble(item):
        f, pose, pts, labels, keep = item
        humans, vels = _frame_humans(f, base, spec, model_cache)
        world = pose.apply(pts)
        fu = occ.complete_free_unknown(set(voted) | set(humans), pose.translation, world, spec,
                                       carve_max_range=carve)
        grid = occ.assemble_frame(voted, humans, fu, spec, vels if with_vel else None)
        name = f.get("name", f"{loaded.index(item):04d}")
        occ.save_grid(out / f"frame_{name}.vox", grid)
        if args.csv:
            mio.atomic_write_text(out / f"frame_{name}.csv", occ.grid_to_csv(grid))
        return name, grid

    for name, grid in _pool_map(assemble, loaded, args.threads):
        c = grid.counts()
        print(f"frame {name}: {spec.shape[0]}x{spec.shape[1]}x{spec.shape[2]} cells, "
              f"{c['occupied']} occupied, {c['free']} free, {c['unknown']} unknown")
    return 0


# ---------------------------------------------------------------------------
# evaluate


def _read_any(path, model):
    p = Path(path)
    if p.suffix == ".vox":
        try:
            return "grid", occ.load_grid(p)
        except OSError as exc:
            raise mio.InputError(f"{p}: cannot read ({exc.strerror or exc})") from exc
    if p.suffix == ".obj":
        V, F = mio.load_obj(p)
        return "mesh", (V, F, None)
    if p.suffix == ".json":
        params = mio.load_params(p)
        V, J = bm.pose_mesh(model, params)
        return "mesh", (V, model.faces, J)
    raise mio.InputError(f"{p}: unsupported file type (expected .vox, .obj or params .json)")


def cmd_evaluate(args, cfg):
    if len(args.pred) != len(args.gt):
        raise mio.InputError("--pred and --gt must be given the same number of times")
    model = _load_model(args.model)
    report = {"items": []}
    for pf, gf in zip(args.pred, args.gt):
        kp, pred = _read_any(pf, model)
        kg, gt = _read_any(gf, model)
        if kp != kg:
            raise mio.InputError(f"cannot compare a {kp} ({pf}) with a {kg} ({gf})")
        item = {"pred": str(pf), "gt": str(gf)}
        if kp == "mesh":
            if not np.array_equal(pred[1], gt[1]):
                raise mio.InputError(f"{pf} and {gf} have different mesh topology")
            item["mesh"] = metrics.mesh_report(pred[0], gt[0], gt[1], pred[2], gt[2])
            if pred[2] is None:
                item["mesh"]["joints"] = "omitted: joints need params inputs"
            item["occupancy"] = "omitted: inputs are meshes"
        else:
            item["occupancy"] = metrics.occupancy_report(pred, gt)
            item["mesh"] = "omitted: inputs are voxel grids"
        report["items"].append(item)
    out = Path(args.out_dir)
    mio.atomic_write_text(out / "report.json", metrics.report_json(report))
    table = metrics.report_table(report)
    mio.atomic_write_text(out / "report.txt", table)
    print(table, end="")
    return 0


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args, cfg, grad_fn=None):
    if not args.h > 0:
        raise mio.ConfigError("--h must be positive")
    if not args.tolerance > 0:
        raise mio.ConfigError("--tolerance must be positive")
    model = _load_model(args.model) if args.model else bm.make_toy_model(1)
    weights = cfg.dataset(args.weights_section).weights
    ok = True
    chunks = []
    for i in range(args.count):
        problem, params = random_problem(model, args.seed + i, weights=weights)
        rows = check_gradient(problem, params, args.h, args.tolerance, grad_fn=grad_fn)
        chunks.append(f"# problem seed {args.seed + i}\n" + format_rows(rows))
        ok &= all(r.passed for r in rows)
    text = "".join(chunks) + ("all terms pass\n" if ok else "gradient check FAILED\n")
    print(text, end="")
    if args.out_dir:
        mio.atomic_write_text(Path(args.out_dir) / "gradcheck.txt", text)
    return 0 if ok else 1


# ---------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file layered over the built-in configuration")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1, help="worker threads for independent jobs")
    common.add_argument("--out-dir", default=".")

    p = argparse.ArgumentParser(prog="meshfuse", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-toy-model", parents=[common], help="write the toy body model")
    s.add_argument("--density", type=int, default=2)
    s.set_defaults(func=cmd_make_toy_model)

    s = sub.add_parser("simulate", parents=[common], help="simulate a LiDAR sweep of a body")
    s.add_argument("--sensor", default="Ouster-128")
    s.add_argument("--sensor-file", help="JSON sensor spec overriding --sensor")
    s.add_argument("--model", help="body model archive (default: toy model)")
    s.add_argument("--params", help="ground-truth params JSON (default: random from --seed)")
    s.add_argument("--camera", help="camera JSON (default: 640x480, f=600)")
    s.add_argument("--count", type=int, default=1, help="scenes with seeds seed..seed+count-1")
    s.add_argument("--noiseless", action="store_true")
    s.add_argument("--occlude", action="append", default=[], help="body part to occlude")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("fit", parents=[common], help="refine body params against keypoints and LiDAR")
    s.add_argument("--bundle", action="append", help="scene directory written by simulate")
    s.add_argument("--model")
    s.add_argument("--init")
    s.add_argument("--keypoints")
    s.add_argument("--cloud")
    s.add_argument("--camera")
    s.add_argument("--pose-prior", dest="pose_prior", help="prior file (.json/.npz) or 'toy'")
    s.add_argument("--weights-section", default="3dpw")
    s.add_argument("--max-iters", type=int)
    s.add_argument("--dump-meshes", action="store_true")
    s.set_defaults(func=cmd_fit, pose_prior_name=None)

    s = sub.add_parser("fuse", parents=[common], help="fuse labeled frames into voxel grids")
    s.add_argument("--manifest", required=True)
    s.add_argument("--csv", action="store_true", help="also write CSV dumps")
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("evaluate", parents=[common], help="mesh and occupancy metrics")
    s.add_argument("--pred", action="append", required=True)
    s.add_argument("--gt", action="append", required=True)
    s.add_argument("--model")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    s.add_argument("--model")
    s.add_argument("--h", type=float, default=1e-5)
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--weights-section", default="3dpw")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = mio.load_config(args.config)
        if getattr(args, "threads", 1) < 1:
            raise mio.ConfigError("--threads must be at least 1")
        if getattr(args, "max_iters", None) is not None and args.max_iters < 0:
            raise mio.ConfigError("--max-iters must be non-negative")
        return args.func(args, cfg)
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FitError, NumericFailure, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
