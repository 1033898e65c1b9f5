"""Command line interface.

    nearcps synth --out data/case
    nearcps pipeline --case data/case --out runs/case
    nearcps bench --sweep distance --out runs/distance

Every subcommand accepts ``--config file.yaml`` and ``--set section.key=value``
overrides; explicit flags win over both.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, calib, decrosstalk, integrate, io, metrics, pipeline, solver, synth

log = logging.getLogger("nearcps")


def _noise(text: str) -> float:
    """Accept plain floats or fractions such as 2/255."""
    if "/" in text:
        a, b = text.split("/", 1)
        return float(a) / float(b)
    return float(text)


def _emit(obj) -> None:
    json.dump(obj, sys.stdout, indent=2, default=io._json_default)
    sys.stdout.write("\n")


def _config(args) -> dict:
    cfg = pipeline.load_config(getattr(args, "config", None), getattr(args, "set", None) or ())
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    return cfg


def _scene_overrides(args, cfg) -> synth.SceneSpec:
    spec = pipeline.scene_spec(cfg)
    mapping = {"size": "size", "geometry": "geometry", "albedo": "albedo", "distance": "distance",
               "elevation": "elevation", "anisotropy": "anisotropy", "crosstalk": "crosstalk",
               "noise": "noise_sigma", "proxy_noise": "proxy_noise_deg", "minority": "minority_fraction"}
    kw = {field: getattr(args, a) for a, field in mapping.items() if getattr(args, a, None) is not None}
    if getattr(args, "seed", None) is not None:
        kw["seed"] = args.seed
    return spec.replace(**kw)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    cfg = _config(args)
    spec = _scene_overrides(args, cfg)
    out = Path(args.out)
    if args.sweep:
        values = args.values if args.values else synth.STANDARD_SWEEPS[args.sweep]
        manifest = synth.synth_sweep(out, spec, args.sweep, values)
    else:
        entry = synth.write_scene(out, synth.build_scene(spec))
        entry["dir"] = "."
        manifest = {"sweep": None, "values": [], "cases": [entry]}
        io.write_json(out / "manifest.json", manifest)
    _emit({"manifest": str(out / "manifest.json"), "cases": len(manifest["cases"])})
    return 0


def cmd_decrosstalk(args) -> int:
    mask = io.read_mask_png(args.mask) if getattr(args, "mask", None) else None
    if args.action == "estimate":
        images = [io.load_image(p, args.gamma, mask) for p in args.images]
        d = decrosstalk.estimate(images)
        d.save(args.out)
        _emit(d.to_dict())
    else:
        d = decrosstalk.Decrosstalk.load(args.matrix)
        im, n = decrosstalk.apply(d, io.load_image(args.image, args.gamma, mask))
        io.write_pfm(args.out, im.data)
        _emit({"output": args.out, "clamped_negative": n})
    return 0


def _inputs_from_args(args, cfg) -> dict:
    inp = cfg["inputs"]
    for key in ("image", "proxy_normals", "proxy_positions", "mask", "sample_mask", "rig"):
        v = getattr(args, key, None)
        if v is not None:
            inp[key] = v
    if getattr(args, "gamma", None) is not None:
        inp["gamma"] = args.gamma
    return pipeline.load_inputs(cfg)


def cmd_calibrate(args) -> int:
    cfg = _config(args)
    for flag, key in (("iterations", "iterations"), ("tau", "tau"), ("eta", "eta_deg")):
        if getattr(args, flag) is not None:
            cfg["calib"][key] = getattr(args, flag)
    data = _inputs_from_args(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = pipeline.run_calibration(data["image"], data["proxy_normals"], data["proxy_positions"], cfg, out,
                                   data["sample_mask"])
    io.write_json(out / "provenance.json", pipeline.provenance(cfg))
    _emit({"rig": str(out / "rig.json"), "positions": res.rig.positions})
    return 0


def cmd_reconstruct(args) -> int:
    cfg = _config(args)
    data = _inputs_from_args(args, cfg)
    if cfg["inputs"].get("rig") is None:
        raise pipeline.PreconditionError("reconstruct needs --rig")
    rig = io.load_rig(pipeline._need(cfg["inputs"]["rig"], "rig"))
    scfg = pipeline.solver_config(cfg, args.mode)
    grid = solver.ChromaticityGrid(cfg.get("grid_step_deg", 1.0))
    res = solver.solve(data["image"], (rig, data["proxy_positions"]), data["proxy_normals"], scfg, grid)
    out = Path(args.out)
    pipeline.save_reconstruction(out, res)
    if args.maps:
        for name, m in res.maps.items():
            if isinstance(m, np.ndarray) and m.ndim == 2:
                io.write_pfm(out / f"map_{name}.pfm", m.astype(float))
    io.write_json(out / "provenance.json", pipeline.provenance(cfg))
    _emit({"normals": str(out / "normals.pfm"), "pixels": res.diagnostics["num_pixels"],
           "seconds": res.diagnostics["seconds"]})
    return 0


def cmd_integrate(args) -> int:
    mask = io.read_mask_png(args.mask) if args.mask else None
    normals = io.load_vector_map(args.normals, mask)
    depth = integrate.integrate(normals, args.pixel_pitch)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.save_scalar_map(out / "depth.pfm", depth)
    mesh = integrate.export_mesh(depth, out / ("mesh.ply" if args.ply else "mesh.obj"), args.pixel_pitch, normals)
    _emit({"depth": str(out / "depth.pfm"), "vertices": len(mesh.vertices), "faces": len(mesh.faces)})
    return 0


def _evaluate_manifest(path) -> tuple[dict, dict]:
    """Read an evaluation manifest: {"est": {...}, "gt": {...}, "face_center": [...]}.

    Both sections may name ``normals``, ``rig`` and ``depth`` files; ``gt`` may
    add ``positions``.  Relative paths are taken from the manifest's folder.
    """
    base = Path(path).resolve().parent
    m = io.read_json(path)

    def resolve(section):
        return {k: str(base / v) for k, v in (m.get(section) or {}).items()}

    return resolve("est"), dict(resolve("gt"), face_center=m.get("face_center"))


def cmd_evaluate(args) -> int:
    if args.manifest:
        est, gtf = _evaluate_manifest(args.manifest)
    else:
        est = {"normals": args.est_normals, "rig": args.est_rig, "depth": args.est_depth}
        gtf = {"normals": args.gt_normals, "rig": args.gt_rig, "depth": args.gt_depth,
               "positions": args.gt_positions, "face_center": args.face_center}
    cfg = pipeline.default_config()
    cfg["gt"].update({k: v for k, v in gtf.items() if v is not None})
    gt = pipeline.load_gt(cfg)
    normals = io.load_vector_map(est["normals"]) if est.get("normals") else None
    rig = io.load_rig(est["rig"]) if est.get("rig") else None
    depth = io.load_scalar_map(est["depth"]) if est.get("depth") else None
    report = pipeline.evaluate(gt, normals, rig, depth)
    if not report:
        raise pipeline.PreconditionError("nothing to evaluate: give matching estimate and ground truth files")
    if args.error_maps:
        d = Path(args.error_maps)
        d.mkdir(parents=True, exist_ok=True)
        if normals is not None and "normals" in gt:
            io.save_scalar_map(d / "normal_error.pfm", metrics.normal_error(normals, gt["normals"]).map)
        if depth is not None and "depth" in gt:
            io.save_scalar_map(d / "depth_error.pfm", metrics.geometry_error(depth, gt["depth"])["map"])
    io.write_json(args.out, report)
    _emit(report)
    return 0


def cmd_pipeline(args) -> int:
    cfg = _config(args)
    if args.case:
        cfg = pipeline.config_from_case(args.case, cfg)
    if args.modes:
        cfg["modes"] = args.modes
    if args.ablation:
        cfg["modes"] = list(solver.MODES)
    if args.rig:
        cfg["inputs"]["rig"] = args.rig
    report = pipeline.run_pipeline(cfg, args.out)
    _emit({"report": str(Path(args.out) / "report.json"), "table": report["table"]})
    return 0


def cmd_bench(args) -> int:
    cfg = _config(args)
    spec = _scene_overrides(args, cfg)
    if args.modes:
        cfg["modes"] = args.modes
    if args.ablation:
        cfg["modes"] = list(solver.MODES)
    values = args.values if args.values is not None else synth.STANDARD_SWEEPS[args.sweep]
    summary = pipeline.run_bench(args.sweep, values, spec, cfg, args.out, args.jobs)
    _emit({"csv": str(Path(args.out) / "sweep.csv"), "points": len(values), "failed": summary["num_failed"]})
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_common(p):
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry, e.g. solver.lambda_s=2")
    p.add_argument("--seed", type=int)


def _add_scene(p):
    p.add_argument("--size", type=int)
    p.add_argument("--geometry", choices=["bumpy", "sphere"])
    p.add_argument("--albedo", choices=["two", "uniform"])
    p.add_argument("--minority", type=float, help="minority albedo fraction")
    p.add_argument("--distance", type=float)
    p.add_argument("--elevation", type=float)
    p.add_argument("--anisotropy", type=float)
    p.add_argument("--crosstalk", type=float)
    p.add_argument("--noise", type=_noise, help="Gaussian noise sigma, e.g. 2/255")
    p.add_argument("--proxy-noise", type=float, dest="proxy_noise", help="proxy normal noise, degrees RMS")


def _add_inputs(p, rig=False):
    p.add_argument("--image", help="RGB image (PFM or PNG)")
    p.add_argument("--proxy-normals", dest="proxy_normals")
    p.add_argument("--proxy-positions", dest="proxy_positions")
    p.add_argument("--mask")
    p.add_argument("--sample-mask", dest="sample_mask")
    p.add_argument("--gamma", type=float, help="input gamma to undo (PNG input)")
    if rig:
        p.add_argument("--rig", help="rig.json with light positions")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nearcps", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"nearcps {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render synthetic cases")
    _add_common(p)
    _add_scene(p)
    p.add_argument("--sweep", choices=sorted(synth.SWEEP_FIELDS))
    p.add_argument("--values", type=float, nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("decrosstalk", help="estimate or apply a de-crosstalk matrix")
    dsub = p.add_subparsers(dest="action", required=True)
    e = dsub.add_parser("estimate")
    e.add_argument("--images", nargs=3, required=True, metavar=("RED", "GREEN", "BLUE"),
                   help="white target under the red, green and blue light")
    e.add_argument("--mask")
    e.add_argument("--gamma", type=float, default=1.0)
    e.add_argument("--out", required=True)
    a = dsub.add_parser("apply")
    a.add_argument("--matrix", required=True)
    a.add_argument("--image", required=True)
    a.add_argument("--mask")
    a.add_argument("--gamma", type=float, default=1.0)
    a.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decrosstalk)

    p = sub.add_parser("calibrate", help="estimate light positions from a proxy")
    _add_common(p)
    _add_inputs(p)
    p.add_argument("--iterations", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--eta", type=float, help="cone half-angle, degrees")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("reconstruct", help="per-pixel chromaticity, albedo and normals")
    _add_common(p)
    _add_inputs(p, rig=True)
    p.add_argument("--mode", choices=solver.MODES)
    p.add_argument("--maps", action="store_true", help="also write per-term energy maps")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("integrate", help="normals to depth and mesh")
    p.add_argument("--normals", required=True)
    p.add_argument("--mask")
    p.add_argument("--pixel-pitch", type=float, default=1.0, dest="pixel_pitch")
    p.add_argument("--ply", action="store_true", help="binary PLY instead of OBJ")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_integrate)

    p = sub.add_parser("evaluate", help="error metrics against ground truth")
    p.add_argument("--manifest", help="JSON listing est/gt files")
    for k in ("normals", "rig", "depth"):
        p.add_argument(f"--est-{k}", dest=f"est_{k}")
        p.add_argument(f"--gt-{k}", dest=f"gt_{k}")
    p.add_argument("--gt-positions", dest="gt_positions")
    p.add_argument("--face-center", type=float, nargs=3, dest="face_center")
    p.add_argument("--error-maps", dest="error_maps", help="folder for per-pixel error PFMs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pipeline", help="calibrate, reconstruct, integrate and evaluate")
    _add_common(p)
    p.add_argument("--case", help="case folder written by synth")
    p.add_argument("--rig", help="skip calibration and use this rig")
    p.add_argument("--modes", nargs="+", choices=solver.MODES)
    p.add_argument("--ablation", action="store_true", help="run all three energy variants")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("bench", help="synthetic sweep to CSV")
    _add_common(p)
    _add_scene(p)
    p.add_argument("--sweep", choices=sorted(synth.SWEEP_FIELDS), required=True)
    p.add_argument("--values", type=float, nargs="*", help="defaults to the standard sweep")
    p.add_argument("--modes", nargs="+", choices=solver.MODES)
    p.add_argument("--ablation", action="store_true")
    p.add_argument("--jobs", type=int, default=1, help="sweep points run in parallel")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench, size=256)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (pipeline.PipelineError, pipeline.PreconditionError, calib.CalibrationError,
            integrate.IntegrationError, ValueError, KeyError, OSError) as e:
        print(f"nearcps {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
