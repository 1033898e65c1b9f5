"""End-to-end runs: configuration, stage orchestration, sweeps.

A run directory holds every artifact plus ``provenance.json`` (resolved
config, seeds, versions) and ``timing.json``.  Timing is kept apart so that
all other files of two runs with the same config compare byte for byte.
"""
from __future__ import annotations

import copy
import csv
import dataclasses
import logging
import platform
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__, calib, decrosstalk, integrate, io, metrics, solver, synth
from .core import VectorMap

log = logging.getLogger(__name__)

MODES = solver.MODES


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


class PreconditionError(ValueError):
    pass


def _fields(cls, drop=()):
    return {f.name: f.default for f in dataclasses.fields(cls) if f.name not in drop}


def default_config() -> dict:
    calib_cfg = _fields(calib.CalibConfig, drop=("sample_mask",))
    calib_cfg["seed"] = None
    solver_cfg = _fields(solver.SolverConfig, drop=("keep_maps",))
    solver_cfg["seed"] = None
    return {
        "seed": 0,
        "scene": dataclasses.asdict(synth.SceneSpec()),
        "inputs": {
            "image": None, "proxy_normals": None, "proxy_positions": None, "mask": None,
            "sample_mask": None, "gamma": 1.0, "rig": None, "decrosstalk": None, "pixel_pitch": None,
        },
        "gt": {"normals": None, "positions": None, "depth": None, "rig": None, "face_center": None},
        "calib": calib_cfg,
        "solver": solver_cfg,
        "grid_step_deg": 1.0,
        "integrate": {"rtol": 1e-8, "max_iter": 10000, "mesh": "obj"},
        "modes": ["full"],
    }


def merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def set_option(cfg: dict, assignment: str) -> dict:
    """Apply one ``dotted.key=value`` override; the value is parsed as YAML."""
    if "=" not in assignment:
        raise ValueError(f"override must look like key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    node = cfg
    parts = key.strip().split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise KeyError(f"unknown config section {p!r} in {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise KeyError(f"unknown config key {key!r}")
    node[parts[-1]] = yaml.safe_load(raw)
    return cfg


def load_config(path=None, overrides=()) -> dict:
    cfg = default_config()
    if path is not None:
        with open(path) as f:
            user = yaml.safe_load(f) or {}
        unknown = set(user) - set(cfg)
        if unknown:
            raise KeyError(f"{path}: unknown config keys {sorted(unknown)}")
        base = Path(path).resolve().parent
        for section in ("inputs", "gt"):
            for k, v in (user.get(section) or {}).items():
                if isinstance(v, str) and k not in ("gamma",):
                    user[section][k] = str(base / v)
        cfg = merge(cfg, user)
    for a in overrides:
        set_option(cfg, a)
    return cfg


def config_from_case(case_dir, cfg: dict | None = None) -> dict:
    """Point a config's inputs and ground truth at a case written by ``synth``."""
    d = Path(case_dir)
    entry = io.read_json(d / "case.json")
    f = entry["files"]
    cfg = copy.deepcopy(cfg) if cfg is not None else default_config()
    inputs = {"image": f["image"], "proxy_normals": f["proxy_normals"], "proxy_positions": f["proxy_positions"],
              "mask": f["mask"], "sample_mask": f["sample_mask"]}
    for k, v in inputs.items():
        if cfg["inputs"].get(k) is None:
            cfg["inputs"][k] = str(d / v)
    if cfg["inputs"].get("pixel_pitch") is None:
        cfg["inputs"]["pixel_pitch"] = entry["pixel_pitch"]
    gt = {"normals": f["gt_normals"], "positions": f["gt_positions"], "depth": f["gt_depth"], "rig": f["gt_rig"]}
    for k, v in gt.items():
        if cfg["gt"].get(k) is None:
            cfg["gt"][k] = str(d / v)
    if cfg["gt"].get("face_center") is None:
        cfg["gt"]["face_center"] = entry["face_center"]
    return cfg


def scene_spec(cfg: dict) -> synth.SceneSpec:
    return synth.SceneSpec(**cfg["scene"])


def calib_config(cfg: dict, sample_mask=None) -> calib.CalibConfig:
    c = dict(cfg["calib"])
    if c.get("seed") is None:
        c["seed"] = cfg["seed"]
    return calib.CalibConfig(sample_mask=sample_mask, **c)


def solver_config(cfg: dict, mode: str | None = None) -> solver.SolverConfig:
    c = dict(cfg["solver"])
    if c.get("seed") is None:
        c["seed"] = cfg["seed"]
    if mode is not None:
        c["mode"] = mode
    return solver.SolverConfig(**c)


def provenance(cfg: dict, extra: dict | None = None) -> dict:
    import scipy

    d = {
        "tool": "nearcps",
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "seed": cfg["seed"],
        "config": cfg,
    }
    d.update(extra or {})
    return d


def estimate_pixel_pitch(positions: VectorMap) -> float:
    """Median spacing between horizontally adjacent valid positions."""
    m = positions.mask
    both = m[:, 1:] & m[:, :-1]
    if not both.any():
        raise PreconditionError("cannot infer the pixel pitch: no horizontally adjacent valid pixels")
    dx = positions.data[:, 1:, 0] - positions.data[:, :-1, 0]
    return float(np.median(np.abs(dx[both])))


# ---------------------------------------------------------------------------
# stages


def _need(path, what):
    if path is None:
        raise PreconditionError(f"missing required input {what!r}")
    p = Path(path)
    if not p.is_file():
        raise PreconditionError(f"{what}: file not found: {p}")
    return p


def _mask(path):
    return None if path is None else io.read_mask_png(_need(path, "mask"))


def load_inputs(cfg: dict) -> dict:
    inp = cfg["inputs"]
    mask = _mask(inp.get("mask"))
    image = io.load_image(_need(inp.get("image"), "image"), inp.get("gamma", 1.0), mask)
    pn = io.load_vector_map(_need(inp.get("proxy_normals"), "proxy_normals"), mask)
    pp = io.load_vector_map(_need(inp.get("proxy_positions"), "proxy_positions"), mask)
    sample = None
    if inp.get("sample_mask") is not None:
        sample = io.read_mask_png(_need(inp["sample_mask"], "sample_mask"))
    return {"image": image, "proxy_normals": pn, "proxy_positions": pp, "mask": mask, "sample_mask": sample}


def load_gt(cfg: dict) -> dict:
    g = cfg["gt"]
    out = {}
    if g.get("normals"):
        out["normals"] = io.load_vector_map(_need(g["normals"], "gt.normals"))
    if g.get("positions"):
        out["positions"] = io.load_vector_map(_need(g["positions"], "gt.positions"))
    if g.get("depth"):
        out["depth"] = io.load_scalar_map(_need(g["depth"], "gt.depth"))
    if g.get("rig"):
        out["rig"] = io.load_rig(_need(g["rig"], "gt.rig"))
    if g.get("face_center") is not None:
        out["face_center"] = np.asarray(g["face_center"], float)
    elif "positions" in out:
        out["face_center"] = out["positions"].values().mean(axis=0)
    return out


def run_calibration(image, pn, pp, cfg, out_dir, sample_mask=None) -> calib.CalibrationResult:
    res = calib.calibrate(image, pn, pp, calib_config(cfg, sample_mask))
    out = Path(out_dir)
    io.save_rig(out / "rig.json", res.rig, calibration=res.to_dict())
    io.write_json(out / "hypotheses.json", {"lights": [d.to_dict(include_cloud=True) for d in res.lights]})
    return res


def save_reconstruction(out_dir, res: solver.ReconstructionResult) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.save_vector_map(out / "normals.pfm", res.normals)
    io.save_vector_map(out / "albedo.pfm", res.albedo)
    io.save_vector_map(out / "chromaticity.pfm", res.chromaticity)
    diag = {k: v for k, v in res.diagnostics.items() if k != "seconds"}
    diag["ablation"] = {"similarity": diag["mode"] != "consensus", "proxy": diag["mode"] == "full"}
    io.write_json(out / "diagnostics.json", diag)


def evaluate(gt: dict, normals=None, rig=None, depth=None) -> dict:
    """Metrics for whatever estimates and ground truth are at hand."""
    report = {}
    if normals is not None and "normals" in gt:
        lit = None
        if "positions" in gt and "rig" in gt:
            lit = metrics.lit_mask(gt["normals"], gt["positions"], gt["rig"])
        report["normals"] = metrics.normal_error(normals, gt["normals"], lit).to_dict()
    if rig is not None and "rig" in gt and "face_center" in gt:
        report["lights"] = metrics.summarize_light_errors(
            metrics.light_position_errors(rig, gt["rig"], gt["face_center"]))
    if depth is not None and "depth" in gt:
        g = metrics.geometry_error(depth, gt["depth"])
        g.pop("map")
        report["geometry"] = g
    return report


def _stage(name, timing, fn, *a, **kw):
    t0 = time.perf_counter()
    try:
        return fn(*a, **kw)
    except Exception as e:
        raise PipelineError(name, f"{type(e).__name__}: {e}") from e
    finally:
        timing[name] = timing.get(name, 0.0) + time.perf_counter() - t0


def run_pipeline(cfg: dict, out_dir) -> dict:
    """decrosstalk (optional), calibrate (unless a rig is given), then per mode
    reconstruct, integrate and evaluate.  Returns the report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    modes = list(cfg.get("modes") or ["full"])
    for m in modes:
        if m not in MODES:
            raise PreconditionError(f"unknown mode {m!r}; expected one of {MODES}")
    timing: dict = {}
    io.write_json(out / "provenance.json", provenance(cfg))
    try:
        report = _run(cfg, out, modes, timing)
    except PipelineError as e:
        io.write_json(out / "error.json", {"stage": e.stage, "error": str(e)})
        raise
    finally:
        io.write_json(out / "timing.json", {k: round(v, 3) for k, v in timing.items()})
    return report


def _run(cfg, out, modes, timing) -> dict:
    data = _stage("load", timing, load_inputs, cfg)
    gt = _stage("load", timing, load_gt, cfg)
    image = data["image"]
    artifacts = {"provenance": "provenance.json", "timing": "timing.json"}

    if cfg["inputs"].get("decrosstalk"):
        def _dx():
            d = decrosstalk.Decrosstalk.load(_need(cfg["inputs"]["decrosstalk"], "decrosstalk"))
            im, n = decrosstalk.apply(d, image)
            io.write_pfm(out / "image_decrosstalk.pfm", im.data)
            return im, n
        image, n_clamped = _stage("decrosstalk", timing, _dx)
        artifacts["image_decrosstalk"] = "image_decrosstalk.pfm"
    else:
        n_clamped = None

    pn, pp = data["proxy_normals"], data["proxy_positions"]
    report = {"modes": {}, "decrosstalk_clamped": n_clamped}
    if cfg["inputs"].get("rig"):
        rig = _stage("calibrate", timing, io.load_rig, _need(cfg["inputs"]["rig"], "rig"))
        report["rig_source"] = "given"
    else:
        res = _stage("calibrate", timing, run_calibration, image, pn, pp, cfg, out, data["sample_mask"])
        rig = res.rig
        artifacts.update(rig="rig.json", hypotheses="hypotheses.json")
        report["rig_source"] = "calibrated"
        if gt:
            report["calibration"] = evaluate(gt, rig=rig).get("lights")
            vanilla = evaluate(gt, rig=res.vanilla_rig).get("lights")
            report["calibration_vanilla"] = vanilla

    pitch = cfg["inputs"].get("pixel_pitch") or estimate_pixel_pitch(pp)
    grid = solver.ChromaticityGrid(cfg.get("grid_step_deg", 1.0))
    ic = cfg["integrate"]
    for mode in modes:
        sub = out / mode
        rec = _stage(f"reconstruct[{mode}]", timing, solver.solve, image, (rig, pp), pn, solver_config(cfg, mode), grid)
        save_reconstruction(sub, rec)
        depth = _stage(f"integrate[{mode}]", timing, integrate.integrate, rec.normals, pitch,
                       ic.get("rtol", 1e-8), ic.get("max_iter", 10000))
        io.save_scalar_map(sub / "depth.pfm", depth)
        mesh_name = "mesh.ply" if ic.get("mesh") == "ply" else "mesh.obj"
        integrate.export_mesh(depth, sub / mesh_name, pitch, rec.normals)
        entry = {"dir": mode, "files": ["normals.pfm", "albedo.pfm", "chromaticity.pfm", "diagnostics.json",
                                        "depth.pfm", mesh_name]}
        if gt:
            entry["metrics"] = _stage("evaluate", timing, evaluate, gt, rec.normals, None, depth)
        report["modes"][mode] = entry
    report["table"] = report_table(report)
    io.write_json(out / "report.json", report)
    artifacts["report"] = "report.json"
    io.write_json(out / "manifest.json", {"artifacts": artifacts, "modes": modes})
    return report


def report_table(report: dict) -> list[dict]:
    """One flat row per mode, the format used by sweeps."""
    rows = []
    cal = report.get("calibration") or {}
    for mode, entry in report.get("modes", {}).items():
        m = entry.get("metrics", {})
        rows.append({
            "mode": mode,
            "normal_mean_deg": m.get("normals", {}).get("mean_deg"),
            "normal_lit_mean_deg": m.get("normals", {}).get("lit_mean_deg"),
            "geometry_relative": m.get("geometry", {}).get("relative"),
            "light_relative": cal.get("relative_mean"),
            "light_angular_deg": cal.get("angular_mean_deg"),
        })
    return rows


# ---------------------------------------------------------------------------
# sweeps

CSV_FIELDS = ["sweep", "value", "mode", "status", "normal_mean_deg", "normal_lit_mean_deg", "geometry_relative",
              "light_relative", "light_angular_deg", "error"]


def _bench_point(args):
    k, kind, spec, cfg, out = args
    name = f"{kind}_{k:02d}"
    case_dir = Path(out) / "cases" / name
    run_dir = Path(out) / "runs" / name
    try:
        synth.write_scene(case_dir, synth.build_scene(spec))
        rep = run_pipeline(config_from_case(case_dir, cfg), run_dir)
        return [dict(row, status="ok", error="") for row in rep["table"]]
    except Exception as e:  # a failed point must not end the sweep
        log.warning("sweep point %d failed: %s", k, e)
        return [{"mode": m, "status": "failed", "error": str(e)} for m in cfg["modes"]]


def run_bench(kind: str, values, base: synth.SceneSpec, cfg: dict, out_dir, jobs: int = 1) -> dict:
    """Synthesize and reconstruct every sweep point; write sweep.csv and summary.json."""
    specs = synth.sweep_specs(base, kind, values)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tasks = [(k, kind, s, cfg, str(out)) for k, s in enumerate(specs)]
    if jobs > 1:
        from multiprocessing import get_context
        with get_context("spawn").Pool(jobs) as pool:
            results = pool.map(_bench_point, tasks)
    else:
        results = [_bench_point(t) for t in tasks]
    rows = []
    for spec, point_rows in zip(specs, results):
        v = getattr(spec, synth.SWEEP_FIELDS[kind])
        for r in point_rows:
            row = {f: r.get(f) for f in CSV_FIELDS}
            row.update(sweep=kind, value=v)
            rows.append(row)
    with open(out / "sweep.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r[k] is None else r[k]) for k in CSV_FIELDS})
    summary = {"sweep": kind, "values": [float(v) for v in values], "base_spec": dataclasses.asdict(base),
               "modes": cfg["modes"], "num_failed": sum(r["status"] != "ok" for r in rows), "rows": rows}
    io.write_json(out / "summary.json", summary)
    return summary
