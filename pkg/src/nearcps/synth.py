"""Synthetic Lambertian benchmark: analytic geometry, light rigs and renders.

Geometry is generated analytically (sphere cap, bumpy hemisphere) under
orthographic projection.  Only attached shadows are modelled.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import io
from .core import LightRig, LightSource, ScalarMap, VectorMap, shading_matrices, unit

log = logging.getLogger(__name__)

# chromaticities loosely modelled on skin and lips (linear RGB)
SKIN_ALBEDO = (0.80, 0.55, 0.42)
LIP_ALBEDO = (0.70, 0.28, 0.30)


@dataclass(frozen=True)
class Geometry:
    normals: VectorMap
    positions: VectorMap
    depth: ScalarMap
    pixel_pitch: float

    @property
    def mask(self) -> np.ndarray:
        return self.normals.mask

    @property
    def center(self) -> np.ndarray:
        return self.positions.values().mean(axis=0)

    @property
    def vertical_span(self) -> float:
        y = self.positions.values()[:, 1]
        return float(y.max() - y.min())


@dataclass(frozen=True)
class RenderConfig:
    noise_sigma: float = 0.0
    scale_to_max: bool = True
    shadow_mode: str = "attached"
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.shadow_mode != "attached":
            raise ValueError("only attached shadows are supported")


@dataclass(frozen=True)
class CrosstalkModel:
    """Three-wavelength crosstalk: A(x) = S diag(r(x)) E."""

    S: np.ndarray
    E: np.ndarray
    reflectance: VectorMap

    def __post_init__(self):
        for name in ("S", "E"):
            m = np.asarray(getattr(self, name), float)
            if m.shape != (3, 3):
                raise ValueError(f"{name} must be 3x3")
            if not np.allclose(np.diag(m), 1.0):
                raise ValueError(f"{name} must have unit diagonal")
            if np.any(m < 0):
                raise ValueError(f"{name} must be nonnegative")
            object.__setattr__(self, name, m)

    @classmethod
    def uniform(cls, s_nondiag: float, e_nondiag: float, reflectance: VectorMap) -> "CrosstalkModel":
        def mat(x):
            return np.full((3, 3), float(x)) + (1.0 - float(x)) * np.eye(3)

        return cls(mat(s_nondiag), mat(e_nondiag), reflectance)

    def albedo_matrices(self) -> np.ndarray:
        """Per-pixel A for valid pixels, shape (N, 3, 3)."""
        r = self.reflectance.values()
        return np.einsum("ik,nk,kj->nij", self.S, r, self.E)


def _grid(size: int, half_extent: float):
    pitch = 2.0 * half_extent / size
    coords = (np.arange(size) - (size - 1) / 2.0) * pitch
    x = np.broadcast_to(coords[None, :], (size, size))
    y = np.broadcast_to(-coords[:, None], (size, size))
    return x, y, pitch


def _geometry_from_height(x, y, z, zx, zy, mask, pitch) -> Geometry:
    n = np.stack([-zx, -zy, np.ones_like(z)], axis=-1)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    n[~mask] = 0.0
    pos = np.stack([x, y, z], axis=-1)
    pos[~mask] = 0.0
    return Geometry(VectorMap(n, mask), VectorMap(pos, mask), ScalarMap(np.where(mask, z, 0.0), mask), pitch)


def sphere_cap(size: int, radius: float = 1.0, cap: float = 0.8) -> Geometry:
    """Sphere of ``radius`` seen from +z, restricted to a disc of ``cap*radius``."""
    x, y, pitch = _grid(size, radius)
    r2 = x * x + y * y
    mask = r2 < (cap * radius) ** 2
    z = np.sqrt(np.clip(radius**2 - r2, 1e-12, None))
    return _geometry_from_height(x, y, z, -x / z, -y / z, mask, pitch)


def _bumps(seed: int, radius: float, count: int):
    rng = np.random.default_rng(seed)
    ang = rng.uniform(0, 2 * np.pi, count)
    rad = radius * 0.75 * np.sqrt(rng.uniform(0, 1, count))
    centers = np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)
    amps = radius * rng.uniform(0.04, 0.10, count) * rng.choice([-1.0, 1.0], count)
    widths = radius * rng.uniform(0.10, 0.22, count)
    return centers, amps, widths


def bumpy_hemisphere(size: int, radius: float = 1.0, disc: float = 0.9, bumps: int = 14, seed: int = 7) -> Geometry:
    """Hemisphere with Gaussian bumps and dents, a smooth face-sized stand-in."""
    x, y, pitch = _grid(size, radius)
    r2 = x * x + y * y
    mask = r2 < (disc * radius) ** 2
    z = np.sqrt(np.clip(radius**2 - r2, 1e-12, None))
    zx = -x / z
    zy = -y / z
    for (cx, cy), a, s in zip(*_bumps(seed, radius, bumps)):
        g = a * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * s * s))
        z = z + g
        zx = zx - g * (x - cx) / (s * s)
        zy = zy - g * (y - cy) / (s * s)
    return _geometry_from_height(x, y, z, zx, zy, mask, pitch)


def ring_rig(
    center,
    span: float,
    distance: float,
    elevation_deg: float,
    azimuths_deg: Sequence[float] = (90.0, 210.0, 330.0),
    anisotropy: float = 0.0,
) -> LightRig:
    """Three lights at equal distance and elevation, evenly spaced in azimuth.

    ``distance`` is in units of ``span`` (the vertical extent of the object).
    Each light's principal axis points at ``center``.
    """
    center = np.asarray(center, float)
    el = np.radians(elevation_deg)
    lights = []
    for az in np.radians(np.asarray(azimuths_deg, float)):
        d = np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        lights.append(LightSource(center + distance * span * d, d, anisotropy))
    return LightRig(tuple(lights))


def light_shading(normals: VectorMap, positions: VectorMap, rig: LightRig) -> np.ndarray:
    """Clamped per-light shading max(0, a_i L_i n) for valid pixels, shape (N, 3)."""
    p = positions.values()
    n = normals.values()
    L = shading_matrices(rig.positions, p)
    s = np.einsum("nij,nj->ni", L, n)
    for i, light in enumerate(rig.lights):
        if light.anisotropy > 0:
            d = L[:, i, :] / np.linalg.norm(L[:, i, :], axis=1, keepdims=True)
            cos = np.clip(d @ light.principal_direction, 0.0, None)
            s[:, i] *= cos**light.anisotropy
    return np.maximum(s, 0.0)


def _finish(values, mask, cfg: RenderConfig) -> VectorMap:
    if cfg.scale_to_max:
        peak = values.max() if values.size else 0.0
        if peak > 0:
            values = values / peak
    if cfg.noise_sigma > 0:
        rng = np.random.default_rng(cfg.seed)
        values = np.clip(values + rng.normal(0.0, cfg.noise_sigma, values.shape), 0.0, 1.0)
    return VectorMap.from_values(values, mask)


def render(normals: VectorMap, positions: VectorMap, albedo: VectorMap, rig: LightRig, cfg: RenderConfig = RenderConfig()) -> VectorMap:
    """Render c_i = rho_i * max(0, a_i L_i n) with optional scaling and noise."""
    normals.check_unit()
    mask = normals.mask & positions.mask & albedo.mask
    rho = albedo.data[mask]
    if np.any(rho < 0):
        raise ValueError("albedo must be nonnegative")
    s = light_shading(normals.with_mask(mask), positions.with_mask(mask), rig)
    return _finish(rho * s, mask, cfg)


def apply_crosstalk(normals: VectorMap, positions: VectorMap, rig: LightRig, model: CrosstalkModel, cfg: RenderConfig = RenderConfig()) -> VectorMap:
    """Render with the full albedo matrix: c = S diag(r) E max(0, L n)."""
    normals.check_unit()
    mask = normals.mask & positions.mask & model.reflectance.mask
    if not np.array_equal(mask, model.reflectance.mask):
        model = CrosstalkModel(model.S, model.E, model.reflectance.with_mask(mask))
    s = light_shading(normals.with_mask(mask), positions.with_mask(mask), rig)
    c = np.einsum("nij,nj->ni", model.albedo_matrices(), s)
    return _finish(c, mask, cfg)


def uniform_albedo(mask, rho=SKIN_ALBEDO) -> VectorMap:
    mask = np.asarray(mask, bool)
    return VectorMap.from_values(np.broadcast_to(np.asarray(rho, float), (int(mask.sum()), 3)), mask)


def two_albedo(mask, dominant=SKIN_ALBEDO, minority=LIP_ALBEDO, fraction: float = 0.2, blob_sigma: float = 6.0, seed: int = 3) -> VectorMap:
    """Piecewise-constant albedo: smooth random blobs cover ``fraction`` of the mask."""
    mask = np.asarray(mask, bool)
    rng = np.random.default_rng(seed)
    field_ = ndimage.gaussian_filter(rng.normal(size=mask.shape), blob_sigma)
    vals = field_[mask]
    minority_px = field_ >= np.quantile(vals, 1.0 - fraction)
    data = np.zeros(mask.shape + (3,))
    data[mask] = dominant
    data[mask & minority_px] = minority
    return VectorMap(data, mask)


def texture_albedo(albedo: VectorMap, rel_rms: float, sigma: float = 1.5, seed: int = 5) -> VectorMap:
    """Multiply each channel by its own smooth field 1 + g, with g of RMS ``rel_rms``.

    Mimics the fine pigment variation of skin so the albedo distribution
    spreads out instead of collapsing to a few exact values.
    """
    if rel_rms == 0:
        return albedo
    mask = albedo.mask
    rng = np.random.default_rng(seed)
    data = np.array(albedo.data)
    for ch in range(3):
        g = ndimage.gaussian_filter(rng.normal(size=mask.shape), sigma)
        g *= rel_rms / np.sqrt(np.mean(g[mask] ** 2))
        data[..., ch] *= np.clip(1.0 + g, 0.0, None)
    data[~mask] = 0.0
    return VectorMap(data, mask)


def perturb_normals(normals: VectorMap, rms_deg: float, smoothness: float = 8.0, seed: int = 11) -> VectorMap:
    """Rotate normals by a smooth random field with the given RMS angle."""
    n = normals.data
    mask = normals.mask
    if rms_deg == 0:
        return normals
    rng = np.random.default_rng(seed)
    u = ndimage.gaussian_filter(rng.normal(size=mask.shape), smoothness)
    v = ndimage.gaussian_filter(rng.normal(size=mask.shape), smoothness)
    rms = np.sqrt(np.mean(u[mask] ** 2 + v[mask] ** 2))
    scale = np.radians(rms_deg) / rms
    u *= scale
    v *= scale
    # tangent frame orthogonal to each normal
    ref = np.where(np.abs(n[..., 0:1]) < 0.9, np.array([1.0, 0, 0]), np.array([0, 1.0, 0]))
    t1 = np.cross(n, ref)
    t1 /= np.maximum(np.linalg.norm(t1, axis=-1, keepdims=True), 1e-12)
    t2 = np.cross(n, t1)
    theta = np.sqrt(u * u + v * v)
    axis = u[..., None] * t1 + v[..., None] * t2
    axis /= np.maximum(theta, 1e-300)[..., None]
    out = np.cos(theta)[..., None] * n + np.sin(theta)[..., None] * axis
    out[~mask] = 0.0
    out[mask] = unit(out[mask])
    return VectorMap(out, mask)


def central_mask(positions: VectorMap, fraction: float = 0.7) -> np.ndarray:
    """Pixels within ``fraction`` of the maximum xy radius from the centroid."""
    p = positions.data
    c = positions.values().mean(axis=0)
    r = np.hypot(p[..., 0] - c[0], p[..., 1] - c[1])
    rmax = r[positions.mask].max()
    return positions.mask & (r <= fraction * rmax)


@dataclass(frozen=True)
class SceneSpec:
    """Knobs for one synthetic benchmark case."""

    size: int = 128
    geometry: str = "bumpy"
    albedo: str = "two"
    minority_fraction: float = 0.2
    distance: float = 2.0
    elevation: float = 65.0
    anisotropy: float = 0.0
    crosstalk: float = 0.0
    noise_sigma: float = 0.0
    albedo_texture: float = 0.0
    proxy_noise_deg: float = 5.0
    proxy_noise_scale: float = 0.15
    sample_fraction: float = 0.9
    seed: int = 0

    def replace(self, **kw) -> "SceneSpec":
        return dataclasses.replace(self, **kw)


@dataclass(frozen=True)
class Scene:
    spec: SceneSpec
    geometry: Geometry
    albedo: VectorMap
    rig: LightRig
    image: VectorMap
    proxy_normals: VectorMap
    proxy_positions: VectorMap
    sample_mask: np.ndarray


def build_geometry(spec: SceneSpec) -> Geometry:
    if spec.geometry == "bumpy":
        return bumpy_hemisphere(spec.size)
    if spec.geometry == "sphere":
        return sphere_cap(spec.size)
    raise ValueError(f"unknown geometry {spec.geometry!r}")


def build_scene(spec: SceneSpec) -> Scene:
    geo = build_geometry(spec)
    mask = geo.mask
    if spec.albedo == "two":
        albedo = two_albedo(mask, fraction=spec.minority_fraction, blob_sigma=spec.size / 20.0)
    elif spec.albedo == "uniform":
        albedo = uniform_albedo(mask)
    else:
        raise ValueError(f"unknown albedo {spec.albedo!r}")
    albedo = texture_albedo(albedo, spec.albedo_texture, seed=spec.seed + 5)
    rig = ring_rig(geo.center, geo.vertical_span, spec.distance, spec.elevation, anisotropy=spec.anisotropy)
    cfg = RenderConfig(noise_sigma=spec.noise_sigma, seed=spec.seed)
    if spec.crosstalk > 0:
        model = CrosstalkModel.uniform(spec.crosstalk, spec.crosstalk, albedo)
        image = apply_crosstalk(geo.normals, geo.positions, rig, model, cfg)
    else:
        image = render(geo.normals, geo.positions, albedo, rig, cfg)
    proxy_n = perturb_normals(geo.normals, spec.proxy_noise_deg, smoothness=spec.size * spec.proxy_noise_scale, seed=spec.seed + 11)
    return Scene(
        spec=spec,
        geometry=geo,
        albedo=albedo,
        rig=rig,
        image=image,
        proxy_normals=proxy_n,
        proxy_positions=geo.positions,
        sample_mask=central_mask(geo.positions, spec.sample_fraction),
    )


SWEEP_FIELDS = {"distance": "distance", "elevation": "elevation", "anisotropy": "anisotropy", "crosstalk": "crosstalk"}

STANDARD_SWEEPS = {
    "distance": [round(0.5 * k, 1) for k in range(1, 21)],
    "elevation": [float(e) for e in range(85, 29, -5)],
    "anisotropy": [0.0, 10.0, 20.0],
    "crosstalk": [0.0, 0.1, 0.2],
}


def sweep_specs(base: SceneSpec, kind: str, values: Sequence[float]) -> list[SceneSpec]:
    if kind not in SWEEP_FIELDS:
        raise ValueError(f"unknown sweep {kind!r}; expected one of {sorted(SWEEP_FIELDS)}")
    values = list(values)
    if not values:
        raise ValueError("empty sweep")
    return [base.replace(**{SWEEP_FIELDS[kind]: float(v)}) for v in values]


def write_scene(case_dir, scene: Scene) -> dict:
    """Write one case to ``case_dir`` and return its manifest entry."""
    d = Path(case_dir)
    d.mkdir(parents=True, exist_ok=True)
    geo = scene.geometry
    files = {
        "image": "image.pfm",
        "gt_normals": "gt_normals.pfm",
        "gt_positions": "gt_positions.pfm",
        "gt_depth": "gt_depth.pfm",
        "gt_albedo": "gt_albedo.pfm",
        "gt_rig": "gt_rig.json",
        "proxy_normals": "proxy_normals.pfm",
        "proxy_positions": "proxy_positions.pfm",
        "mask": "mask.png",
        "sample_mask": "sample_mask.png",
    }
    io.write_pfm(d / files["image"], scene.image.data)
    io.save_vector_map(d / files["gt_normals"], geo.normals)
    io.save_vector_map(d / files["gt_positions"], geo.positions)
    io.save_scalar_map(d / files["gt_depth"], geo.depth)
    io.save_vector_map(d / files["gt_albedo"], scene.albedo)
    io.save_rig(d / files["gt_rig"], scene.rig)
    io.save_vector_map(d / files["proxy_normals"], scene.proxy_normals)
    io.save_vector_map(d / files["proxy_positions"], scene.proxy_positions)
    io.write_mask_png(d / files["mask"], geo.mask)
    io.write_mask_png(d / files["sample_mask"], scene.sample_mask)
    entry = {
        "files": files,
        "spec": dataclasses.asdict(scene.spec),
        "pixel_pitch": geo.pixel_pitch,
        "vertical_span": geo.vertical_span,
        "face_center": geo.center.tolist(),
        "rig": scene.rig.to_dict(),
    }
    io.write_json(d / "case.json", entry)
    return entry


def synth_sweep(out_dir, base: SceneSpec, kind: str, values: Sequence[float]) -> dict:
    """Render one case per sweep value under ``out_dir`` and write manifest.json."""
    specs = sweep_specs(base, kind, values)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cases = []
    for k, spec in enumerate(specs):
        name = f"{kind}_{k:02d}"
        entry = write_scene(out / name, build_scene(spec))
        entry["dir"] = name
        entry["sweep_value"] = getattr(spec, SWEEP_FIELDS[kind])
        cases.append(entry)
    manifest = {"sweep": kind, "values": [float(v) for v in values], "cases": cases}
    io.write_json(out / "manifest.json", manifest)
    return manifest
