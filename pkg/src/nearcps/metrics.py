"""Error measures for calibration and reconstruction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import LightRig, ScalarMap, VectorMap, angle_between, shading_matrices


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class NormalError:
    mean: float
    median: float
    map: ScalarMap
    lit_mean: float | None = None
    num_pixels: int = 0
    num_lit: int = 0

    def to_dict(self) -> dict:
        return {"mean_deg": self.mean, "median_deg": self.median, "lit_mean_deg": self.lit_mean,
                "num_pixels": self.num_pixels, "num_lit": self.num_lit}


def lit_mask(normals: VectorMap, positions: VectorMap, rig: LightRig) -> np.ndarray:
    """Pixels that receive light from all three sources (no attached shadow)."""
    mask = normals.mask & positions.mask
    out = np.zeros(normals.shape, bool)
    L = shading_matrices(rig.positions, positions.data[mask])
    out[mask] = np.all(np.einsum("nij,nj->ni", L, normals.data[mask]) > 0, axis=1)
    return out


def normal_error(est: VectorMap, gt: VectorMap, lit=None) -> NormalError:
    """Per-pixel angle in degrees over the shared mask.

    ``lit`` optionally marks fully lit pixels for the second, lit-only mean.
    """
    if est.shape != gt.shape:
        raise MetricError(f"shape mismatch {est.shape} vs {gt.shape}")
    mask = est.mask & gt.mask
    if not mask.any():
        raise MetricError("estimate and ground truth share no valid pixel")
    err = np.zeros(est.shape)
    err[mask] = angle_between(est.data[mask], gt.data[mask])
    lit_mean, n_lit = None, 0
    if lit is not None:
        sel = mask & np.asarray(lit, bool)
        n_lit = int(sel.sum())
        lit_mean = float(err[sel].mean()) if n_lit else None
    vals = err[mask]
    return NormalError(float(vals.mean()), float(np.median(vals)), ScalarMap(err, mask), lit_mean,
                       int(mask.sum()), n_lit)


def light_position_errors(est: LightRig, gt: LightRig, face_center) -> list[dict]:
    """Relative position error and angle seen from ``face_center``, per light."""
    center = np.asarray(face_center, float)
    out = []
    for i, (pe, pg) in enumerate(zip(est.positions, gt.positions)):
        dist = float(np.linalg.norm(pg - center))
        if not dist > 0:
            raise MetricError(f"light {i}: ground truth coincides with the face center")
        out.append({
            "light": i,
            "relative": float(np.linalg.norm(pe - pg)) / dist,
            "angular_deg": float(angle_between(pe - center, pg - center)),
        })
    return out


def summarize_light_errors(errors: list[dict]) -> dict:
    return {
        "relative_mean": float(np.mean([e["relative"] for e in errors])),
        "angular_mean_deg": float(np.mean([e["angular_deg"] for e in errors])),
        "per_light": errors,
    }


def geometry_error(est: ScalarMap, gt: ScalarMap, per_component: bool = True) -> dict:
    """Mean absolute depth difference over the GT depth range.

    Each 4-connected component of the shared mask is first shifted by the
    median difference, the offset minimizing the mean absolute deviation.
    """
    mask = est.mask & gt.mask
    if not mask.any():
        raise MetricError("estimate and ground truth share no valid pixel")
    g = gt.data[mask]
    span = float(g.max() - g.min())
    if not span > 0:
        raise MetricError("ground truth depth is flat")
    diff = np.zeros(est.shape)
    diff[mask] = est.data[mask] - gt.data[mask]
    if per_component:
        labels, n = ndimage.label(mask)
    else:
        labels, n = mask.astype(int), 1
    dev = np.zeros(est.shape)
    for k in range(1, n + 1):
        sel = labels == k
        dev[sel] = diff[sel] - np.median(diff[sel])
    mean_abs = float(np.mean(np.abs(dev[mask])))
    return {"relative": mean_abs / span, "mean_abs": mean_abs, "gt_range": span, "map": ScalarMap(np.abs(dev), mask)}
