"""Map containers, light rig types and the near point light shading model.

Conventions used throughout the package: right-handed camera frame with +z
toward the camera, x to the right and y up.  Maps are row-major with the
origin at the top-left pixel, so image rows grow toward -y.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

CHANNELS = ("red", "green", "blue")


class DegenerateGeometryError(ValueError):
    """A light coincides with a surface point, or a system is rank deficient."""


def _frozen(a, dtype=None):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ScalarMap:
    data: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        data = _frozen(self.data, np.float64)
        if data.ndim != 2:
            raise ValueError(f"scalar map must be 2-D, got shape {data.shape}")
        mask = _frozen(self.mask, bool)
        if mask.shape != data.shape:
            raise ValueError(f"mask shape {mask.shape} != data shape {data.shape}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "mask", mask)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def values(self) -> np.ndarray:
        """Valid entries in row-major order."""
        return self.data[self.mask]

    def with_mask(self, mask) -> "ScalarMap":
        return ScalarMap(self.data, mask)


@dataclass(frozen=True)
class VectorMap:
    data: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        data = _frozen(self.data, np.float64)
        if data.ndim != 3 or data.shape[2] != 3:
            raise ValueError(f"vector map must be HxWx3, got shape {data.shape}")
        mask = _frozen(self.mask, bool)
        if mask.shape != data.shape[:2]:
            raise ValueError(f"mask shape {mask.shape} != map shape {data.shape[:2]}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "mask", mask)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]

    def values(self) -> np.ndarray:
        """Valid vectors as an (N, 3) array in row-major order."""
        return self.data[self.mask]

    def with_mask(self, mask) -> "VectorMap":
        return VectorMap(self.data, mask)

    @classmethod
    def from_values(cls, values, mask, fill=0.0) -> "VectorMap":
        """Scatter (N, 3) values back onto the pixels where ``mask`` is set."""
        mask = np.asarray(mask, bool)
        data = np.full(mask.shape + (3,), fill, dtype=np.float64)
        data[mask] = values
        return cls(data, mask)

    def check_unit(self, tol: float = 1e-6) -> None:
        """Raise if any valid vector is not unit length."""
        v = self.values()
        if v.size == 0:
            return
        err = np.abs(np.linalg.norm(v, axis=1) - 1.0)
        k = int(np.argmax(err))
        if err[k] > tol:
            rows, cols = np.nonzero(self.mask)
            raise ValueError(
                f"non-unit normal at pixel (row={rows[k]}, col={cols[k]}): "
                f"|n| - 1 = {err[k]:.3e}"
            )


def normalize_map(m: VectorMap) -> tuple[VectorMap, int]:
    """Normalize every valid vector; zero vectors are dropped from the mask.

    Returns the normalized map and the number of pixels that were invalidated.
    """
    data = np.array(m.data)
    norms = np.linalg.norm(data, axis=2)
    bad = m.mask & ~(norms > 0) | m.mask & ~np.isfinite(norms)
    mask = m.mask & ~bad
    data[mask] /= norms[mask][:, None]
    data[~mask] = 0.0
    n_bad = int(bad.sum())
    if n_bad:
        log.warning("normalize_map: %d zero or non-finite vectors invalidated", n_bad)
    return VectorMap(data, mask), n_bad


@dataclass(frozen=True)
class LightSource:
    """One near point light.

    ``principal_direction`` is compared against the surface-to-light
    direction, so a light whose axis points at the scene has
    ``principal_direction`` pointing from the scene toward the light.
    ``anisotropy`` of 0 is an ideal isotropic point light.
    """

    position: np.ndarray
    principal_direction: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    anisotropy: float = 0.0

    def __post_init__(self):
        p = _frozen(self.position, np.float64).reshape(3)
        d = _frozen(self.principal_direction, np.float64).reshape(3)
        if not np.all(np.isfinite(p)):
            raise ValueError("light position must be finite")
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise ValueError(f"principal direction must be unit length, got |d|={np.linalg.norm(d)}")
        if not self.anisotropy >= 0:
            raise ValueError(f"anisotropy must be >= 0, got {self.anisotropy}")
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "principal_direction", d)
        object.__setattr__(self, "anisotropy", float(self.anisotropy))


@dataclass(frozen=True)
class LightRig:
    """Three lights; light i is observed only in camera channel i (R, G, B)."""

    lights: tuple[LightSource, LightSource, LightSource]

    def __post_init__(self):
        lights = tuple(self.lights)
        if len(lights) != 3:
            raise ValueError(f"a light rig has exactly 3 lights, got {len(lights)}")
        object.__setattr__(self, "lights", lights)

    @classmethod
    def from_positions(cls, positions: Iterable[Sequence[float]]) -> "LightRig":
        return cls(tuple(LightSource(np.asarray(p, float)) for p in positions))

    @property
    def positions(self) -> np.ndarray:
        return np.stack([light.position for light in self.lights])

    def permuted(self, order: Sequence[int]) -> "LightRig":
        return LightRig(tuple(self.lights[i] for i in order))

    def to_dict(self) -> dict:
        return {
            "units": "scene",
            "lights": [
                {
                    "channel": CHANNELS[i],
                    "position": light.position.tolist(),
                    "principal_direction": light.principal_direction.tolist(),
                    "anisotropy": light.anisotropy,
                }
                for i, light in enumerate(self.lights)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LightRig":
        lights = []
        for entry in d["lights"]:
            lights.append(
                LightSource(
                    np.asarray(entry["position"], float),
                    np.asarray(entry.get("principal_direction", [0.0, 0.0, 1.0]), float),
                    float(entry.get("anisotropy", 0.0)),
                )
            )
        return cls(tuple(lights))


def shading_matrices(light_positions, points) -> np.ndarray:
    """Per-point 3x3 shading matrices for near point lights.

    Row j of each matrix is ``(p_j - v) / |p_j - v|^3``.

    light_positions : (3, 3) array, one light per row.
    points : (..., 3) surface positions.
    Returns an array of shape (..., 3, 3).
    """
    lp = np.asarray(light_positions, float).reshape(3, 3)
    v = np.asarray(points, float)
    diff = lp - v[..., None, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    if np.any(dist <= 0) or not np.all(np.isfinite(dist)):
        raise DegenerateGeometryError("a light position coincides with a surface point")
    return diff / dist[..., None] ** 3


def shading_matrix(rig: LightRig, v) -> np.ndarray:
    """Shading matrix L for a single surface point ``v``."""
    return shading_matrices(rig.positions, np.asarray(v, float).reshape(3))


def unit(v, axis=-1) -> np.ndarray:
    v = np.asarray(v, float)
    return v / np.linalg.norm(v, axis=axis, keepdims=True)


def angle_between(a, b, axis=-1) -> np.ndarray:
    """Angle in degrees between vectors along ``axis``."""
    a = unit(a, axis)
    b = unit(b, axis)
    cos = np.clip(np.sum(a * b, axis=axis), -1.0, 1.0)
    return np.degrees(np.arccos(cos))
