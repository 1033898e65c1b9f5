"""Software crosstalk removal from three single-light images of a white target.

Under light y the camera sees the target in every channel x with a fixed
ratio K[x, y] to channel y.  The de-crosstalk matrix is inv(K); applied to a
pixel it moves each light's contribution back into its own channel.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import io
from .core import CHANNELS, VectorMap

log = logging.getLogger(__name__)

COND_MAX = 1e6


class DecrosstalkError(ValueError):
    pass


@dataclass(frozen=True)
class Decrosstalk:
    matrix: np.ndarray        # inv(ratios)
    ratios: np.ndarray        # K, unit diagonal
    num_pixels: tuple = (0, 0, 0)

    def to_dict(self) -> dict:
        return {"matrix": self.matrix.tolist(), "ratios": self.ratios.tolist(),
                "num_pixels": list(self.num_pixels), "condition": float(np.linalg.cond(self.ratios))}

    @classmethod
    def from_dict(cls, d) -> "Decrosstalk":
        m = np.asarray(d["matrix"], float)
        if m.shape != (3, 3):
            raise DecrosstalkError("matrix must be 3x3")
        k = np.asarray(d.get("ratios", np.linalg.inv(m)), float)
        return cls(m, k, tuple(d.get("num_pixels", (0, 0, 0))))

    def save(self, path) -> None:
        io.write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "Decrosstalk":
        return cls.from_dict(io.read_json(path))


def estimate(images: Sequence[VectorMap], cond_max: float = COND_MAX) -> Decrosstalk:
    """Estimate the matrix from images taken under the red, green and blue light."""
    if len(images) != 3:
        raise DecrosstalkError(f"need one image per light, got {len(images)}")
    K = np.eye(3)
    counts = []
    for y, im in enumerate(images):
        den = im.data[..., y]
        valid = im.mask & np.isfinite(den) & (den > 0)
        counts.append(int(valid.sum()))
        if not valid.any():
            raise DecrosstalkError(f"image under the {CHANNELS[y]} light has no pixel with signal in its own channel")
        for x in range(3):
            if x != y:
                K[x, y] = float(np.median(im.data[..., x][valid] / den[valid]))
    cond = np.linalg.cond(K)
    if not cond < cond_max:
        raise DecrosstalkError(f"ratio matrix is near singular (condition {cond:.3g})")
    return Decrosstalk(np.linalg.inv(K), K, tuple(counts))


def apply(matrix, image: VectorMap) -> tuple[VectorMap, int]:
    """Left-multiply every pixel by ``matrix``; negatives are clamped to 0.

    Returns the corrected image and the number of clamped channel values.
    """
    M = np.asarray(matrix.matrix if isinstance(matrix, Decrosstalk) else matrix, float)
    out = np.einsum("ij,...j->...i", M, image.data)
    out[~image.mask] = 0.0
    neg = out < 0
    n_clamped = int(neg[image.mask].sum())
    out[neg] = 0.0
    if n_clamped:
        log.info("decrosstalk: clamped %d negative channel values", n_clamped)
    return VectorMap(out, image.mask), n_clamped


def simulate_white_target(mixing, shape=(64, 64), noise_sigma: float = 0.0, seed: int = 0) -> list[VectorMap]:
    """Three images of a white sheet, one per light, mixed by ``mixing``.

    The pure image under light y has signal only in channel y, with a smooth
    vignetting-like falloff; ``mixing`` then maps pure to observed channels.
    """
    K = np.asarray(mixing, float)
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    r2 = ((xx - (w - 1) / 2) / w) ** 2 + ((yy - (h - 1) / 2) / h) ** 2
    falloff = 0.8 * (1.0 - 0.8 * r2)
    rng = np.random.default_rng(seed)
    mask = np.ones(shape, bool)
    out = []
    for y in range(3):
        pure = np.zeros(shape + (3,))
        pure[..., y] = falloff
        obs = np.einsum("ij,...j->...i", K, pure)
        if noise_sigma > 0:
            obs = obs + rng.normal(0.0, noise_sigma, obs.shape)
        out.append(VectorMap(np.clip(obs, 0.0, 1.0), mask))
    return out
