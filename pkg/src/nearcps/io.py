"""File formats: PFM float maps, PNG images and masks, JSON documents.

PFM files are written little-endian.  Invalid pixels of a map are stored as
NaN so that a map and its mask round-trip through a single file.
"""
from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np
from PIL import Image

from .core import LightRig, ScalarMap, VectorMap


def write_pfm(path, array) -> None:
    a = np.asarray(array, dtype=np.float32)
    if a.ndim == 2:
        tag = b"Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError(f"PFM holds HxW or HxWx3 arrays, got {a.shape}")
    h, w = a.shape[:2]
    # PFM stores rows bottom to top
    body = np.ascontiguousarray(np.flipud(a)).astype("<f4")
    with open(path, "wb") as f:
        f.write(tag + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(body.tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        tag = f.readline().strip()
        if tag not in (b"PF", b"Pf"):
            raise ValueError(f"{path}: not a PFM file")
        dims = f.readline()
        while dims.startswith(b"#"):
            dims = f.readline()
        m = re.match(rb"^\s*(\d+)\s+(\d+)\s*$", dims)
        if not m:
            raise ValueError(f"{path}: malformed PFM header")
        w, h = int(m.group(1)), int(m.group(2))
        scale = float(f.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        nch = 3 if tag == b"PF" else 1
        data = np.frombuffer(f.read(), dtype=dtype)
    if data.size != w * h * nch:
        raise ValueError(f"{path}: expected {w * h * nch} floats, found {data.size}")
    data = data.reshape((h, w, nch) if nch == 3 else (h, w))
    return np.flipud(data).astype(np.float64)


def save_vector_map(path, m: VectorMap) -> None:
    data = np.array(m.data)
    data[~m.mask] = np.nan
    write_pfm(path, data)


def load_vector_map(path, mask=None) -> VectorMap:
    data = read_pfm(path)
    if data.ndim != 3:
        raise ValueError(f"{path}: expected a 3-channel PFM")
    valid = np.all(np.isfinite(data), axis=2)
    if mask is not None:
        valid &= np.asarray(mask, bool)
    data = np.where(valid[..., None], data, 0.0)
    return VectorMap(data, valid)


def save_scalar_map(path, m: ScalarMap) -> None:
    data = np.array(m.data)
    data[~m.mask] = np.nan
    write_pfm(path, data)


def load_scalar_map(path, mask=None) -> ScalarMap:
    data = read_pfm(path)
    if data.ndim != 2:
        raise ValueError(f"{path}: expected a 1-channel PFM")
    valid = np.isfinite(data)
    if mask is not None:
        valid &= np.asarray(mask, bool)
    return ScalarMap(np.where(valid, data, 0.0), valid)


def read_png(path, gamma: float = 1.0) -> np.ndarray:
    """Load an 8- or 16-bit PNG as float in [0, 1], undoing ``gamma``."""
    with Image.open(path) as im:
        a = np.array(im)
    if a.dtype == np.uint8:
        x = a.astype(np.float64) / 255.0
    elif a.dtype in (np.uint16, np.int32, np.int16):
        x = a.astype(np.float64) / 65535.0
    elif a.dtype == bool:
        x = a.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported PNG sample type {a.dtype}")
    if x.ndim == 3:
        x = x[..., :3]
    if gamma != 1.0:
        x = x ** gamma
    return x


def load_image(path, gamma: float = 1.0, mask=None) -> VectorMap:
    """Load an RGB input image from PFM or PNG."""
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        data = read_pfm(path)
    else:
        data = read_png(path, gamma)
    if data.ndim != 3:
        raise ValueError(f"{path}: expected an RGB image")
    valid = np.all(np.isfinite(data), axis=2)
    if mask is not None:
        valid &= np.asarray(mask, bool)
    return VectorMap(np.where(valid[..., None], data, 0.0), valid)


def write_mask_png(path, mask) -> None:
    Image.fromarray(np.asarray(mask, bool).astype(np.uint8) * 255).save(path)


def read_mask_png(path) -> np.ndarray:
    with Image.open(path) as im:
        a = np.array(im.convert("L"))
    return a > 127


def write_json(path, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, default=_json_default)
        f.write("\n")


def read_json(path):
    with open(path) as f:
        return json.load(f)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


def save_rig(path, rig: LightRig, **extra) -> None:
    d = rig.to_dict()
    d.update(extra)
    write_json(path, d)


def load_rig(path) -> LightRig:
    return LightRig.from_dict(read_json(path))
