"""Per-pixel albedo chromaticity estimation and normal recovery.

Every pixel picks the grid chromaticity minimizing

    E_c + lambda_s * w_s * E_s + lambda_p * w_p * E_p

where E_c scores albedo-norm consensus (shared histogram bin), E_s is the
mean profile distance to the pixel's bin members and E_p penalizes departure
from the chromaticity implied by the proxy geometry.

The similarity term is the expensive one: a bin can hold hundreds of pixels
and there are thousands of candidates.  Instead of evaluating it for every
(pixel, candidate) pair, cheap lower and upper bounds built from per-bin
moment sums prune the candidates, and the exact value is computed only where
a candidate could still win.  The result equals brute-force evaluation.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .core import LightRig, VectorMap, shading_matrices

log = logging.getLogger(__name__)

MODES = ("consensus", "similarity", "full")

@dataclass(frozen=True)
class ChromaticityGrid:
    """Chromaticity candidates on the nonnegative octant of the unit sphere.

    Candidate (theta, phi) maps to (sin t cos p, sin t sin p, cos t).  The
    raw grid has ((90 / step) + 1)^2 entries; the repeated pole is dropped and,
    by default, so is every candidate with a zero component since its
    reciprocal is undefined.
    """

    step_deg: float = 1.0
    exclude_degenerate: bool = True
    candidates: np.ndarray = field(init=False, repr=False)
    angles: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        k = 90.0 / self.step_deg
        if self.step_deg <= 0 or abs(k - round(k)) > 1e-9:
            raise ValueError(f"step must divide 90 degrees, got {self.step_deg}")
        deg = np.arange(int(round(k)) + 1) * self.step_deg
        t, p = np.meshgrid(deg, deg, indexing="ij")
        t, p = t.ravel(), p.ravel()
        tr, pr = np.radians(t), np.radians(p)
        c = np.stack([np.sin(tr) * np.cos(pr), np.sin(tr) * np.sin(pr), np.cos(tr)], axis=1)
        c[np.abs(c) < 1e-15] = 0.0
        _, first = np.unique(np.round(c, 12), axis=0, return_index=True)
        keep = np.zeros(len(c), bool)
        keep[first] = True
        if self.exclude_degenerate:
            keep &= np.all(c > 0, axis=1)
        cand = c[keep]
        cand /= np.linalg.norm(cand, axis=1, keepdims=True)
        cand.setflags(write=False)
        ang = np.stack([t[keep], p[keep]], axis=1)
        ang.setflags(write=False)
        object.__setattr__(self, "candidates", cand)
        object.__setattr__(self, "angles", ang)

    @property
    def raw_count(self) -> int:
        return (int(round(90.0 / self.step_deg)) + 1) ** 2

    def __len__(self) -> int:
        return len(self.candidates)

    def sweep_order(self) -> np.ndarray:
        """Candidate indices coarse to fine: every 2^k-th grid line before 2^(k-1)."""
        idx = np.rint(self.angles / self.step_deg).astype(np.int64)

        def level(v):
            out = np.full(v.shape, 62, np.int64)
            nz = v > 0
            out[nz] = np.log2(v[nz] & -v[nz]).astype(np.int64)
            return out

        lv = np.minimum(level(idx[:, 0]), level(idx[:, 1]))
        return np.argsort(-lv, kind="stable")

    def nearest(self, rho) -> int:
        """Index of the candidate closest in angle to ``rho``."""
        r = np.asarray(rho, float)
        return int(np.argmax(self.candidates @ (r / np.linalg.norm(r))))


@dataclass(frozen=True)
class SolverConfig:
    delta_b: float = 0.025
    lambda_s: float = 1.5
    lambda_p: float = 0.5
    sigma_s: float = 0.003
    sigma_p: float = 0.01
    mode: str = "full"
    sample_size: int | None = 20000
    bin_cap: int | None = 256
    seed: int = 0
    cond_max: float = 1e8
    shadow_eps: float = 1e-4
    include_self: bool = True
    profile_scale: float | None = 0.16
    keep_maps: bool = True

    def __post_init__(self):
        for name in ("delta_b", "lambda_s", "lambda_p", "sigma_s", "sigma_p"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.sample_size is not None and self.sample_size < 1:
            raise ValueError("sample_size must be positive or None")
        if self.bin_cap is not None and self.bin_cap < 1:
            raise ValueError("bin_cap must be positive or None")

    @classmethod
    def exact(cls, **kw) -> "SolverConfig":
        """All pixels in the statistics and uncapped bins."""
        return cls(sample_size=None, bin_cap=None, **kw)


@dataclass
class ReconstructionResult:
    index: np.ndarray            # (H, W) candidate index, -1 where invalid
    chromaticity: VectorMap
    albedo: VectorMap
    normals: VectorMap
    diagnostics: dict
    maps: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# per-pixel building blocks


def pixel_profile(c, L, cond_max: float = 1e8) -> np.ndarray:
    """Profile matrix H with column i equal to ``c_i * inv(L)[:, i]``.

    ``H @ (1 / rho_hat)`` is the albedo-scaled normal for chromaticity rho_hat.
    """
    L = np.asarray(L, float)
    if not np.linalg.cond(L) < cond_max:
        raise np.linalg.LinAlgError("shading matrix is singular or ill-conditioned")
    return np.linalg.inv(L) * np.asarray(c, float)[None, :]


def pixel_profiles(c, L, cond_max: float = 1e8):
    """Vectorized :func:`pixel_profile`; returns (H (N,3,3), ok (N,))."""
    c = np.asarray(c, float)
    L = np.asarray(L, float)
    with np.errstate(all="ignore"):
        cond = np.linalg.cond(L)
    ok = np.isfinite(cond) & (cond < cond_max)
    Linv = np.zeros_like(L)
    if ok.any():
        Linv[ok] = np.linalg.inv(L[ok])
    return Linv * c[:, None, :], ok


def profile_norms(H, rho_hat) -> np.ndarray:
    """Implied albedo norms ||H @ (1/rho_hat)|| for each candidate row."""
    R = 1.0 / np.asarray(rho_hat, float).reshape(-1, 3)
    V = H[..., :, 0, None] * R[:, 0] + H[..., :, 1, None] * R[:, 1] + H[..., :, 2, None] * R[:, 2]
    return np.sqrt(np.sum(V * V, axis=-2))


def similarity(H1, H2) -> float:
    """Profile similarity, the negated Frobenius distance (always <= 0)."""
    return -float(np.linalg.norm(np.asarray(H1, float) - np.asarray(H2, float)))


def similarity_energy(H_i, members) -> float:
    """Mean profile distance from ``H_i`` to its bin members (self included)."""
    members = np.asarray(members, float).reshape(-1, 3, 3)
    if len(members) == 0:
        return 0.0
    return float(np.mean(np.linalg.norm((members - H_i).reshape(len(members), -1), axis=1)))


def consensus_energy(bin_count: int, m: int) -> float:
    return (m - bin_count) / m


def similarity_weight(min_es, global_min, sigma_s: float) -> np.ndarray:
    return np.exp(-((np.asarray(min_es, float) - global_min) ** 2) / sigma_s**2)


def proxy_chromaticity(c, L, proxy_normals, eps: float = 1e-4):
    """Chromaticity implied by the proxy normals, with shadowed channels dropped.

    Returns (rho_p (N,3), ok (N,)).  ``ok`` is False where every channel is
    shadowed under the proxy or the pixel is black.
    """
    c = np.asarray(c, float).reshape(-1, 3)
    s = np.einsum("nij,nj->ni", np.asarray(L, float).reshape(-1, 3, 3), np.asarray(proxy_normals, float).reshape(-1, 3))
    smax = s.max(axis=1, keepdims=True)
    lit = (s > eps * smax) & (smax > 0)
    rho = np.where(lit, c / np.where(lit, s, 1.0), 0.0)
    nrm = np.linalg.norm(rho, axis=1)
    ok = nrm > 0
    rho[ok] /= nrm[ok, None]
    return rho, ok


def proxy_energy(rho_p, rho_hat) -> np.ndarray:
    return 1.0 - np.asarray(rho_p, float) @ np.asarray(rho_hat, float).T


def proxy_weight(min_ep, ep_consensus, sigma_p: float) -> np.ndarray:
    """Proxy weight; zero where the consensus estimate already matches the proxy."""
    min_ep = np.asarray(min_ep, float)
    ep_c = np.asarray(ep_consensus, float)
    out = np.zeros(np.broadcast(min_ep, ep_c).shape)
    pos = ep_c > 0
    ratio = np.divide(min_ep, ep_c, out=np.zeros_like(out), where=pos)
    out[pos] = np.exp(-(ratio[pos] ** 2) / sigma_p**2)
    return out


def shading_map(rig: LightRig, positions: VectorMap) -> np.ndarray:
    """Per-pixel shading matrices (N, 3, 3) for the valid pixels of ``positions``.

    Rows of anisotropic lights are scaled by their angular falloff so the
    matrix matches the renderer exactly.
    """
    L = shading_matrices(rig.positions, positions.values())
    for i, light in enumerate(rig.lights):
        if light.anisotropy > 0:
            d = L[:, i, :] / np.linalg.norm(L[:, i, :], axis=1, keepdims=True)
            cos = np.clip(d @ light.principal_direction, 0.0, None)
            L[:, i, :] *= (cos ** light.anisotropy)[:, None]
    return L


def solve(image: VectorMap, L, proxy_normals: VectorMap, cfg: SolverConfig = SolverConfig(),
          grid: ChromaticityGrid | None = None, mask=None) -> ReconstructionResult:
    """Estimate chromaticity, albedo and normals at every valid pixel.

    ``L`` is either a LightRig together with proxy positions passed as a
    ``(rig, positions)`` tuple, or an (H, W, 3, 3) array of shading matrices.
    """
    t0 = time.perf_counter()
    grid = grid or ChromaticityGrid()
    cand = grid.candidates
    order = grid.sweep_order()
    if np.any(cand <= 0):
        keep = np.all(cand > 0, axis=1)
        new = np.cumsum(keep) - 1
        order = new[order[keep[order]]]
        cand = cand[keep]
    J = len(cand)
    cand = np.ascontiguousarray(cand)
    R = 1.0 / cand

    valid = image.mask & proxy_normals.mask
    if mask is not None:
        valid &= np.asarray(mask, bool)
    if isinstance(L, tuple):
        rig, positions = L
        valid &= positions.mask
        Lmap = np.zeros(image.shape + (3, 3))
        Lmap[positions.mask] = shading_map(rig, positions)
    else:
        Lmap = np.asarray(L, float)
        if Lmap.shape != image.shape + (3, 3):
            raise ValueError(f"shading matrix map must be {image.shape + (3, 3)}, got {Lmap.shape}")
        valid &= np.all(np.isfinite(Lmap), axis=(2, 3))

    rows, cols = np.nonzero(valid)
    c = image.data[valid]
    Lv = Lmap[valid]
    H, ok = pixel_profiles(c, Lv, cfg.cond_max)
    ok &= np.all(c >= 0, axis=1) & (c.max(axis=1) > 0) & np.all(np.isfinite(c), axis=1)
    n_singular = int((~ok).sum())
    rows, cols, c, Lv, H = rows[ok], cols[ok], c[ok], Lv[ok], H[ok]
    N = len(c)
    if N == 0:
        raise ValueError("no pixel has a usable profile")

    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(N)
    sample = perm if cfg.sample_size is None else perm[: cfg.sample_size]

    Hf = H.reshape(N, 9)
    scale = float(np.median(np.linalg.norm(Hf[sample], axis=1)))
    Hn = Hf if cfg.profile_scale is None else Hf * (cfg.profile_scale / scale)

    use_s = cfg.mode != "consensus"
    use_p = cfg.mode == "full"
    cap = N if cfg.bin_cap is None else cfg.bin_cap
    excl = 0 if cfg.include_self else 1
    m = len(sample)
    sample = np.ascontiguousarray(sample, dtype=np.int64)
    Hn = np.ascontiguousarray(Hn)

    # pass 1: consensus argmin and exact per-pixel minimum of the similarity term
    best_cnt = np.full(N, -1, np.int64)
    jc = np.zeros(N, np.int64)
    min_es = np.full(N, np.inf)
    n_exact = _kernels.consensus_pass(Hn, R, order, sample, cap, cfg.delta_b, use_s, excl, best_cnt, jc, min_es)

    ws = np.zeros(N)
    wp = np.zeros(N)
    rho_p = np.zeros((N, 3))
    global_min = float("nan")
    if use_s:
        finite = np.isfinite(min_es)
        global_min = float(min_es[finite].min()) if finite.any() else 0.0
        ws = similarity_weight(min_es, global_min, cfg.sigma_s)
    if use_p:
        pn = proxy_normals.data[rows, cols]
        rho_p, p_ok = proxy_chromaticity(c, Lv, pn, cfg.shadow_eps)
        ep_min = np.full(N, np.inf)
        for s0 in range(0, J, 512):
            ep_min = np.minimum(ep_min, proxy_energy(rho_p, cand[s0:s0 + 512]).min(axis=1))
        ep_c = 1.0 - np.sum(rho_p * cand[jc], axis=1)
        wp = np.where(p_ok, proxy_weight(ep_min, ep_c, cfg.sigma_p), 0.0)

    index = jc.copy()
    best_es = np.zeros(N)
    win_cnt = best_cnt.copy()
    if use_s:
        # pass 2: exact argmin of the combined energy, lowest index on ties
        best_e = np.full(N, np.inf)
        n_exact += _kernels.energy_pass(Hn, R, cand, order, sample, cap, cfg.delta_b, excl,
                                        cfg.lambda_s * ws, cfg.lambda_p * wp, rho_p,
                                        index, best_e, best_es, win_cnt)

    # recovery
    rho_hat = cand[index]
    v = np.einsum("nij,nj->ni", H, 1.0 / rho_hat)
    rho_norm = np.linalg.norm(v, axis=1)
    normals = v / rho_norm[:, None]
    albedo = rho_norm[:, None] * rho_hat

    pix_mask = np.zeros(image.shape, bool)
    pix_mask[rows, cols] = True
    idx_map = np.full(image.shape, -1, np.int64)
    idx_map[rows, cols] = index
    elapsed = time.perf_counter() - t0

    def vmap(vals):
        d = np.zeros(image.shape + (3,))
        d[rows, cols] = vals
        return VectorMap(d, pix_mask)

    def smap(vals, fill=np.nan):
        d = np.full(image.shape, fill)
        d[rows, cols] = vals
        return d

    diag = {
        "mode": cfg.mode,
        "num_candidates": J,
        "num_pixels": N,
        "num_invalid": int(valid.sum() - N),
        "num_singular": n_singular,
        "sample_size": m,
        "bin_cap": cfg.bin_cap,
        "profile_scale": scale,
        "min_E_s": _stats(min_es) if use_s else None,
        "exact_similarity_evaluations": int(n_exact),
        "similarity_global_min": global_min,
        "w_s": _stats(ws) if use_s else None,
        "w_p": _stats(wp) if use_p else None,
        "consensus_agrees": float(np.mean(index == jc)),
        "seconds": elapsed,
        "config": {k: getattr(cfg, k) for k in cfg.__dataclass_fields__},
    }
    maps = {}
    if cfg.keep_maps:
        ec_sel = (m - win_cnt) / m
        maps = {
            "consensus_index": smap(jc, -1).astype(np.int64),
            "E_c": smap(ec_sel),
            "E_s": smap(best_es) if use_s else None,
            "E_p": smap(1.0 - np.sum(rho_p * rho_hat, axis=1)) if use_p else None,
            "min_E_s": smap(min_es) if use_s else None,
            "w_s": smap(ws) if use_s else None,
            "w_p": smap(wp) if use_p else None,
            "rho_p": vmap(rho_p) if use_p else None,
        }
        maps = {k: v for k, v in maps.items() if v is not None}
        diag["E_c"] = _stats(ec_sel)
        if use_s:
            diag["E_s"] = _stats(best_es)
    log.info("solve: %d pixels, %d candidates, mode %s, %.1fs", N, J, cfg.mode, elapsed)
    return ReconstructionResult(idx_map, vmap(rho_hat), vmap(albedo), vmap(normals), diag, maps)


def _stats(x) -> dict:
    x = np.asarray(x, float)
    x = x[np.isfinite(x)]
    if x.size == 0:
        return {}
    return {"mean": float(x.mean()), "min": float(x.min()), "max": float(x.max()), "median": float(np.median(x))}


def recover(c, L, rho_hat):
    """Albedo norm and unit normal for a given chromaticity."""
    v = np.linalg.solve(np.asarray(L, float), np.asarray(c, float) / np.asarray(rho_hat, float))
    r = float(np.linalg.norm(v))
    return r, v / r
