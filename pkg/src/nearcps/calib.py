"""Self-calibration of three near point light positions from one image.

Each light is estimated independently from its own channel: random pixel
quadruplets give position hypotheses (Levenberg-Marquardt on the pairwise
equal-albedo residual), every hypothesis is scored by inlier voting, and the
hypotheses inside a cone around a directional estimate are merged with
inlier-count weights.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import DegenerateGeometryError, LightRig, LightSource, VectorMap, angle_between

log = logging.getLogger(__name__)

_PAIRS = np.array([(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)])


class CalibrationError(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class CalibConfig:
    iterations: int = 2000
    tau: float = 0.01
    eta_deg: float = 15.0
    sample_mask: np.ndarray | None = None
    seed: int = 0
    max_voters: int = 5000
    lm_max_iter: int = 100
    lm_gtol: float = 1e-10
    init_scale: float = 2.0
    max_range: float = 100.0
    min_pixels: int = 100

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if not 0 < self.eta_deg < 90:
            raise ValueError("eta must lie in (0, 90) degrees")


@dataclass
class CalibrationHypothesis:
    light_index: int
    position: np.ndarray
    inliers: int
    quadruplet: tuple[tuple[int, int], ...]
    status: str = "converged"


def pair_residual(p, c1, v1, n1, c2, v2, n2) -> np.ndarray:
    """Unbiased equal-albedo residual between two pixels, broadcasting over inputs.

    p, v*, n* : (..., 3); c* : (...,) intensities of one channel.
    """
    d1 = p - v1
    d2 = p - v2
    r1 = np.sqrt(np.sum(d1 * d1, axis=-1))
    r2 = np.sqrt(np.sum(d2 * d2, axis=-1))
    s1 = np.sum(d1 * n1, axis=-1)
    s2 = np.sum(d2 * n2, axis=-1)
    return c1 * s2 * r1 / (r2 * r2) - c2 * s1 * r2 / (r1 * r1)


def residual(a1, a2, p, channel: int, image: VectorMap, normals: VectorMap, positions: VectorMap) -> float:
    """Residual for the pixel pair ``a1``, ``a2`` given as (row, col)."""
    for a in (a1, a2):
        if not (image.mask[a] and normals.mask[a] and positions.mask[a]):
            raise ValueError(f"pixel {a} is not valid")
    p = np.asarray(p, float)
    v1, v2 = positions.data[a1], positions.data[a2]
    if np.linalg.norm(p - v1) == 0 or np.linalg.norm(p - v2) == 0:
        raise DegenerateGeometryError("light position coincides with a surface point")
    return float(
        pair_residual(
            p,
            image.data[a1][channel], v1, normals.data[a1],
            image.data[a2][channel], v2, normals.data[a2],
        )
    )


def _quad_residuals(P, c, v, n):
    """Residuals of the 6 unordered pairs for K hypotheses.

    P : (K, 3); c : (K, 4); v, n : (K, 4, 3).  Returns (K, 6).
    """
    i, j = _PAIRS[:, 0], _PAIRS[:, 1]
    return pair_residual(P[:, None, :], c[:, i], v[:, i], n[:, i], c[:, j], v[:, j], n[:, j])


def _jacobian(P, c, v, n):
    J = np.empty(P.shape[:1] + (6, 3))
    h = 1e-6 * np.maximum(1.0, np.abs(P))
    for k in range(3):
        step = np.zeros_like(P)
        step[:, k] = h[:, k]
        J[:, :, k] = (_quad_residuals(P + step, c, v, n) - _quad_residuals(P - step, c, v, n)) / (2 * h[:, k : k + 1])
    return J


def solve_hypotheses(P0, c, v, n, max_iter: int = 100, gtol: float = 1e-10):
    """Batched Levenberg-Marquardt over K independent quadruplets.

    Minimizes the sum of squared pair residuals (each unordered pair once; the
    ordered-pair sum is exactly twice this).  Returns positions (K, 3) and a
    status array with values 'converged', 'max_iter', 'degenerate' or
    'nonfinite'.  The caller additionally marks runaway solutions 'diverged'.
    """
    P = np.array(P0, float)
    K = len(P)
    lam = np.full(K, 1e-3)
    active = np.ones(K, bool)
    converged = np.zeros(K, bool)
    with np.errstate(all="ignore"):
        r = _quad_residuals(P, c, v, n)
        cost = np.sum(r * r, axis=1)
        for _ in range(max_iter):
            idx = np.nonzero(active)[0]
            if idx.size == 0:
                break
            Pa, ca, va, na = P[idx], c[idx], v[idx], n[idx]
            J = _jacobian(Pa, ca, va, na)
            g = np.einsum("kri,kr->ki", J, r[idx])
            done = (np.max(np.abs(g), axis=1) < gtol) | (cost[idx] < 1e-30)
            JTJ = np.einsum("kri,krj->kij", J, J)
            D = np.maximum(np.einsum("kii->ki", JTJ), 1e-20)
            A = JTJ + lam[idx, None, None] * (D[:, :, None] * np.eye(3))
            bad = ~np.all(np.isfinite(A), axis=(1, 2)) | ~np.all(np.isfinite(g), axis=1)
            A[bad] = np.eye(3)
            g[bad] = 0.0
            delta = -np.linalg.solve(A, g[..., None])[..., 0]
            Pn = Pa + delta
            rn = _quad_residuals(Pn, ca, va, na)
            cn = np.sum(rn * rn, axis=1)
            better = np.isfinite(cn) & (cn < cost[idx]) & ~done
            upd = idx[better]
            P[upd] = Pn[better]
            r[upd] = rn[better]
            cost[upd] = cn[better]
            lam[upd] = np.maximum(lam[upd] / 10.0, 1e-12)
            worse = idx[~better & ~done]
            lam[worse] *= 10.0
            tiny = np.linalg.norm(delta, axis=1) <= 1e-15 * (1.0 + np.linalg.norm(Pa, axis=1))
            stop = done | bad | (lam[idx] > 1e16) | (better & tiny)
            converged[idx[done | (lam[idx] > 1e16) | (better & tiny)]] = True
            active[idx[stop]] = False

        status = np.where(converged, "converged", "max_iter").astype(object)
        J = _jacobian(P, c, v, n)
        JTJ = np.einsum("kri,krj->kij", J, J)
        finite = np.all(np.isfinite(P), axis=1) & np.all(np.isfinite(JTJ), axis=(1, 2)) & np.isfinite(cost)
        ev = np.zeros((K, 3))
        ev[finite] = np.linalg.eigvalsh(JTJ[finite])
    rank_def = finite & ((ev[:, 2] <= 1e-30) | (ev[:, 0] <= 1e-12 * ev[:, 2]))
    status[rank_def] = "degenerate"
    status[~finite] = "nonfinite"
    return P, status


def solve_hypothesis(quadruplet, channel: int, image: VectorMap, normals: VectorMap, positions: VectorMap, p0, max_iter: int = 100, gtol: float = 1e-10):
    """Solve one quadruplet of (row, col) pixels; returns (position, status)."""
    quad = [tuple(a) for a in quadruplet]
    if len(set(quad)) != 4:
        raise ValueError("a quadruplet needs 4 distinct pixels")
    rows, cols = np.array(quad).T
    c = image.data[rows, cols, channel][None]
    v = positions.data[rows, cols][None]
    n = normals.data[rows, cols][None]
    P, status = solve_hypotheses(np.asarray(p0, float)[None], c, v, n, max_iter, gtol)
    return P[0], status[0]


def vote(P, c_q, v_q, n_q, c_w, v_w, n_w, tau: float, chunk: int = 128) -> np.ndarray:
    """Inlier counts for K hypotheses.

    A voter w is an inlier when the sum over the 4 quadruplet pixels k of
    E_r(a_k, a_w)^2 is strictly below tau^2.
    P : (K, 3); c_q, v_q, n_q : (K, 4[, 3]); c_w, v_w, n_w : (V[, 3]).
    """
    P = np.asarray(P, float)
    counts = np.zeros(len(P), dtype=np.int64)
    tau2 = tau * tau
    with np.errstate(all="ignore"):
        for s in range(0, len(P), chunk):
            p = P[s : s + chunk, None, :]
            dw = p - v_w[None]                                  # (k, V, 3)
            rw = np.sqrt(np.sum(dw * dw, axis=-1))
            sw = np.sum(dw * n_w[None], axis=-1)
            dq = p - v_q[s : s + chunk]                         # (k, 4, 3)
            rq = np.sqrt(np.sum(dq * dq, axis=-1))
            sq = np.sum(dq * n_q[s : s + chunk], axis=-1)
            total = np.zeros(rw.shape)
            for k in range(4):
                e = (c_q[s : s + chunk, k, None] * sw * rq[:, k, None] / (rw * rw)
                     - c_w[None] * sq[:, k, None] * rw / (rq[:, k, None] ** 2))
                total += e * e
            counts[s : s + chunk] = np.sum(total < tau2, axis=1)
    return counts


def four_point_directions(c, n) -> np.ndarray:
    """Directional-light estimate from sampled pixels.

    Fits c ~ M n in least squares over all samples (the four-point
    construction generalized to N samples) and returns the rows of M
    normalized to unit length, shape (3, 3).
    """
    c = np.asarray(c, float).reshape(-1, 3)
    n = np.asarray(n, float).reshape(-1, 3)
    if len(n) < 4:
        raise DegenerateGeometryError(f"need at least 4 samples, got {len(n)}")
    if np.linalg.matrix_rank(n) < 3:
        raise DegenerateGeometryError("sample normals do not span 3-D")
    Mt, *_ = np.linalg.lstsq(n, c, rcond=None)
    M = Mt.T
    norms = np.linalg.norm(M, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateGeometryError("a channel has no signal")
    return M / norms


def filter_hypotheses(positions, direction, center, eta_deg: float) -> np.ndarray:
    """Boolean mask of hypotheses within the cone of half-angle eta around ``direction``."""
    positions = np.asarray(positions, float).reshape(-1, 3)
    ang = angle_between(positions - np.asarray(center, float), np.broadcast_to(direction, positions.shape))
    return np.isfinite(ang) & (ang < eta_deg)


def merge_hypotheses(positions, weights) -> np.ndarray:
    """Inlier-weighted mean of hypothesis positions."""
    positions = np.asarray(positions, float).reshape(-1, 3)
    weights = np.asarray(weights, float).reshape(-1)
    total = weights.sum()
    if len(positions) == 0 or not total > 0:
        raise CalibrationError("no hypotheses with positive weight to merge")
    return (weights[:, None] * positions).sum(axis=0) / total


@dataclass
class LightDiagnostics:
    light_index: int
    direction: np.ndarray
    init: np.ndarray
    hypotheses: list[CalibrationHypothesis]
    kept: np.ndarray
    fallback: bool
    merged: np.ndarray | None
    vanilla: np.ndarray | None
    error: str | None = None

    def to_dict(self, include_cloud: bool = False) -> dict:
        inl = np.array([h.inliers for h in self.hypotheses])
        hist, edges = np.histogram(inl, bins=20) if len(inl) else (np.array([]), np.array([]))
        d = {
            "light_index": self.light_index,
            "direction": self.direction.tolist(),
            "init": self.init.tolist(),
            "num_hypotheses": len(self.hypotheses),
            "num_kept": int(self.kept.sum()),
            "fallback_unfiltered": self.fallback,
            "merged": None if self.merged is None else self.merged.tolist(),
            "vanilla_ransac": None if self.vanilla is None else self.vanilla.tolist(),
            "inlier_histogram": {"counts": hist.tolist(), "edges": edges.tolist()},
            "error": self.error,
        }
        if include_cloud:
            d["hypotheses"] = [
                {"position": h.position.tolist(), "inliers": h.inliers, "status": h.status,
                 "kept": bool(k), "quadruplet": [list(a) for a in h.quadruplet]}
                for h, k in zip(self.hypotheses, self.kept)
            ]
        return d


@dataclass
class CalibrationResult:
    rig: LightRig
    lights: list[LightDiagnostics] = field(default_factory=list)
    center: np.ndarray | None = None

    @property
    def vanilla_rig(self) -> LightRig:
        return LightRig.from_positions([d.vanilla for d in self.lights])

    def to_dict(self, include_cloud: bool = False) -> dict:
        return {
            "center": None if self.center is None else self.center.tolist(),
            "lights": [d.to_dict(include_cloud) for d in self.lights],
        }


def _calibrate_light(i, c, v, n, pix, direction, center, radius, cfg: CalibConfig) -> LightDiagnostics:
    lit = c > 0
    rows_cols = pix[lit]
    c, v, n = c[lit], v[lit], n[lit]
    m = len(c)
    init = center + cfg.init_scale * radius * direction
    diag = LightDiagnostics(i, direction, init, [], np.zeros(0, bool), False, None, None)
    if m < 4:
        diag.error = f"light {i}: only {m} lit sample pixels"
        return diag

    rng = np.random.default_rng(cfg.seed)
    quads = np.stack([rng.choice(m, 4, replace=False) for _ in range(cfg.iterations)])
    voters = rng.choice(m, cfg.max_voters, replace=False) if m > cfg.max_voters else np.arange(m)

    P0 = np.broadcast_to(init, (len(quads), 3))
    P, status = solve_hypotheses(P0, c[quads], v[quads], n[quads], cfg.lm_max_iter, cfg.lm_gtol)
    # stalled far away: the residual flattens out toward infinity
    far = np.linalg.norm(P - center, axis=1) > cfg.max_range * radius
    status[far & (status != "nonfinite")] = "diverged"
    usable = (status == "converged") | (status == "max_iter")
    inliers = np.zeros(len(P), dtype=np.int64)
    if usable.any():
        q = quads[usable]
        inliers[usable] = vote(P[usable], c[q], v[q], n[q], c[voters], v[voters], n[voters], cfg.tau)

    diag.hypotheses = [
        CalibrationHypothesis(i, P[k], int(inliers[k]), tuple(tuple(int(x) for x in rows_cols[q]) for q in quads[k]), str(status[k]))
        for k in range(len(P))
    ]
    if not usable.any():
        diag.kept = usable
        diag.error = f"light {i}: every hypothesis was rejected"
        return diag

    best = int(np.argmax(np.where(usable, inliers, -1)))
    diag.vanilla = P[best]
    kept = usable & filter_hypotheses(np.where(usable[:, None], P, 0.0), direction, center, cfg.eta_deg)
    if not np.any(kept & (inliers > 0)):
        warnings.warn(f"light {i}: no hypothesis inside the {cfg.eta_deg} deg cone; merging unfiltered", RuntimeWarning)
        diag.fallback = True
        kept = usable
    diag.kept = kept
    try:
        diag.merged = merge_hypotheses(P[kept], inliers[kept])
    except CalibrationError as e:
        diag.error = f"light {i}: {e}"
    return diag


def calibrate(image: VectorMap, proxy_normals: VectorMap, proxy_positions: VectorMap, cfg: CalibConfig = CalibConfig()) -> CalibrationResult:
    """Estimate the three light positions in the proxy's coordinate frame."""
    valid = image.mask & proxy_normals.mask & proxy_positions.mask
    sample = valid if cfg.sample_mask is None else valid & np.asarray(cfg.sample_mask, bool)
    if sample.sum() < cfg.min_pixels:
        raise ValueError(f"sampling mask covers {int(sample.sum())} valid pixels; need >= {cfg.min_pixels}")

    center = proxy_positions.data[valid].mean(axis=0)
    radius = float(np.max(np.linalg.norm(proxy_positions.data[valid] - center, axis=1)))
    pix = np.argwhere(sample)
    c_all = image.data[sample]
    v_all = proxy_positions.data[sample]
    n_all = proxy_normals.data[sample]

    lit_all = np.all(c_all > 0, axis=1)
    directions = four_point_directions(c_all[lit_all], n_all[lit_all])

    lights = []
    for i in range(3):
        lights.append(_calibrate_light(i, c_all[:, i], v_all, n_all, pix, directions[i], center, radius, cfg))
    failures = [d.error for d in lights if d.merged is None]
    if failures:
        raise CalibrationError("; ".join(failures), diagnostics=lights)
    rig = LightRig(tuple(LightSource(d.merged) for d in lights))
    return CalibrationResult(rig, lights, center)
