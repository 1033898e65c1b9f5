"""Poisson integration of normal maps and mesh export.

Depth is the least-squares fit of forward differences to the orthographic
gradient field p = -nx/nz, q = -ny/nz, using only pixel pairs that are both
inside the domain (natural boundary).  Image rows run downward while y points
up, so a step to the next row is a step of -pitch in y.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse import linalg as splinalg

from .core import ScalarMap, VectorMap

log = logging.getLogger(__name__)

NZ_EPS = 1e-3
MIN_COMPONENT = 16


class IntegrationError(RuntimeError):
    pass


def gradients(normals: VectorMap, eps: float = NZ_EPS):
    """Return (p, q, domain); p and q are zero outside the domain."""
    n = normals.data
    domain = normals.mask & (np.abs(n[..., 2]) > eps)
    nz = np.where(domain, n[..., 2], 1.0)
    p = np.where(domain, -n[..., 0] / nz, 0.0)
    q = np.where(domain, -n[..., 1] / nz, 0.0)
    return p, q, domain


def _difference_operator(idx, p, q, pitch):
    """Sparse forward-difference operator D and the target differences g."""
    # horizontal pairs: z[r, c+1] - z[r, c] ~ pitch * mean(p)
    a, b = idx[:, :-1], idx[:, 1:]
    sel = (a >= 0) & (b >= 0)
    ia, ib = a[sel], b[sel]
    gx = 0.5 * (p[:, :-1][sel] + p[:, 1:][sel]) * pitch
    # vertical pairs: z[r+1, c] - z[r, c] ~ -pitch * mean(q)
    a2, b2 = idx[:-1, :], idx[1:, :]
    sel2 = (a2 >= 0) & (b2 >= 0)
    ja, jb = a2[sel2], b2[sel2]
    gy = -0.5 * (q[:-1, :][sel2] + q[1:, :][sel2]) * pitch
    ea = np.concatenate([ia, ja])
    eb = np.concatenate([ib, jb])
    g = np.concatenate([gx, gy])
    ne = len(g)
    e = np.arange(ne)
    D = sparse.csr_matrix(
        (np.concatenate([-np.ones(ne), np.ones(ne)]), (np.concatenate([e, e]), np.concatenate([ea, eb]))),
        shape=(ne, int(idx.max()) + 1),
    )
    return D, g


def integrate(normals: VectorMap, pixel_pitch: float = 1.0, rtol: float = 1e-8, max_iter: int = 10000,
              eps: float = NZ_EPS, min_component: int = MIN_COMPONENT) -> ScalarMap:
    """Depth map from a normal map, zero mean per 4-connected component."""
    if not pixel_pitch > 0:
        raise ValueError("pixel_pitch must be > 0")
    p, q, domain = gradients(normals, eps)
    labels, ncomp = ndimage.label(domain)
    if ncomp == 0:
        raise IntegrationError("no pixel with a usable normal")
    sizes = np.bincount(labels.ravel(), minlength=ncomp + 1)[1:]
    small = np.nonzero(sizes < min_component)[0]
    if len(small):
        raise IntegrationError(
            f"component {int(small[0]) + 1} has {int(sizes[small[0]])} pixels, fewer than {min_component}")
    depth = np.zeros(domain.shape)
    for comp in range(1, ncomp + 1):
        depth[labels == comp] = _solve_component(labels == comp, p, q, pixel_pitch, rtol, max_iter, comp)
    return ScalarMap(depth, domain)


def _solve_component(sel, p, q, pitch, rtol, max_iter, comp):
    r0, r1 = np.nonzero(sel.any(axis=1))[0][[0, -1]]
    c0, c1 = np.nonzero(sel.any(axis=0))[0][[0, -1]]
    box = (slice(r0, r1 + 1), slice(c0, c1 + 1))
    s = sel[box]
    idx = np.full(s.shape, -1, np.int64)
    n = int(s.sum())
    idx[s] = np.arange(n)
    D, g = _difference_operator(idx, p[box], q[box], pitch)
    b = D.T @ g
    Dt = D.T.tocsr()

    def lap(z):
        return Dt @ (D @ z)

    op = splinalg.LinearOperator((n, n), matvec=lap, dtype=float)
    # the Neumann system is singular only along constants, which b is orthogonal to
    b = b - b.mean()
    if not np.any(b):
        z = np.zeros(n)
    else:
        z, info = splinalg.cg(op, b, rtol=rtol, atol=0.0, maxiter=max_iter)
        if info != 0:
            raise IntegrationError(f"component {comp}: conjugate gradient did not converge in {max_iter} iterations")
        if not np.all(np.isfinite(z)):
            raise IntegrationError(f"component {comp}: singular system")
    return z - z.mean()


# ---------------------------------------------------------------------------
# meshes


@dataclass
class Mesh:
    vertices: np.ndarray      # (V, 3)
    faces: np.ndarray         # (F, 3) zero-based, counter-clockwise seen from +z
    normals: np.ndarray | None = None

    def write_obj(self, path) -> None:
        with open(path, "w") as f:
            f.write(f"# {len(self.vertices)} vertices, {len(self.faces)} faces\n")
            np.savetxt(f, self.vertices, fmt="v %.9g %.9g %.9g")
            if self.normals is not None:
                np.savetxt(f, self.normals, fmt="vn %.9g %.9g %.9g")
                np.savetxt(f, np.repeat(self.faces + 1, 2, axis=1), fmt="f %d//%d %d//%d %d//%d")
            else:
                np.savetxt(f, self.faces + 1, fmt="f %d %d %d")

    def write_ply(self, path) -> None:
        """Binary little-endian PLY."""
        props = ["x", "y", "z"] + (["nx", "ny", "nz"] if self.normals is not None else [])
        header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(self.vertices)}"]
        header += [f"property float {p}" for p in props]
        header += [f"element face {len(self.faces)}", "property list uchar int vertex_indices", "end_header"]
        cols = [self.vertices] + ([self.normals] if self.normals is not None else [])
        vdata = np.ascontiguousarray(np.hstack(cols), dtype="<f4")
        fdata = np.empty(len(self.faces), dtype=[("n", "u1"), ("i", "<i4", (3,))])
        fdata["n"] = 3
        fdata["i"] = self.faces
        with open(path, "wb") as f:
            f.write(("\n".join(header) + "\n").encode("ascii"))
            f.write(vdata.tobytes())
            f.write(fdata.tobytes())

    def write(self, path) -> None:
        if str(path).lower().endswith(".ply"):
            self.write_ply(path)
        else:
            self.write_obj(path)

    def euler_characteristic(self) -> int:
        """V - E + F counting only vertices used by some face."""
        used = np.unique(self.faces)
        e = np.sort(np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]]), axis=1)
        edges = np.unique(e, axis=0)
        return len(used) - len(edges) + len(self.faces)


def depth_to_mesh(depth: ScalarMap, pixel_pitch: float = 1.0, normals: VectorMap | None = None) -> Mesh:
    """One vertex per valid pixel; two triangles per fully valid 2x2 quad."""
    mask = depth.mask
    if not mask.any():
        raise ValueError("depth map has no valid pixel")
    idx = np.full(mask.shape, -1, np.int64)
    idx[mask] = np.arange(int(mask.sum()))
    r, c = np.nonzero(mask)
    verts = np.stack([c * pixel_pitch, -r * pixel_pitch, depth.data[mask]], axis=1).astype(float)
    a, b = idx[:-1, :-1], idx[:-1, 1:]
    d, e = idx[1:, :-1], idx[1:, 1:]
    quad = (a >= 0) & (b >= 0) & (d >= 0) & (e >= 0)
    a, b, d, e = a[quad], b[quad], d[quad], e[quad]
    faces = np.concatenate([np.stack([a, d, e], axis=1), np.stack([a, e, b], axis=1)])
    faces = faces.reshape(2, -1, 3).transpose(1, 0, 2).reshape(-1, 3)
    vn = None
    if normals is not None:
        vn = np.where(normals.mask[mask][:, None], normals.data[mask], 0.0)
    return Mesh(verts, faces, vn)


def export_mesh(depth: ScalarMap, path, pixel_pitch: float = 1.0, normals: VectorMap | None = None) -> Mesh:
    mesh = depth_to_mesh(depth, pixel_pitch, normals)
    mesh.write(path)
    log.info("wrote %s: %d vertices, %d faces", path, len(mesh.vertices), len(mesh.faces))
    return mesh
