"""Triangulation of the study region and P1 finite-element matrices.

The mesh covers the convex hull of the input locations inflated by an
extension ring. Vertices are laid out on an equilateral lattice, the input
locations are inserted as vertices, and long edges are split until every edge
is no longer than ``max_edge_km``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
from scipy.spatial import ConvexHull, Delaunay, QhullError, cKDTree

DUPLICATE_TOL = 1e-9
INSERT_TOL = 1e-6


class GeometryError(ValueError):
    """Raised when the input points cannot support a triangulation."""


class OutOfDomainError(ValueError):
    """Raised when a location falls outside every mesh triangle."""

    def __init__(self, indices):
        self.indices = [int(i) for i in np.atleast_1d(indices)]
        shown = ", ".join(str(i) for i in self.indices[:10])
        more = "" if len(self.indices) <= 10 else f" (+{len(self.indices) - 10} more)"
        super().__init__(f"location(s) outside mesh at index {shown}{more}")


class Point2(NamedTuple):
    x: float
    y: float


def as_points(points) -> np.ndarray:
    """Coerce a sequence of ``Point2``/pairs or an (n, 2) array to float64."""
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 1 and arr.size == 2:
        arr = arr.reshape(1, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"expected (n, 2) coordinates, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("coordinates must be finite")
    return arr


@dataclass(frozen=True, eq=False)
class Mesh:
    """Planar triangulation.

    ``vertices`` is (n, 2) in km, ``triangles`` is (m, 3) vertex indices in
    counter-clockwise order, and ``interior`` marks vertices inside the
    original (un-extended) domain.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    interior: np.ndarray
    _tree: cKDTree | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=float)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64)
        flags = np.ascontiguousarray(self.interior, dtype=bool)
        if v.ndim != 2 or v.shape[1] != 2:
            raise ValueError("vertices must be (n, 2)")
        if t.ndim != 2 or t.shape[1] != 3:
            raise ValueError("triangles must be (m, 3)")
        if flags.shape != (v.shape[0],):
            raise ValueError("interior flag must have one entry per vertex")
        area = _signed_areas(v, t)
        flip = area < 0
        if np.any(flip):
            t = t.copy()
            t[flip, 1], t[flip, 2] = t[flip, 2].copy(), t[flip, 1].copy()
        for arr in (v, t, flags):
            arr.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "interior", flags)
        centroids = v[t].mean(axis=1)
        object.__setattr__(self, "_tree", cKDTree(centroids))

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def areas(self) -> np.ndarray:
        return _signed_areas(self.vertices, self.triangles)

    def edges(self) -> np.ndarray:
        """Unique undirected edges as an (e, 2) array with ``i < j``."""
        t = self.triangles
        e = np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def edge_lengths(self) -> np.ndarray:
        e = self.edges()
        return np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)

    def locate(self, locations) -> tuple[np.ndarray, np.ndarray]:
        """Containing triangle and barycentric weights for each location.

        Triangle index is -1 for locations outside the mesh.
        """
        pts = as_points(locations)
        tri = np.full(len(pts), -1, dtype=np.int64)
        bary = np.zeros((len(pts), 3))
        if len(pts) == 0:
            return tri, bary
        k = min(12, self.n_triangles)
        _, cand = self._tree.query(pts, k=k)
        cand = np.asarray(cand).reshape(len(pts), k)
        for col in range(k):
            todo = np.flatnonzero(tri < 0)
            if todo.size == 0:
                break
            tt = cand[todo, col]
            lam = _barycentric(self.vertices, self.triangles[tt], pts[todo])
            ok = np.all(lam >= -1e-10, axis=1)
            tri[todo[ok]] = tt[ok]
            bary[todo[ok]] = lam[ok]
        # Slivers can hide the containing triangle from the centroid query.
        for i in np.flatnonzero(tri < 0):
            lam = _barycentric(
                self.vertices, self.triangles, np.broadcast_to(pts[i], (self.n_triangles, 2))
            )
            ok = np.flatnonzero(np.all(lam >= -1e-10, axis=1))
            if ok.size:
                tri[i] = ok[0]
                bary[i] = lam[ok[0]]
        bary = np.clip(bary, 0.0, None)
        hit = tri >= 0
        bary[hit] /= bary[hit].sum(axis=1, keepdims=True)
        return tri, bary

    def contains(self, locations) -> np.ndarray:
        return self.locate(locations)[0] >= 0

    def save(self, path) -> None:
        Path(path).write_text(mesh_to_text(self))

    @classmethod
    def load(cls, path) -> "Mesh":
        return mesh_from_text(Path(path).read_text())


@dataclass(frozen=True, eq=False)
class FemMatrices:
    """Lumped mass ``c_lumped`` (diagonal entries) and stiffness ``G``."""

    c_lumped: np.ndarray
    G: sp.csc_matrix

    @property
    def n(self) -> int:
        return self.c_lumped.shape[0]

    @property
    def C(self) -> sp.dia_matrix:
        return sp.diags(self.c_lumped, format="csc")

    @property
    def C_inv(self) -> sp.dia_matrix:
        return sp.diags(1.0 / self.c_lumped, format="csc")


def _signed_areas(v: np.ndarray, t: np.ndarray) -> np.ndarray:
    p0, p1, p2 = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
    return 0.5 * (
        (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1])
        - (p2[:, 0] - p0[:, 0]) * (p1[:, 1] - p0[:, 1])
    )


def _barycentric(v: np.ndarray, tris: np.ndarray, pts: np.ndarray) -> np.ndarray:
    p0, p1, p2 = v[tris[:, 0]], v[tris[:, 1]], v[tris[:, 2]]
    d1 = p1 - p0
    d2 = p2 - p0
    r = pts - p0
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    l1 = (r[:, 0] * d2[:, 1] - r[:, 1] * d2[:, 0]) / det
    l2 = (d1[:, 0] * r[:, 1] - d1[:, 1] * r[:, 0]) / det
    return np.column_stack([1.0 - l1 - l2, l1, l2])


def _dedupe(points: np.ndarray, tol: float) -> np.ndarray:
    """Drop points within ``tol`` of an earlier point, preserving order."""
    tree = cKDTree(points)
    keep = np.ones(len(points), dtype=bool)
    for i, j in sorted(tree.query_pairs(tol)):
        if keep[i] and keep[j]:
            keep[j] = False
    return points[keep]


def _inflated_hull(points: np.ndarray, extension: float, h: float) -> np.ndarray:
    """Counter-clockwise polygon containing the hull buffered by ``extension``."""
    hull = ConvexHull(points)
    corners = points[hull.vertices]
    if extension <= 0:
        return corners
    m = max(16, int(math.ceil(2 * math.pi * extension / h)))
    radius = extension / math.cos(math.pi / m)
    ang = 2 * math.pi * np.arange(m) / m
    ring = radius * np.column_stack([np.cos(ang), np.sin(ang)])
    cloud = (corners[:, None, :] + ring[None, :, :]).reshape(-1, 2)
    outer = ConvexHull(cloud)
    return cloud[outer.vertices]


def _boundary_nodes(poly: np.ndarray, h: float) -> np.ndarray:
    """Nodes spaced evenly by arc length along a closed convex polygon.

    Nodes bulge outward slightly so none is collinear on the hull; qhull
    would otherwise drop them as coplanar.
    """
    a = poly
    d = np.roll(poly, -1, axis=0) - a
    seg = np.linalg.norm(d, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    k = max(3, int(math.ceil(cum[-1] / h)))
    arc = cum[-1] * np.arange(k) / k
    e = np.clip(np.searchsorted(cum, arc, side="right") - 1, 0, len(seg) - 1)
    s = ((arc - cum[e]) / seg[e])[:, None]
    normal = np.column_stack([d[e, 1], -d[e, 0]]) / seg[e][:, None]
    return a[e] + s * d[e] + (4e-3 * h) * s * (1 - s) * normal


def _peel_slivers(nodes: np.ndarray, tris: np.ndarray, ratio: float = 0.05) -> np.ndarray:
    """Drop flat triangles hanging on the outer boundary.

    A triangle whose boundary edge has the opposite vertex within ``ratio``
    times the edge length spans a near-collinear boundary triple; removing it
    leaves a slightly non-convex but well-shaped boundary.
    """
    while True:
        e = np.vstack([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
        opp = np.concatenate([tris[:, 2], tris[:, 0], tris[:, 1]])
        owner = np.tile(np.arange(len(tris)), 3)
        key = np.sort(e, axis=1)
        _, inv, count = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        edge_on_boundary = count[inv.ravel()] == 1
        a, b, c = nodes[e[:, 0]], nodes[e[:, 1]], nodes[opp]
        ab = b - a
        length = np.linalg.norm(ab, axis=1)
        height = np.abs(ab[:, 0] * (c - a)[:, 1] - ab[:, 1] * (c - a)[:, 0]) / length
        bad = np.unique(owner[edge_on_boundary & (height < ratio * length)])
        if bad.size == 0:
            return tris
        keep = np.ones(len(tris), dtype=bool)
        keep[bad] = False
        # Never orphan a vertex.
        used = np.zeros(len(nodes), dtype=bool)
        used[tris[keep].ravel()] = True
        safe = [t for t in bad if used[tris[t]].all()]
        if not safe:
            return tris
        keep[:] = True
        keep[safe] = False
        tris = tris[keep]


def _halfplane_margin(poly: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Signed distance to the nearest edge of a convex CCW polygon (>0 inside)."""
    a = poly
    b = np.roll(poly, -1, axis=0)
    d = b - a
    n = np.column_stack([-d[:, 1], d[:, 0]]) / np.linalg.norm(d, axis=1)[:, None]
    dist = np.einsum("pek,ek->pe", pts[:, None, :] - a[None, :, :], n)
    return dist.min(axis=1)


def _lattice(poly: np.ndarray, h: float) -> np.ndarray:
    lo = poly.min(axis=0)
    hi = poly.max(axis=0)
    dy = h * math.sqrt(3) / 2
    ys = np.arange(lo[1], hi[1] + dy, dy)
    rows = []
    for r, yv in enumerate(ys):
        xs = np.arange(lo[0] + (0.5 * h if r % 2 else 0.0), hi[0] + h, h)
        rows.append(np.column_stack([xs, np.full_like(xs, yv)]))
    grid = np.vstack(rows)
    return grid[_halfplane_margin(poly, grid) > 0.5 * h]


def _triangulate(pts: np.ndarray) -> np.ndarray:
    try:
        tri = Delaunay(pts, qhull_options="Qbb Qc Qz Q12")
    except QhullError as exc:
        raise GeometryError(f"triangulation failed: {exc}") from exc
    return tri.simplices.astype(np.int64)


def build_mesh(points, max_edge_km: float, extension_km: float = 0.0) -> Mesh:
    """Triangulate the hull of ``points`` inflated by ``extension_km``.

    Every input point becomes a mesh vertex unless it duplicates another
    within 1e-9 km, and every edge is at most ``max_edge_km`` long.
    """
    pts = as_points(points)
    if len(pts) == 0:
        raise GeometryError("no points given")
    if not max_edge_km > 0:
        raise ValueError("max_edge_km must be positive")
    if extension_km < 0:
        raise ValueError("extension_km must be non-negative")
    data = _dedupe(pts, DUPLICATE_TOL)
    if len(data) < 3 or np.linalg.matrix_rank(data - data.mean(axis=0), tol=1e-9) < 2:
        raise GeometryError("need at least 3 non-collinear points")

    h = max_edge_km / 1.2
    poly = _inflated_hull(data, extension_km, h)
    boundary = _boundary_nodes(poly, h)
    lattice = _lattice(poly, h)
    # Each data location replaces the nearest lattice node within 0.35 h, so
    # inserted vertices leave neither holes nor slivers.
    if len(lattice):
        dist, idx = cKDTree(lattice).query(data, k=1)
        claimed = np.zeros(len(lattice), dtype=bool)
        for d, i in zip(dist, idx):
            if d < 0.35 * h and not claimed[i]:
                claimed[i] = True
        lattice = lattice[~claimed]
    boundary = boundary[cKDTree(data).query(boundary, k=1)[0] > INSERT_TOL]
    nodes = np.vstack([data, boundary, lattice])

    for _ in range(50):
        tris = _triangulate(nodes)
        e = np.vstack([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
        e.sort(axis=1)
        e = np.unique(e, axis=0)
        length = np.linalg.norm(nodes[e[:, 0]] - nodes[e[:, 1]], axis=1)
        long = e[length > max_edge_km]
        if long.size == 0:
            break
        mids = 0.5 * (nodes[long[:, 0]] + nodes[long[:, 1]])
        mids = _dedupe(mids, 0.25 * max_edge_km)
        mids = mids[cKDTree(nodes).query(mids, k=1)[0] > 0.1 * max_edge_km]
        if mids.size == 0:
            break
        nodes = np.vstack([nodes, mids])

    keep = _signed_areas(nodes, tris) ** 2 > (1e-12 * max_edge_km**2) ** 2
    tris = _peel_slivers(nodes, tris[keep])
    used = np.unique(tris)
    remap = np.full(len(nodes), -1, dtype=np.int64)
    remap[used] = np.arange(used.size)
    nodes = nodes[used]
    tris = remap[tris]

    hull = ConvexHull(data)
    inside = _halfplane_margin(data[hull.vertices], nodes) >= -DUPLICATE_TOL
    return Mesh(nodes, tris, inside)


def assemble_fem(mesh: Mesh) -> FemMatrices:
    """Lumped mass and P1 stiffness matrices.

    ``c_lumped[i]`` is one third of the area of the triangles around vertex
    ``i``; ``G[i, j]`` is the integral of grad(psi_i) . grad(psi_j).
    """
    v, t = mesh.vertices, mesh.triangles
    n = mesh.n_vertices
    area = mesh.areas()
    c = np.bincount(t.ravel(), weights=np.repeat(area / 3.0, 3), minlength=n)

    # Edge opposite vertex i, (p_{i+2} - p_{i+1}); grad psi_i is its rotation / 2A.
    p = v[t]
    e = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
    local = np.einsum("tik,tjk->tij", e, e) / (4.0 * area)[:, None, None]
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    G = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsc()
    G.sum_duplicates()
    G = 0.5 * (G + G.T)
    return FemMatrices(c, G.tocsc())


def projector(mesh: Mesh, locations) -> sp.csr_matrix:
    """Barycentric interpolation matrix from mesh vertices to ``locations``."""
    pts = as_points(locations)
    tri, bary = mesh.locate(pts)
    if np.any(tri < 0):
        raise OutOfDomainError(np.flatnonzero(tri < 0))
    rows = np.repeat(np.arange(len(pts)), 3)
    cols = mesh.triangles[tri].ravel()
    vals = bary.ravel()
    nz = vals != 0
    A = sp.csr_matrix((vals[nz], (rows[nz], cols[nz])), shape=(len(pts), mesh.n_vertices))
    A.sum_duplicates()
    return A


def mesh_to_text(mesh: Mesh) -> str:
    lines = [f"VERTICES {mesh.n_vertices}", "id,x,y,interior"]
    for i, ((x, y), flag) in enumerate(zip(mesh.vertices, mesh.interior)):
        lines.append(f"{i},{float(x)!r},{float(y)!r},{int(flag)}")
    lines += [f"TRIANGLES {mesh.n_triangles}", "v0,v1,v2"]
    lines += [f"{a},{b},{c}" for a, b, c in mesh.triangles]
    return "\n".join(lines) + "\n"


def mesh_from_text(text: str) -> Mesh:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("VERTICES"):
        raise ValueError("mesh text must start with a VERTICES header")
    nv = int(lines[0].split()[1])
    vert_rows = lines[2 : 2 + nv]
    head = lines[2 + nv]
    if not head.startswith("TRIANGLES"):
        raise ValueError("missing TRIANGLES header")
    nt = int(head.split()[1])
    tri_rows = lines[4 + nv : 4 + nv + nt]
    vt = np.array([[float(f) for f in r.split(",")] for r in vert_rows]).reshape(nv, 4)
    order = np.argsort(vt[:, 0])
    vt = vt[order]
    tris = np.array([[int(f) for f in r.split(",")] for r in tri_rows], dtype=np.int64)
    return Mesh(vt[:, 1:3], tris.reshape(nt, 3), vt[:, 3].astype(bool))


def grid_mesh(x0: float, y0: float, nx: int, ny: int, h: float) -> Mesh:
    """Structured right-triangle mesh with all diagonals running SW to NE."""
    xs = x0 + h * np.arange(nx + 1)
    ys = y0 + h * np.arange(ny + 1)
    X, Y = np.meshgrid(xs, ys)
    verts = np.column_stack([X.ravel(), Y.ravel()])
    idx = np.arange((nx + 1) * (ny + 1)).reshape(ny + 1, nx + 1)
    a = idx[:-1, :-1].ravel()
    b = idx[:-1, 1:].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[1:, :-1].ravel()
    tris = np.vstack([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    return Mesh(verts, tris, np.ones(len(verts), dtype=bool))

