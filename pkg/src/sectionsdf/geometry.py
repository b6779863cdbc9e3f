"""Planes, contours, 2D signed distances and contour extraction.

Conventions used throughout the package:

* signed distances are negative inside and positive outside;
* interior is decided by the even-odd rule over *all* contours of a plane,
  so nested contours carve holes regardless of their orientation;
* contours are stored counter-clockwise, which is only a canonical form.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

ORTHO_TOL = 1e-9
NORMALIZED_HALF_EXTENT = 0.9
ON_EDGE_TOL = 1e-12
_CHUNK = 4096


class GeometryError(ValueError):
    """Invalid geometric input (bad plane, degenerate contour, open mesh)."""


@dataclass(frozen=True)
class Plane:
    origin: np.ndarray
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        u = np.asarray(self.u, dtype=np.float64).reshape(3)
        v = np.asarray(self.v, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(u) - 1.0) > ORTHO_TOL or abs(np.linalg.norm(v) - 1.0) > ORTHO_TOL:
            raise GeometryError("plane axes must be unit vectors")
        if abs(float(u @ v)) > ORTHO_TOL:
            raise GeometryError("plane axes must be orthogonal")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @classmethod
    def from_normal(cls, origin, normal) -> "Plane":
        """Plane through `origin` with an arbitrary right-handed in-plane frame."""
        n = np.asarray(normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        u = np.cross(helper, n)
        u /= np.linalg.norm(u)
        v = np.cross(n, u)
        return cls(origin, u, v)

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.u, self.v)

    def to_world(self, ab) -> np.ndarray:
        ab = np.asarray(ab, dtype=np.float64)
        return self.origin + ab[..., :1] * self.u + ab[..., 1:2] * self.v

    def to_plane(self, x) -> np.ndarray:
        d = np.asarray(x, dtype=np.float64) - self.origin
        return np.stack([d @ self.u, d @ self.v], axis=-1)

    def distance(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.origin) @ self.normal


def _segments_intersect(p1, p2, q1, q2):
    """Vectorised proper/touching intersection test for segment arrays."""

    def orient(a, b, c):
        return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (
            c[..., 0] - a[..., 0]
        )

    d1 = orient(q1, q2, p1)
    d2 = orient(q1, q2, p2)
    d3 = orient(p1, p2, q1)
    d4 = orient(p1, p2, q2)
    proper = (d1 * d2 < 0) & (d3 * d4 < 0)

    def on_seg(a, b, c, d):
        return (
            (d == 0)
            & (np.minimum(a[..., 0], b[..., 0]) <= c[..., 0])
            & (c[..., 0] <= np.maximum(a[..., 0], b[..., 0]))
            & (np.minimum(a[..., 1], b[..., 1]) <= c[..., 1])
            & (c[..., 1] <= np.maximum(a[..., 1], b[..., 1]))
        )

    touch = on_seg(q1, q2, p1, d1) | on_seg(q1, q2, p2, d2) | on_seg(p1, p2, q1, d3) | on_seg(p1, p2, q2, d4)
    return proper | touch


def signed_area(vertices: np.ndarray) -> float:
    x, y = vertices[:, 0], vertices[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


@dataclass(frozen=True)
class Contour2D:
    """Closed simple polyline in plane coordinates (closing edge implicit)."""

    vertices: np.ndarray
    validate: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 2)
        if len(v) < 3:
            raise GeometryError(f"contour needs at least 3 vertices, got {len(v)}")
        if not np.all(np.isfinite(v)):
            raise GeometryError("contour has non-finite vertices")
        edge_len = np.linalg.norm(np.roll(v, -1, axis=0) - v, axis=1)
        if np.any(edge_len == 0):
            raise GeometryError("contour has zero-length edges")
        if signed_area(v) < 0:
            v = v[::-1].copy()
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        if self.validate:
            self._check_simple()

    def _check_simple(self):
        a = self.vertices
        b = np.roll(a, -1, axis=0)
        n = len(a)
        idx = np.arange(n)
        for start in range(0, n, 512):
            i = idx[start : start + 512, None]
            j = idx[None, :]
            # adjacent edges share a vertex by construction
            adjacent = (np.abs(i - j) <= 1) | (np.abs(i - j) == n - 1)
            hit = _segments_intersect(a[i], b[i], a[j], b[j]) & ~adjacent
            if np.any(hit):
                ii, jj = np.argwhere(hit)[0]
                raise GeometryError(f"contour self-intersects (edges {start + ii} and {jj})")
        # adjacent edges folding back onto each other
        e = b - a
        e_next = np.roll(e, -1, axis=0)
        cross = e[:, 0] * e_next[:, 1] - e[:, 1] * e_next[:, 0]
        dot = np.einsum("ij,ij->i", e, e_next)
        if np.any((np.abs(cross) <= 1e-15 * np.abs(dot)) & (dot < 0)):
            raise GeometryError("contour doubles back on itself")

    @property
    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices, np.roll(self.vertices, -1, axis=0)

    @property
    def area(self) -> float:
        return signed_area(self.vertices)

    @property
    def perimeter(self) -> float:
        a, b = self.edges
        return float(np.linalg.norm(b - a, axis=1).sum())

    def __len__(self):
        return len(self.vertices)


@dataclass(frozen=True)
class NormalizationTransform:
    """Isotropic map world -> normalized: (x - center) * scale."""

    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise GeometryError("normalization scale must be positive")
        object.__setattr__(self, "scale", float(self.scale))

    def forward(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.center) * self.scale

    def inverse(self, y) -> np.ndarray:
        return np.asarray(y, dtype=np.float64) / self.scale + self.center

    @property
    def is_identity(self) -> bool:
        return self.scale == 1.0 and not np.any(self.center)


@dataclass(frozen=True)
class Section:
    plane: Plane
    contours: tuple[Contour2D, ...]

    def __post_init__(self):
        object.__setattr__(self, "contours", tuple(self.contours))


@dataclass(frozen=True)
class CrossSectionSet:
    sections: tuple[Section, ...]
    normalization: NormalizationTransform = field(default_factory=NormalizationTransform)

    def __post_init__(self):
        object.__setattr__(self, "sections", tuple(self.sections))

    def __len__(self):
        return len(self.sections)

    def world_vertices(self) -> np.ndarray:
        pts = [s.plane.to_world(c.vertices) for s in self.sections for c in s.contours]
        return np.concatenate(pts) if pts else np.zeros((0, 3))

    @property
    def n_contours(self) -> int:
        return sum(len(s.contours) for s in self.sections)

    def subset(self, indices: Sequence[int]) -> "CrossSectionSet":
        return CrossSectionSet(tuple(self.sections[i] for i in indices), self.normalization)


@dataclass
class TriMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise GeometryError("triangle index out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def face_normals(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        n = np.cross(b - a, c - a)
        return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)

    def cleaned(self, weld_tol: float = 1e-7) -> "TriMesh":
        """Weld vertices on a `weld_tol` grid, drop degenerate and unused geometry."""
        if self.is_empty:
            return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
        keys = np.round(self.vertices / weld_tol).astype(np.int64)
        _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
        inverse = inverse.reshape(-1)
        verts = self.vertices[first]
        tris = inverse[self.triangles]
        ok = (tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2]) & (tris[:, 0] != tris[:, 2])
        tris = tris[ok]
        mesh = TriMesh(verts, tris)
        tris = tris[mesh.triangle_areas() > 0]
        used = np.unique(tris)
        remap = np.full(len(verts), -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        return TriMesh(verts[used], remap[tris])

    def transformed(self, fn) -> "TriMesh":
        return TriMesh(fn(self.vertices), self.triangles.copy())

    def edge_use_counts(self) -> np.ndarray:
        e = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return counts

    def is_watertight(self) -> bool:
        return not self.is_empty and bool(np.all(self.edge_use_counts() == 2))

    def euler_characteristic(self) -> int:
        n_edges = len(self.edge_use_counts())
        return len(self.vertices) - n_edges + len(self.triangles)


def normalize_scene(sections: CrossSectionSet) -> CrossSectionSet:
    """Center the contour bounding box at the origin, longest side 1.8.

    The input normalization (if any) is composed so the returned transform
    always maps the original world coordinates to normalized ones.
    """
    pts = sections.world_vertices()
    if len(pts) == 0:
        raise GeometryError("no contours")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    extent = float(np.max(hi - lo))
    if extent <= 0:
        raise GeometryError("contours have zero extent")
    center = 0.5 * (lo + hi)
    scale = 2.0 * NORMALIZED_HALF_EXTENT / extent
    out = []
    for s in sections.sections:
        plane = Plane((s.plane.origin - center) * scale, s.plane.u, s.plane.v)
        contours = tuple(Contour2D(c.vertices * scale, validate=False) for c in s.contours)
        out.append(Section(plane, contours))
    prev = sections.normalization
    composed = NormalizationTransform(prev.center + center / prev.scale, prev.scale * scale)
    return CrossSectionSet(tuple(out), composed)


def _edge_arrays(contours: Sequence[Contour2D]) -> tuple[np.ndarray, np.ndarray]:
    if len(contours) == 0:
        raise GeometryError("empty contour list")
    a = np.concatenate([c.vertices for c in contours])
    b = np.concatenate([np.roll(c.vertices, -1, axis=0) for c in contours])
    return a, b


def _unsigned_and_parity(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    dist = np.empty(len(p))
    inside = np.empty(len(p), dtype=bool)
    ab = b - a
    ab_len2 = np.einsum("ij,ij->i", ab, ab)
    for s in range(0, len(p), _CHUNK):
        q = p[s : s + _CHUNK, None, :]
        ap = q - a[None]
        t = np.clip(np.einsum("nej,ej->ne", ap, ab) / ab_len2, 0.0, 1.0)
        d = ap - t[..., None] * ab[None]
        dist[s : s + _CHUNK] = np.sqrt(np.min(np.einsum("nej,nej->ne", d, d), axis=1))
        qy, qx = q[..., 1], q[..., 0]
        straddle = (a[None, :, 1] > qy) != (b[None, :, 1] > qy)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_cross = a[None, :, 0] + (qy - a[None, :, 1]) * ab[None, :, 0] / ab[None, :, 1]
        crossings = np.count_nonzero(straddle & (qx < x_cross), axis=1)
        inside[s : s + _CHUNK] = (crossings % 2) == 1
    return dist, inside


def point_in_contours(p, contours: Sequence[Contour2D]):
    """Even-odd interior test; points on an edge count as interior."""
    q = np.asarray(p, dtype=np.float64)
    single = q.ndim == 1
    a, b = _edge_arrays(contours)
    dist, inside = _unsigned_and_parity(q.reshape(-1, 2), a, b)
    res = inside | (dist <= ON_EDGE_TOL)
    return bool(res[0]) if single else res


def sdf2d_eval(p, contours: Sequence[Contour2D]):
    """Signed distance to the contour set, negative inside."""
    q = np.asarray(p, dtype=np.float64)
    single = q.ndim == 1
    a, b = _edge_arrays(contours)
    dist, inside = _unsigned_and_parity(q.reshape(-1, 2), a, b)
    inside |= dist <= ON_EDGE_TOL
    res = np.where(inside, -dist, dist)
    return float(res[0]) if single else res


def contour_depths(contours: Sequence[Contour2D]) -> list[int]:
    """Number of other contours enclosing each contour (even = outer boundary)."""
    depths = []
    for i, c in enumerate(contours):
        probe = c.vertices[0]
        depths.append(
            sum(bool(point_in_contours(probe, [o])) for j, o in enumerate(contours) if j != i)
        )
    return depths


def _simplify_loop(pts: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Merge duplicate and collinear consecutive vertices of a closed loop."""
    changed = True
    while changed and len(pts) >= 3:
        changed = False
        nxt = np.roll(pts, -1, axis=0)
        scale = max(float(np.abs(pts).max()), 1.0)
        dup = np.linalg.norm(nxt - pts, axis=1) <= tol * scale
        if np.any(dup):
            pts = pts[~dup]
            changed = True
            continue
        prv = np.roll(pts, 1, axis=0)
        e1, e2 = pts - prv, nxt - pts
        cross = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        norm = np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1)
        col = (np.abs(cross) <= tol * norm) & (np.einsum("ij,ij->i", e1, e2) > 0)
        if np.any(col):
            # drop one at a time so neighbouring collinear runs stay consistent
            pts = np.delete(pts, int(np.argmax(col)), axis=0)
            changed = True
    return pts


def slice_mesh(mesh: TriMesh, plane: Plane) -> list[Contour2D]:
    """Intersect a watertight triangle mesh with a plane.

    Crossing points are keyed by the mesh edge they lie on, so neighbouring
    triangles share endpoints exactly and loops close without tolerances.
    Vertices lying exactly on the plane are treated as being on the positive
    side, which keeps every crossing on a proper sign change.
    """
    if mesh.is_empty:
        return []
    d = plane.distance(mesh.vertices)
    pos = d >= 0
    tris = mesh.triangles
    s = pos[tris]
    mixed = s.any(axis=1) & ~s.all(axis=1)
    if not mixed.any():
        return []
    adj: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for tri in tris[mixed]:
        keys = []
        for k in range(3):
            i, j = int(tri[k]), int(tri[(k + 1) % 3])
            if pos[i] != pos[j]:
                keys.append((min(i, j), max(i, j)))
        k0, k1 = keys
        adj.setdefault(k0, []).append(k1)
        adj.setdefault(k1, []).append(k0)

    bad = [k for k, nb in adj.items() if len(nb) != 2]
    if bad:

        def point(key):
            i, j = key
            t = d[i] / (d[i] - d[j])
            return tuple(np.round(plane.to_plane(mesh.vertices[i] + t * (mesh.vertices[j] - mesh.vertices[i])), 9))

        ends = ", ".join(str(point(k)) for k in bad[:10])
        raise GeometryError(f"mesh is not watertight; open chain endpoints: {ends}")

    def crossing(key):
        i, j = key
        t = d[i] / (d[i] - d[j])
        return mesh.vertices[i] + t * (mesh.vertices[j] - mesh.vertices[i])

    contours = []
    seen: set[tuple[int, int]] = set()
    for start in adj:
        if start in seen:
            continue
        loop = [start]
        seen.add(start)
        prev, cur = start, adj[start][0]
        while cur != start:
            loop.append(cur)
            seen.add(cur)
            a, b = adj[cur]
            prev, cur = cur, (b if a == prev else a)
        pts = plane.to_plane(np.array([crossing(k) for k in loop]))
        pts = _simplify_loop(pts)
        if len(pts) < 3 or abs(signed_area(pts)) <= 1e-18:
            continue
        contours.append(Contour2D(pts))
    return contours


def contours_from_mask(
    mask,
    resolution: int = 512,
    pixel_size: float = 1.0,
) -> list[Contour2D]:
    """Closed marching-squares isolines (level 0.5) of a binary mask.

    Vertex (a, b) = (column, row) * pixel_size, with pixel centers at integer
    coordinates. When the mask is not `resolution` pixels on its longest side
    it is bilinearly resampled first and coordinates are mapped back.
    """
    from scipy import ndimage
    from skimage import measure

    m = np.asarray(mask, dtype=np.float64)
    if m.ndim != 2:
        raise GeometryError("mask must be 2D")
    if resolution <= 0:
        raise GeometryError("resolution must be positive")
    if not m.any():
        return []
    factor = resolution / max(m.shape)
    if factor != 1.0:
        m = ndimage.zoom(m, factor, order=1, mode="nearest", grid_mode=True)
    padded = np.pad(m, 1)
    out = []
    for loop in measure.find_contours(padded, 0.5):
        if len(loop) < 4 or not np.allclose(loop[0], loop[-1]):
            continue
        rc = loop[:-1] - 1.0
        if factor != 1.0:
            rc = (rc + 0.5) / factor - 0.5
        ab = rc[:, ::-1] * pixel_size
        ab = ab[np.linalg.norm(np.roll(ab, -1, axis=0) - ab, axis=1) > 0]
        if len(ab) < 3 or abs(signed_area(ab)) == 0:
            continue
        out.append(Contour2D(ab))
    return out


def plane_window(plane: Plane, bound: float = 1.0) -> np.ndarray:
    """Polygon (plane coords, CCW) of the plane's intersection with [-bound, bound]^3."""
    corners = np.array([[x, y, z] for x in (-bound, bound) for y in (-bound, bound) for z in (-bound, bound)])
    edges = [(i, j) for i in range(8) for j in range(i + 1, 8) if np.count_nonzero(corners[i] != corners[j]) == 1]
    d = plane.distance(corners)
    pts = []
    for i, j in edges:
        if d[i] == 0:
            pts.append(corners[i])
        if (d[i] < 0 < d[j]) or (d[j] < 0 < d[i]):
            t = d[i] / (d[i] - d[j])
            pts.append(corners[i] + t * (corners[j] - corners[i]))
    if d[-1] == 0:
        pts.append(corners[-1])
    if len(pts) < 3:
        return np.zeros((0, 2))
    ab = np.unique(np.round(plane.to_plane(np.array(pts)), 12), axis=0)
    if len(ab) < 3:
        return np.zeros((0, 2))
    c = ab.mean(axis=0)
    order = np.argsort(np.arctan2(ab[:, 1] - c[1], ab[:, 0] - c[0]))
    return ab[order]


def points_in_convex(ab: np.ndarray, poly: np.ndarray) -> np.ndarray:
    e = np.roll(poly, -1, axis=0) - poly
    rel = ab[:, None, :] - poly[None]
    cross = e[None, :, 0] * rel[..., 1] - e[None, :, 1] * rel[..., 0]
    return np.all(cross >= -1e-12, axis=1)
