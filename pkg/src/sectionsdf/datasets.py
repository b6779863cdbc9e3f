"""Synthetic fixtures and slicing-plane layouts.

Analytic shapes come with exact SDFs so tests can compare against ground
truth: a sphere, a two-lobed "figure eight" (union of two spheres), and a
bundle of thin parallel tubes. Plane layouts follow the aligned (all
parallel) and non-aligned (half parallel, half rotated about an axis)
protocols.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Contour2D, CrossSectionSet, GeometryError, Plane, Section, TriMesh, slice_mesh

AXES = {"x": 0, "y": 1, "z": 2}

# in-plane frames for planes perpendicular to each axis (right-handed: u x v = axis)
_FRAMES = {
    0: (np.array([0.0, 1.0, 0.0]), np.array([0.0, 0.0, 1.0])),
    1: (np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0])),
    2: (np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])),
}


def axis_index(axis) -> int:
    if isinstance(axis, str):
        if axis.lower() not in AXES:
            raise ValueError(f"unknown axis: {axis}")
        return AXES[axis.lower()]
    if axis not in (0, 1, 2):
        raise ValueError(f"unknown axis: {axis}")
    return int(axis)


# ---------------------------------------------------------------- meshes


def box_mesh(lo=(-1.0, -1.0, -1.0), hi=(1.0, 1.0, 1.0)) -> TriMesh:
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    v = np.array([[hi[0] if i & 1 else lo[0], hi[1] if i & 2 else lo[1], hi[2] if i & 4 else lo[2]] for i in range(8)])
    # outward-oriented faces, two triangles each
    quads = [(0, 2, 3, 1), (4, 5, 7, 6), (0, 1, 5, 4), (2, 6, 7, 3), (0, 4, 6, 2), (1, 3, 7, 5)]
    tris = []
    for a, b, c, d in quads:
        tris += [(a, b, c), (a, c, d)]
    return TriMesh(v, np.array(tris))


def icosphere(radius: float = 0.5, subdivisions: int = 4, center=(0.0, 0.0, 0.0)) -> TriMesh:
    t = (1.0 + math.sqrt(5.0)) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]  # fmt: skip
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]  # fmt: skip
    v = [np.array(p, float) / np.linalg.norm(p) for p in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = v[i] + v[j]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return TriMesh(np.array(v) * radius + np.asarray(center, float), np.array(faces))


def mesh_from_sdf(sdf, lo, hi, resolution: int = 128) -> TriMesh:
    """Marching-cubes mesh of an analytic SDF over an axis-aligned box."""
    from skimage import measure

    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    axes = [np.linspace(lo[k], hi[k], resolution + 1) for k in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    vol = np.asarray(sdf(grid.reshape(-1, 3))).reshape(grid.shape[:3])
    spacing = tuple((hi - lo) / resolution)
    verts, faces, _, _ = measure.marching_cubes(vol, 0.0, spacing=spacing, gradient_direction="descent")
    return TriMesh(verts + lo, faces).cleaned()


# ---------------------------------------------------------------- analytic shapes


def sphere_sdf(radius: float = 0.5, center=(0.0, 0.0, 0.0)):
    c = np.asarray(center, float)
    return lambda p: np.linalg.norm(np.asarray(p, float) - c, axis=-1) - radius


@dataclass(frozen=True)
class FigureEight:
    """Union of two equal spheres centered on the x axis."""

    offset: float = 0.3
    radius: float = 0.4

    @property
    def centers(self) -> np.ndarray:
        return np.array([[-self.offset, 0.0, 0.0], [self.offset, 0.0, 0.0]])

    def sdf(self, p) -> np.ndarray:
        p = np.asarray(p, float)
        d = np.linalg.norm(p[..., None, :] - self.centers, axis=-1)
        return d.min(axis=-1) - self.radius

    def normal(self, p) -> np.ndarray:
        p = np.asarray(p, float)
        d = np.linalg.norm(p[..., None, :] - self.centers, axis=-1)
        c = self.centers[np.argmin(d, axis=-1)]
        n = p - c
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    @property
    def bounds(self):
        e = self.offset + self.radius
        return np.array([-e, -self.radius, -self.radius]), np.array([e, self.radius, self.radius])

    def mesh(self, resolution: int = 128) -> TriMesh:
        lo, hi = self.bounds
        return mesh_from_sdf(self.sdf, lo - 0.05, hi + 0.05, resolution)


@dataclass(frozen=True)
class TubeBundle:
    """Parallel z-aligned cylinders laid out on a `cols` x `rows` grid.

    The default layout spans [-0.9, 0.9] along x and z, so a scene sliced
    across the tubes is already normalized and the radius is in normalized
    units.
    """

    radius: float = 0.02
    cols: int = 5
    rows: int = 4
    half_x: float = 0.9
    half_y: float = 0.5
    half_z: float = 0.9

    @property
    def count(self) -> int:
        return self.cols * self.rows

    @property
    def centers(self) -> np.ndarray:
        xs = np.linspace(-self.half_x + self.radius, self.half_x - self.radius, self.cols)
        ys = np.linspace(-self.half_y + self.radius, self.half_y - self.radius, self.rows)
        return np.array([(x, y) for y in ys for x in xs])

    def sdf(self, p) -> np.ndarray:
        p = np.asarray(p, float)
        d = np.linalg.norm(p[..., None, :2] - self.centers, axis=-1).min(axis=-1) - self.radius
        # capped at |z| = half_z
        dz = np.abs(p[..., 2]) - self.half_z
        outside = np.sqrt(np.maximum(d, 0) ** 2 + np.maximum(dz, 0) ** 2)
        return outside + np.minimum(np.maximum(d, dz), 0.0)

    def sections(self, n_slices: int = 10, segments: int = 24) -> CrossSectionSet:
        zs = np.linspace(-self.half_z, self.half_z, n_slices)
        circles = [circle_contour(self.radius, segments, c) for c in self.centers]
        return CrossSectionSet(tuple(Section(_axis_plane(2, z), circles) for z in zs))

    def recovered(self, mesh: TriMesh, min_span: float = 0.5, window: float | None = None) -> int:
        """Number of tubes matched by at least one connected component.

        A component matches tube i when all its vertices lie within `window`
        (default: half the smallest tube spacing) of the tube axis and its z
        extent covers at least `min_span` of the tube length.
        """
        from .metrics import component_labels

        if mesh.is_empty:
            return 0
        c = self.centers
        if window is None:
            gaps = np.linalg.norm(c[:, None] - c[None], axis=-1)
            window = 0.5 * float(gaps[gaps > 0].min())
        m = mesh.cleaned()
        labels = component_labels(m)
        found = set()
        for lab in np.unique(labels):
            v = m.vertices[labels == lab]
            d = np.linalg.norm(v[:, None, :2] - c[None], axis=-1)
            owner = np.argmin(d, axis=1)
            if np.any(owner != owner[0]) or d[np.arange(len(v)), owner].max() > window:
                continue
            if np.ptp(v[:, 2]) >= min_span * 2 * self.half_z:
                found.add(int(owner[0]))
        return len(found)


# ---------------------------------------------------------------- planes and sections


def circle_contour(radius: float, segments: int = 256, center=(0.0, 0.0)) -> Contour2D:
    t = 2 * np.pi * np.arange(segments) / segments
    return Contour2D(np.column_stack([center[0] + radius * np.cos(t), center[1] + radius * np.sin(t)]))


def _axis_plane(axis: int, position: float, center=(0.0, 0.0, 0.0)) -> Plane:
    origin = np.asarray(center, float).copy()
    origin[axis] = position
    u, v = _FRAMES[axis]
    return Plane(origin, u, v)


def slice_positions(lo: float, hi: float, n: int, inset: float = 0.02) -> np.ndarray:
    """`n` evenly spaced positions over [lo, hi] shrunk by `inset` of the extent at each end."""
    if n < 1:
        raise ValueError("need at least one plane")
    pad = inset * (hi - lo)
    if n == 1:
        return np.array([0.5 * (lo + hi)])
    return np.linspace(lo + pad, hi - pad, n)


def aligned_planes(lo, hi, n: int, axis="z", inset: float = 0.02) -> list[Plane]:
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    k = axis_index(axis)
    center = 0.5 * (lo + hi)
    return [_axis_plane(k, s, center) for s in slice_positions(lo[k], hi[k], n, inset)]


def rotated_planes(center, n: int, axis="z") -> list[Plane]:
    """`n` planes containing the axis through `center`, at angles k*pi/n."""
    k = axis_index(axis)
    a = np.zeros(3)
    a[k] = 1.0
    u0, v0 = _FRAMES[k]
    planes = []
    for i in range(n):
        th = np.pi * i / n
        u = np.cos(th) * u0 + np.sin(th) * v0
        planes.append(Plane(center, u, a))
    return planes


def nonaligned_planes(lo, hi, n: int, axis="z", inset: float = 0.02) -> list[Plane]:
    """ceil(n/2) parallel planes across `axis` plus floor(n/2) rotated about it."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    return aligned_planes(lo, hi, (n + 1) // 2, axis, inset) + rotated_planes(0.5 * (lo + hi), n // 2, axis)


def slice_scene(mesh: TriMesh, planes: Sequence[Plane]) -> CrossSectionSet:
    """Cross sections of a watertight mesh; raises GeometryError for open meshes."""
    if mesh.is_empty:
        raise GeometryError("empty mesh")
    return CrossSectionSet(tuple(Section(p, slice_mesh(mesh, p)) for p in planes))


def sphere_sections(
    n: int, radius: float = 0.5, axis="z", inset: float = 0.02, segments: int = 256, positions=None
) -> CrossSectionSet:
    """Exact circular cross sections of a centered sphere."""
    k = axis_index(axis)
    zs = slice_positions(-radius, radius, n, inset) if positions is None else np.asarray(positions, float)
    out = []
    for z in zs:
        rr = radius * radius - z * z
        contours = (circle_contour(math.sqrt(rr), segments),) if rr > 0 else ()
        out.append(Section(_axis_plane(k, float(z)), contours))
    return CrossSectionSet(tuple(out))


def midpoints(positions) -> np.ndarray:
    p = np.asarray(positions, float)
    return 0.5 * (p[1:] + p[:-1])
