"""Reconstruction metrics: Chamfer, Hausdorff, connected components, 2D and volume IoU.

Distances are unsquared Euclidean. Chamfer is the mean of the two one-sided
mean nearest-neighbour distances; Hausdorff is the larger one-sided maximum.
Both are computed on area-uniform surface samples, so they carry sampling
noise of roughly the mean sample spacing.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Contour2D, Plane, TriMesh, plane_window, point_in_contours

CONVENTION = "CD = 0.5*(mean_a min_b |a-b| + mean_b min_a |a-b|), HD = max of one-sided maxima; unsquared; x100"


class MetricsError(ValueError):
    pass


@dataclass
class MetricsReport:
    cd_x100: float
    hd_x100: float
    cc: int
    sample_count: int
    seed: int
    iou2d: float | None = None
    iou_vol: float | None = None

    def to_json(self) -> str:
        doc = {"convention": CONVENTION, **asdict(self)}
        return json.dumps(doc, indent=1, sort_keys=False)

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = list(asdict(self))
        w = csv.writer(buf)
        w.writerow(cols)
        w.writerow(["" if getattr(self, c) is None else repr(getattr(self, c)) for c in cols])
        return buf.getvalue()


def sample_surface(mesh: TriMesh, n: int, seed: int = 0) -> np.ndarray:
    """`n` points distributed uniformly by area over the mesh surface."""
    if mesh.is_empty:
        raise MetricsError("empty mesh")
    rng = np.random.default_rng([seed, 0x5AF])
    areas = mesh.triangle_areas()
    total = areas.sum()
    if total <= 0:
        raise MetricsError("mesh has zero surface area")
    tri = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a, b, c = (mesh.vertices[mesh.triangles[tri, k]] for k in range(3))
    return (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c


def nn_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    _, idx = cKDTree(dst).query(src, k=1)
    # recompute with the same arithmetic as the brute-force path
    d = src - dst[idx]
    return np.sqrt(np.sum(d * d, axis=1))


def brute_force_nn(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """O(n*m) nearest-neighbour distances; the reference for the tree path."""
    out = np.empty(len(src))
    for s in range(0, len(src), 512):
        d = src[s : s + 512, None, :] - dst[None]
        out[s : s + 512] = np.sqrt(np.min(np.sum(d * d, axis=2), axis=1))
    return out


def chamfer_points(a: np.ndarray, b: np.ndarray, nn=nn_distances) -> float:
    return 0.5 * (float(np.mean(nn(a, b))) + float(np.mean(nn(b, a))))


def hausdorff_points(a: np.ndarray, b: np.ndarray, nn=nn_distances) -> float:
    return max(float(np.max(nn(a, b))), float(np.max(nn(b, a))))


def paired_samples(A: TriMesh, B: TriMesh, n_samples: int, seed: int):
    # each mesh gets its own stream so the result is symmetric in (A, B)
    return sample_surface(A, n_samples, seed), sample_surface(B, n_samples, seed)


def chamfer(A: TriMesh, B: TriMesh, n_samples: int = 100_000, seed: int = 0) -> float:
    a, b = paired_samples(A, B, n_samples, seed)
    return chamfer_points(a, b)


def hausdorff(A: TriMesh, B: TriMesh, n_samples: int = 100_000, seed: int = 0) -> float:
    a, b = paired_samples(A, B, n_samples, seed)
    return hausdorff_points(a, b)


def component_labels(mesh: TriMesh) -> np.ndarray:
    """Per-vertex component label of a (welded) mesh; isolated vertices get their own."""
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components as cc

    t = mesh.triangles
    rows = np.concatenate([t[:, 0], t[:, 1], t[:, 2]])
    cols = np.concatenate([t[:, 1], t[:, 2], t[:, 0]])
    g = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(mesh.vertices),) * 2)
    _, labels = cc(g, directed=False)
    return labels


def connected_components(mesh: TriMesh) -> int:
    """Triangle patches connected through shared (welded) vertices."""
    if mesh.is_empty:
        return 0
    m = mesh.cleaned()
    return int(len(np.unique(component_labels(m))))


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def raster_window(plane: Plane, contours: Sequence[Contour2D] = (), bound: float = 1.0):
    win = plane_window(plane, bound)
    if len(win):
        return win.min(axis=0), win.max(axis=0)
    pts = np.concatenate([c.vertices for c in contours])
    return pts.min(axis=0), pts.max(axis=0)


def iou_2d(
    evaluator: Callable[[np.ndarray], np.ndarray],
    plane: Plane,
    truth,
    resolution: int = 512,
    window=None,
) -> float:
    """IoU between predicted (f < 0) and true interior on one slice.

    `truth` is either a list of contours or a boolean mask already rasterised
    on the same `resolution`^2 pixel-center grid over `window` (lo, hi).
    """
    contours = truth if not isinstance(truth, np.ndarray) else ()
    lo, hi = window if window is not None else raster_window(plane, contours)
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    t = (np.arange(resolution) + 0.5) / resolution
    ga = lo[0] + t * (hi[0] - lo[0])
    gb = lo[1] + t * (hi[1] - lo[1])
    ab = np.stack(np.meshgrid(ga, gb, indexing="xy"), axis=-1).reshape(-1, 2)
    pred = np.asarray(evaluator(plane.to_world(ab))) < 0
    if isinstance(truth, np.ndarray):
        gt = truth.reshape(-1).astype(bool)
        if gt.size != pred.size:
            raise MetricsError("mask does not match the raster resolution")
    elif len(truth):
        gt = point_in_contours(ab, list(truth))
    else:
        gt = np.zeros(len(ab), dtype=bool)
    return _iou(pred, gt)


def _ray_parity_occupancy(mesh: TriMesh, lo, hi, res: int) -> np.ndarray:
    """Voxel-center occupancy by counting +z ray crossings per (x, y) column."""
    h = (hi - lo) / res
    # irrational sub-voxel jitter keeps rays off mesh edges and vertices
    jitter = np.array([np.sqrt(2) - 1.0, np.sqrt(3) - 1.5]) * 1e-4
    cx = lo[0] + (np.arange(res) + 0.5 + jitter[0]) * h[0]
    cy = lo[1] + (np.arange(res) + 0.5 + jitter[1]) * h[1]
    cz = lo[2] + (np.arange(res) + 0.5) * h[2]
    hits: dict[tuple[int, int], list[float]] = {}
    col_ids, zs = [], []
    V, T = mesh.vertices, mesh.triangles
    a, b, c = V[T[:, 0]], V[T[:, 1]], V[T[:, 2]]
    for tri in range(len(T)):
        p0, p1, p2 = a[tri], b[tri], c[tri]
        xmin, xmax = min(p0[0], p1[0], p2[0]), max(p0[0], p1[0], p2[0])
        ymin, ymax = min(p0[1], p1[1], p2[1]), max(p0[1], p1[1], p2[1])
        i0, i1 = np.searchsorted(cx, xmin), np.searchsorted(cx, xmax, side="right")
        j0, j1 = np.searchsorted(cy, ymin), np.searchsorted(cy, ymax, side="right")
        if i0 >= i1 or j0 >= j1:
            continue
        det = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1])
        if det == 0:
            continue
        X, Y = np.meshgrid(cx[i0:i1], cy[j0:j1], indexing="ij")
        l1 = ((X - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (Y - p0[1])) / det
        l2 = ((p1[0] - p0[0]) * (Y - p0[1]) - (X - p0[0]) * (p1[1] - p0[1])) / det
        inside = (l1 >= 0) & (l2 >= 0) & (l1 + l2 <= 1)
        if not inside.any():
            continue
        ii, jj = np.nonzero(inside)
        z = p0[2] + l1[ii, jj] * (p1[2] - p0[2]) + l2[ii, jj] * (p2[2] - p0[2])
        col_ids.append((ii + i0) * res + (jj + j0))
        zs.append(z)
    occ = np.zeros((res, res, res), dtype=bool)
    if not col_ids:
        return occ
    col = np.concatenate(col_ids)
    z = np.concatenate(zs)
    order = np.lexsort((z, col))
    col, z = col[order], z[order]
    bounds = np.flatnonzero(np.diff(col)) + 1
    for seg_col, seg_z in zip(np.split(col, bounds), np.split(z, bounds)):
        if len(seg_z) % 2:
            i, j = divmod(int(seg_col[0]), res)
            raise MetricsError(f"ray parity failure (mesh not watertight) at voxel column ({i}, {j})")
        i, j = divmod(int(seg_col[0]), res)
        for z_in, z_out in zip(seg_z[0::2], seg_z[1::2]):
            occ[i, j] |= (cz > z_in) & (cz < z_out)
    return occ


def _field_occupancy(evaluator, lo, hi, res: int) -> np.ndarray:
    h = (hi - lo) / res
    axes = [lo[k] + (np.arange(res) + 0.5) * h[k] for k in range(3)]
    occ = np.empty((res, res, res), dtype=bool)
    yz = np.stack(np.meshgrid(axes[1], axes[2], indexing="ij"), axis=-1).reshape(-1, 2)
    for i, xv in enumerate(axes[0]):
        pts = np.column_stack([np.full(len(yz), xv), yz])
        occ[i] = (np.asarray(evaluator(pts)) < 0).reshape(res, res)
    return occ


def iou_volume(A, B, resolution: int = 256, bounds=None) -> float:
    """Voxel IoU; each argument is a TriMesh (ray parity) or an SDF callable."""
    meshes = [m for m in (A, B) if isinstance(m, TriMesh)]
    if bounds is None:
        if not meshes:
            raise MetricsError("bounds are required when both inputs are fields")
        pts = np.concatenate([m.vertices for m in meshes if not m.is_empty] or [np.zeros((1, 3))])
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        pad = 0.05 * float(np.max(hi - lo)) + 1e-9
        lo, hi = lo - pad, hi + pad
    else:
        lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)

    def occ(x):
        if isinstance(x, TriMesh):
            return _ray_parity_occupancy(x, lo, hi, resolution)
        return _field_occupancy(x, lo, hi, resolution)

    return _iou(occ(A), occ(B))


def heldout_split(n_slices: int) -> tuple[list[int], list[int]]:
    """Withhold indices i with i % (n // 10) == 0 (n = 61 -> every 6th)."""
    if n_slices < 10:
        raise MetricsError("held-out split needs at least 10 slices")
    k = n_slices // 10
    held = [i for i in range(n_slices) if i % k == 0]
    train = [i for i in range(n_slices) if i % k != 0]
    return train, held


def evaluate_meshes(
    pred: TriMesh,
    gt: TriMesh,
    n_samples: int = 100_000,
    seed: int = 0,
    iou2d: float | None = None,
    iou_vol: float | None = None,
) -> MetricsReport:
    if pred.is_empty or gt.is_empty:
        raise MetricsError("empty mesh")
    a, b = paired_samples(pred, gt, n_samples, seed)
    return MetricsReport(
        cd_x100=100.0 * chamfer_points(a, b),
        hd_x100=100.0 * hausdorff_points(a, b),
        cc=connected_components(pred),
        sample_count=n_samples,
        seed=seed,
        iou2d=iou2d,
        iou_vol=iou_vol,
    )


def contours_raster(contours, lo, hi, resolution):
    """Boolean interior mask on the iou_2d pixel grid (row = b, col = a)."""
    t = (np.arange(resolution) + 0.5) / resolution
    ga = lo[0] + t * (hi[0] - lo[0])
    gb = lo[1] + t * (hi[1] - lo[1])
    ab = np.stack(np.meshgrid(ga, gb, indexing="xy"), axis=-1).reshape(-1, 2)
    if not contours:
        return np.zeros((resolution, resolution), dtype=bool)
    return point_in_contours(ab, list(contours)).reshape(resolution, resolution)
