"""Zero-level-set extraction with marching cubes."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .geometry import NormalizationTransform, TriMesh

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExtractionConfig:
    resolution: int = 256
    bound: float = 1.0
    iso: float = 0.0

    def __post_init__(self):
        if self.resolution < 8:
            raise ValueError("resolution must be at least 8")

    @property
    def cell_size(self) -> float:
        return 2.0 * self.bound / self.resolution


def sample_grid(evaluator: Callable[[np.ndarray], np.ndarray], config: ExtractionConfig) -> np.ndarray:
    """Field values on the (res+1)^3 vertex lattice, indexed [i, j, k] = (x, y, z)."""
    n = config.resolution + 1
    g = np.linspace(-config.bound, config.bound, n)
    out = np.empty((n, n, n), dtype=np.float64)
    # one x-slab at a time keeps peak memory at a few slabs
    yz = np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1).reshape(-1, 2)
    for i, xv in enumerate(g):
        pts = np.column_stack([np.full(len(yz), xv), yz])
        out[i] = np.asarray(evaluator(pts), dtype=np.float64).reshape(n, n)
    return out


def _refine_vertices(g: np.ndarray, vol: np.ndarray, iso: float) -> np.ndarray:
    """Redo the edge interpolation in float64.

    skimage works in float32, which leaves vertices ~1e-7 off the exact
    crossing. Each vertex lies on a lattice edge; we try the edges around its
    grid coordinate `g` along every axis and keep the float64 crossing
    closest to the float32 one.
    """
    n = np.array(vol.shape) - 1
    R = np.clip(np.rint(g), 0, n).astype(np.int64)
    best = g.copy()
    best_d = np.full(len(g), np.inf)
    for a in range(3):
        for off in (-1, 0):
            i0 = R.copy()
            i0[:, a] = np.clip(np.floor(g[:, a]).astype(np.int64) + off, 0, n[a] - 1)
            i1 = i0.copy()
            i1[:, a] += 1
            v0 = vol[i0[:, 0], i0[:, 1], i0[:, 2]] - iso
            v1 = vol[i1[:, 0], i1[:, 1], i1[:, 2]] - iso
            ok = (v0 * v1 <= 0) & (v0 != v1)
            t = np.divide(v0, v0 - v1, out=np.zeros_like(v0), where=ok)
            cand = i0.astype(np.float64)
            cand[:, a] += t
            d = np.max(np.abs(cand - g), axis=1)
            better = ok & (d < best_d)
            best[better] = cand[better]
            best_d[better] = d[better]
    return best


def marching_cubes(
    evaluator: Callable[[np.ndarray], np.ndarray],
    config: ExtractionConfig = ExtractionConfig(),
    transform: NormalizationTransform | None = None,
    values: np.ndarray | None = None,
) -> TriMesh:
    """Triangulate {f = iso} over [-bound, bound]^3.

    Faces are oriented with normals pointing toward increasing f (outward for
    an SDF that is negative inside). Output vertices are welded, degenerate
    triangles dropped, and mapped back through `transform` when given.
    """
    from skimage import measure

    vol = sample_grid(evaluator, config) if values is None else values
    if not (vol.min() < config.iso < vol.max()):
        # also covers a field that only touches iso without crossing
        logger.warning("field does not cross the iso value; empty mesh")
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    h = config.cell_size
    verts, faces, _, _ = measure.marching_cubes(
        vol, level=config.iso, spacing=(h, h, h), gradient_direction="descent", allow_degenerate=False
    )
    verts = _refine_vertices(verts.astype(np.float64) / h, vol, config.iso) * h - config.bound
    mesh = TriMesh(verts, faces.astype(np.int64)).cleaned()
    if transform is not None:
        mesh = TriMesh(transform.inverse(mesh.vertices), mesh.triangles)
    return mesh
