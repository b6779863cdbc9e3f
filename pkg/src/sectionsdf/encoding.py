"""Multiresolution hash-grid and random Fourier feature encodings.

The hash grid maps [-1, 1]^3 onto a lattice of N_l cells per axis at level l
(vertex coordinates 0..N_l). Levels whose (N_l + 1)^3 vertices fit in the
table are indexed densely (row-major, x fastest); coarser-than-table levels
use the usual XOR-of-primes spatial hash in 32-bit arithmetic.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numba as nb
import numpy as np

logger = logging.getLogger(__name__)

PRIMES = (1, 2654435761, 805459861)
_MASK32 = 0xFFFFFFFF


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 16
    n_min: int = 2**5
    n_max: int = 2**10
    features: int = 4
    table_size: int = 2**22

    def __post_init__(self):
        if self.levels < 1 or self.n_min < 1 or self.n_max < self.n_min:
            raise ValueError("invalid hash grid resolutions")
        if self.features < 1 or self.table_size < 1:
            raise ValueError("invalid hash grid table shape")

    @property
    def growth(self) -> float:
        if self.levels == 1:
            return 1.0
        return math.exp((math.log(self.n_max) - math.log(self.n_min)) / (self.levels - 1))

    @property
    def resolutions(self) -> np.ndarray:
        b = self.growth
        # guard against b**l landing a hair under an integer
        return np.array([math.floor(self.n_min * b**l + 1e-9) for l in range(self.levels)], dtype=np.int64)

    @property
    def dense(self) -> np.ndarray:
        return (self.resolutions + 1) ** 3 <= self.table_size

    @property
    def output_dim(self) -> int:
        return self.levels * self.features

    @property
    def finest_cell(self) -> float:
        return 2.0 / self.n_max


@nb.njit(cache=True, inline="always")
def _index(cx, cy, cz, res, dense, table_size):
    if dense:
        n1 = res + 1
        return cx + cy * n1 + cz * n1 * n1
    h = cx & _MASK32
    h ^= (cy * 2654435761) & _MASK32
    h ^= (cz * 805459861) & _MASK32
    if table_size & (table_size - 1) == 0:
        return h & (table_size - 1)
    return h % table_size


def hash_index(cell, level: int, config: HashGridConfig) -> int:
    """Table row of an integer lattice vertex at `level`."""
    cx, cy, cz = (int(c) for c in cell)
    if min(cx, cy, cz) < 0:
        raise ValueError("lattice coordinates must be non-negative")
    return int(_index(cx, cy, cz, int(config.resolutions[level]), bool(config.dense[level]), config.table_size))


@nb.njit(cache=True, inline="always")
def _cell(v, r):
    # v is clamped to [-1, 1]; the upper face belongs to the last cell
    u = (min(max(v, -1.0), 1.0) + 1.0) * 0.5 * r
    c = min(int(u), r - 1)
    return c, u - c


@nb.njit(cache=True)
def _hash_forward(x, tables, res, dense, idx, w, store):
    n = x.shape[0]
    n_levels, table_size, nf = tables.shape
    out = np.zeros((n, n_levels * nf), dtype=tables.dtype)
    for p in range(n):
        for l in range(n_levels):
            r = res[l]
            dl = dense[l]
            c0, f0 = _cell(x[p, 0], r)
            c1, f1 = _cell(x[p, 1], r)
            c2, f2 = _cell(x[p, 2], r)
            for corner in range(8):
                bx = corner & 1
                by = (corner >> 1) & 1
                bz = (corner >> 2) & 1
                wt = (f0 if bx else 1.0 - f0) * (f1 if by else 1.0 - f1) * (f2 if bz else 1.0 - f2)
                row = _index(c0 + bx, c1 + by, c2 + bz, r, dl, table_size)
                if store:
                    idx[p, l, corner] = row
                    w[p, l, corner] = wt
                for f in range(nf):
                    out[p, l * nf + f] += wt * tables[l, row, f]
    return out


@nb.njit(cache=True)
def _hash_weight_derivs(x, res, dtype_probe):
    n = x.shape[0]
    n_levels = res.shape[0]
    dw = np.zeros((n, n_levels, 8, 3), dtype=dtype_probe.dtype)
    for p in range(n):
        in0 = -1.0 <= x[p, 0] <= 1.0
        in1 = -1.0 <= x[p, 1] <= 1.0
        in2 = -1.0 <= x[p, 2] <= 1.0
        for l in range(n_levels):
            r = res[l]
            c0, f0 = _cell(x[p, 0], r)
            c1, f1 = _cell(x[p, 1], r)
            c2, f2 = _cell(x[p, 2], r)
            scale = 0.5 * r
            for corner in range(8):
                bx = corner & 1
                by = (corner >> 1) & 1
                bz = (corner >> 2) & 1
                wx = f0 if bx else 1.0 - f0
                wy = f1 if by else 1.0 - f1
                wz = f2 if bz else 1.0 - f2
                if in0:
                    dw[p, l, corner, 0] = (1.0 if bx else -1.0) * wy * wz * scale
                if in1:
                    dw[p, l, corner, 1] = (1.0 if by else -1.0) * wx * wz * scale
                if in2:
                    dw[p, l, corner, 2] = (1.0 if bz else -1.0) * wx * wy * scale
    return dw


@nb.njit(cache=True)
def _hash_tangents(tables, idx, dw):
    n, n_levels, _ = idx.shape
    nf = tables.shape[2]
    jac = np.zeros((3, n, n_levels * nf), dtype=tables.dtype)
    for p in range(n):
        for l in range(n_levels):
            for corner in range(8):
                row = idx[p, l, corner]
                for k in range(3):
                    d = dw[p, l, corner, k]
                    if d != 0.0:
                        for f in range(nf):
                            jac[k, p, l * nf + f] += d * tables[l, row, f]
    return jac


@nb.njit(cache=True)
def _hash_scatter(grad_tables, idx, w, grad_out):
    n, n_levels, _ = idx.shape
    nf = grad_tables.shape[2]
    for p in range(n):
        for l in range(n_levels):
            for corner in range(8):
                row = idx[p, l, corner]
                wt = w[p, l, corner]
                for f in range(nf):
                    grad_tables[l, row, f] += wt * grad_out[p, l * nf + f]


@nb.njit(cache=True)
def _hash_scatter_tangent(grad_tables, idx, dw, grad_jac):
    n, n_levels, _ = idx.shape
    nf = grad_tables.shape[2]
    for p in range(n):
        for l in range(n_levels):
            for corner in range(8):
                row = idx[p, l, corner]
                for k in range(3):
                    d = dw[p, l, corner, k]
                    if d != 0.0:
                        for f in range(nf):
                            grad_tables[l, row, f] += d * grad_jac[k, p, l * nf + f]


@dataclass
class HashCache:
    idx: np.ndarray
    w: np.ndarray
    dw: np.ndarray | None


def init_hash_tables(config: HashGridConfig, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    t = rng.uniform(-1e-4, 1e-4, size=(config.levels, config.table_size, config.features))
    return t.astype(dtype)


def hash_forward(x, tables, config: HashGridConfig, jacobian: bool = False, store: bool = True):
    """Encode points; returns (features, cache). Out-of-domain points are clamped."""
    x = np.ascontiguousarray(np.asarray(x, dtype=np.float64).reshape(-1, 3))
    n = len(x)
    shape = (n, config.levels, 8) if store or jacobian else (1, 1, 8)
    idx = np.empty(shape, dtype=np.int32)
    w = np.empty(shape, dtype=tables.dtype)
    out = _hash_forward(x, tables, config.resolutions, config.dense, idx, w, store or jacobian)
    clamped = int(np.count_nonzero(np.any(np.abs(x) > 1.0, axis=1)))
    if clamped:
        logger.debug("clamped %d points to the hash-grid domain", clamped)
    dw = _hash_weight_derivs(x, config.resolutions, tables[:0, :0, :0]) if jacobian else None
    return out, HashCache(idx, w, dw)


def encode_hash(x, tables, config: HashGridConfig) -> np.ndarray:
    single = np.ndim(x) == 1
    out, _ = hash_forward(x, tables, config, store=False)
    return out[0] if single else out


def hash_jacobian(tables, cache: HashCache) -> np.ndarray:
    """(3, N, L*F): derivative of each feature along each input axis."""
    return _hash_tangents(tables, cache.idx, cache.dw)


def hash_backward(grad_tables, cache: HashCache, grad_out, grad_jac=None) -> None:
    """Accumulate table gradients in place (fixed point order, deterministic)."""
    _hash_scatter(grad_tables, cache.idx, cache.w, np.ascontiguousarray(grad_out, dtype=grad_tables.dtype))
    if grad_jac is not None:
        _hash_scatter_tangent(grad_tables, cache.idx, cache.dw, np.ascontiguousarray(grad_jac, dtype=grad_tables.dtype))


def init_rff(dim: int, variance: float, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    if dim % 2:
        raise ValueError("RFF dimension must be even")
    return (rng.standard_normal((dim // 2, 3)) * math.sqrt(variance)).astype(dtype)


def encode_rff(x, B: np.ndarray) -> np.ndarray:
    """[cos z_1, sin z_1, ..., cos z_m, sin z_m] with z = B x."""
    xa = np.asarray(x, dtype=B.dtype)
    z = xa @ B.T
    out = np.empty(z.shape[:-1] + (2 * z.shape[-1],), dtype=z.dtype)
    out[..., 0::2] = np.cos(z)
    out[..., 1::2] = np.sin(z)
    return out


def rff_jacobian(x, B: np.ndarray) -> np.ndarray:
    """(3, N, d) derivative of the RFF features along each input axis."""
    xa = np.asarray(x, dtype=B.dtype).reshape(-1, 3)
    z = xa @ B.T
    s, c = np.sin(z), np.cos(z)
    jac = np.empty((3, len(xa), 2 * B.shape[0]), dtype=B.dtype)
    for k in range(3):
        jac[k, :, 0::2] = -s * B[:, k]
        jac[k, :, 1::2] = c * B[:, k]
    return jac


def encode_jacobians(x, tables, B, config: HashGridConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-point Jacobians (N, L*F, 3) and (N, d, 3) of both encoders.

    At a cell face the cell on the positive side is used, so the hash-grid
    derivative there is the one-sided (right) derivative.
    """
    xa = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    _, cache = hash_forward(xa, tables, config, jacobian=True)
    jh = hash_jacobian(tables, cache)
    jr = rff_jacobian(xa, B)
    return np.transpose(jh, (1, 2, 0)), np.transpose(jr, (1, 2, 0))
