from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sectionsdf.encoding import (
    HashGridConfig,
    encode_hash,
    encode_jacobians,
    encode_rff,
    hash_backward,
    hash_forward,
    hash_index,
    init_hash_tables,
    init_rff,
)

TINY = HashGridConfig(levels=2, n_min=3, n_max=8, features=3, table_size=2**7)


def _tables(cfg, seed=0):
    return np.random.default_rng(seed).normal(size=(cfg.levels, cfg.table_size, cfg.features))


def oracle_encode(x, tables, cfg):
    """Materialize every lattice vertex, then interpolate trilinearly in python."""
    out = []
    for level, n in enumerate(cfg.resolutions.tolist()):
        lattice = np.empty((n + 1, n + 1, n + 1, cfg.features))
        for i in range(n + 1):
            for j in range(n + 1):
                for k in range(n + 1):
                    lattice[i, j, k] = tables[level, hash_index((i, j, k), level, cfg)]
        u = [(min(max(c, -1.0), 1.0) + 1) / 2 * n for c in x]
        cell = [min(int(math.floor(c)), n - 1) for c in u]
        fr = [c - f for c, f in zip(u, cell)]
        acc = np.zeros(cfg.features)
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    w = (fr[0] if dx else 1 - fr[0]) * (fr[1] if dy else 1 - fr[1]) * (fr[2] if dz else 1 - fr[2])
                    acc += w * lattice[cell[0] + dx, cell[1] + dy, cell[2] + dz]
        out.append(acc)
    return np.concatenate(out)


def test_default_config_constants():
    cfg = HashGridConfig()
    assert cfg.growth == pytest.approx(2 ** (1 / 3), rel=1e-12)
    res = cfg.resolutions
    assert res[0] == 32 and res[-1] == 1024
    assert np.all(np.diff(res) >= 0)
    assert cfg.output_dim == 64
    assert cfg.dense[0] and not cfg.dense[-1]


def test_hash_index_examples():
    cfg = HashGridConfig()
    for level in range(cfg.levels):
        assert hash_index((0, 0, 0), level, cfg) == 0
    rng = np.random.default_rng(0)
    for cell in rng.integers(0, 1025, size=(200, 3)):
        for level in (0, 8, 15):
            assert 0 <= hash_index(cell, level, cfg) < cfg.table_size


def test_dense_level_bijection():
    cfg = HashGridConfig()
    n1 = 33
    seen = set()
    for z in range(n1):
        for y in range(n1):
            for x in range(n1):
                idx = hash_index((x, y, z), 0, cfg)
                assert idx == z * n1 * n1 + y * n1 + x
                seen.add(idx)
    assert len(seen) == n1**3


def test_hashed_level_formula():
    cfg = HashGridConfig()
    cell = (7, 1000, 513)
    h = (7 * 1) ^ ((1000 * 2654435761) & 0xFFFFFFFF) ^ ((513 * 805459861) & 0xFFFFFFFF)
    assert hash_index(cell, 15, cfg) == h % cfg.table_size


def test_negative_cell_rejected():
    with pytest.raises(ValueError):
        hash_index((-1, 0, 0), 0, HashGridConfig())


def test_init_tables_range():
    cfg = HashGridConfig(levels=2, table_size=2**10)
    t = init_hash_tables(cfg, np.random.default_rng(0))
    assert t.shape == (2, 2**10, 4)
    assert np.abs(t).max() <= 1e-4


def test_vertex_exact():
    t = _tables(TINY)
    n = int(TINY.resolutions[0])
    v = (2, 1, 3)
    x = np.array([2 * c / n - 1 for c in v])
    out = encode_hash(x, t, TINY)
    np.testing.assert_array_equal(out[: TINY.features], t[0, hash_index(v, 0, TINY)])


def test_edge_midpoint():
    t = _tables(TINY)
    n = int(TINY.resolutions[0])
    a, b = (1, 1, 1), (2, 1, 1)
    x = np.array([(1.5 * 2 / n) - 1, 2 / n - 1, 2 / n - 1])
    out = encode_hash(x, t, TINY)[: TINY.features]
    expect = 0.5 * (t[0, hash_index(a, 0, TINY)] + t[0, hash_index(b, 0, TINY)])
    np.testing.assert_allclose(out, expect, atol=1e-14)


@given(st.lists(st.floats(-1.0, 1.0), min_size=3, max_size=3))
def test_encode_matches_dense_oracle(x):
    cfg = HashGridConfig(levels=2, n_min=4, n_max=8, features=2, table_size=2**8)
    t = _tables(cfg, 1)
    np.testing.assert_allclose(encode_hash(np.array(x), t, cfg), oracle_encode(x, t, cfg), atol=1e-12)


def test_hashed_levels_match_oracle():
    # table too small for dense indexing at either level, so both levels hash
    cfg = HashGridConfig(levels=2, n_min=3, n_max=6, features=2, table_size=16)
    assert not cfg.dense.any()
    t = _tables(cfg, 2)
    for x in np.random.default_rng(3).uniform(-1, 1, (25, 3)):
        np.testing.assert_allclose(encode_hash(x, t, cfg), oracle_encode(x, t, cfg), atol=1e-12)


def test_clamp_outside_domain():
    t = _tables(TINY)
    np.testing.assert_allclose(encode_hash(np.array([1.5, -3, 0.2]), t, TINY), encode_hash(np.array([1, -1, 0.2]), t, TINY))


def test_continuity_across_faces():
    cfg = HashGridConfig(levels=3, n_min=4, n_max=16, features=2, table_size=2**10)
    t = _tables(cfg, 4)
    rng = np.random.default_rng(5)
    x = rng.uniform(-0.99, 0.99, (10_000, 3))
    # snap one coordinate onto a face of a random level's lattice
    lvl = rng.integers(0, cfg.levels, len(x))
    n = cfg.resolutions[lvl]
    axis = rng.integers(0, 3, len(x))
    face = np.round((x[np.arange(len(x)), axis] + 1) / 2 * n) / n * 2 - 1
    x[np.arange(len(x)), axis] = face
    step = np.zeros_like(x)
    step[np.arange(len(x)), axis] = 1e-12
    lo = encode_hash(x - step, t, cfg)
    hi = encode_hash(x + step, t, cfg)
    assert np.abs(lo - hi).max() < 1e-9


def test_rff_examples():
    B = init_rff(64, 1.0, np.random.default_rng(0), dtype=np.float64)
    z = encode_rff(np.zeros(3), B)
    np.testing.assert_array_equal(z, np.tile([1.0, 0.0], 32))
    B1 = np.array([[1.0, 0.0, 0.0]])
    np.testing.assert_allclose(encode_rff(np.array([np.pi / 2, 0, 0]), B1), [0, 1], atol=1e-15)
    x = np.random.default_rng(1).normal(size=(100, 3)) * 5
    g = encode_rff(x, B)
    assert np.all(np.abs(g) <= 1)
    np.testing.assert_allclose(np.sum(g * g, axis=1), 32, rtol=1e-12)
    with pytest.raises(ValueError):
        init_rff(7, 1.0, np.random.default_rng(0))


def test_rff_periodic():
    B = init_rff(8, 1.0, np.random.default_rng(2), dtype=np.float64)
    x = np.random.default_rng(3).normal(size=3)
    for b in B:
        period = 2 * np.pi * b / np.dot(b, b)
        zi = encode_rff(x, b[None])
        np.testing.assert_allclose(encode_rff(x + period, b[None]), zi, atol=1e-10)


def test_rff_frequencies_gaussian():
    B = init_rff(2 * 20_000, 1.0, np.random.default_rng(0), dtype=np.float64)
    assert abs(B.mean()) < 0.02 and abs(B.var() - 1.0) < 0.02
    # seeded, so deterministic
    np.testing.assert_array_equal(B, init_rff(2 * 20_000, 1.0, np.random.default_rng(0), dtype=np.float64))


def test_rff_jacobian_at_zero():
    B = np.array([[1.0, 0.0, 0.0]])
    _, jr = encode_jacobians(np.zeros((1, 3)), _tables(TINY), B, TINY)
    np.testing.assert_allclose(jr[0], [[0, 0, 0], [1, 0, 0]], atol=1e-15)


def test_jacobians_match_finite_differences():
    cfg = HashGridConfig(levels=3, n_min=4, n_max=16, features=2, table_size=2**9)
    t = _tables(cfg, 6)
    B = init_rff(16, 1.0, np.random.default_rng(7), dtype=np.float64)
    rng = np.random.default_rng(8)
    x = rng.uniform(-0.9, 0.9, (200, 3))
    jh, jr = encode_jacobians(x, t, B, cfg)
    h = 1e-5
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        fd_h = (encode_hash(x + e, t, cfg) - encode_hash(x - e, t, cfg)) / (2 * h)
        fd_r = (encode_rff(x + e, B) - encode_rff(x - e, B)) / (2 * h)
        # skip points within h of a face at any level (derivative jumps there)
        u = (x[:, k : k + 1] + 1) / 2 * cfg.resolutions[None]
        safe = np.all(np.abs(u - np.round(u)) > h * cfg.resolutions.max(), axis=1)
        assert safe.mean() > 0.9
        err = np.linalg.norm(jh[safe, :, k] - fd_h[safe]) / np.linalg.norm(fd_h[safe])
        assert err < 1e-4
        assert np.linalg.norm(jr[:, :, k] - fd_r) / np.linalg.norm(fd_r) < 1e-4


def test_constant_tables_zero_jacobian():
    t = np.full((TINY.levels, TINY.table_size, TINY.features), 0.7)
    jh, _ = encode_jacobians(np.random.default_rng(0).uniform(-1, 1, (50, 3)), t, np.eye(3), TINY)
    assert np.abs(jh).max() < 1e-12


def test_hash_backward_is_adjoint():
    cfg = HashGridConfig(levels=2, n_min=4, n_max=8, features=2, table_size=2**7)
    t = _tables(cfg, 9)
    x = np.random.default_rng(10).uniform(-1, 1, (64, 3))
    out, cache = hash_forward(x, t, cfg)
    g = np.random.default_rng(11).normal(size=out.shape)
    gt = np.zeros_like(t)
    hash_backward(gt, cache, g)
    # <g, d out / d tables [dt]> = <gt, dt>, and out is linear in the tables
    dt = np.random.default_rng(12).normal(size=t.shape)
    out2, _ = hash_forward(x, dt, cfg)
    assert np.sum(g * out2) == pytest.approx(np.sum(gt * dt), rel=1e-12)


def test_encoders_deterministic():
    cfg = HashGridConfig(levels=2, table_size=2**8)
    a = init_hash_tables(cfg, np.random.default_rng(3))
    b = init_hash_tables(cfg, np.random.default_rng(3))
    np.testing.assert_array_equal(a, b)
