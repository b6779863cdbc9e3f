from __future__ import annotations

import numpy as np
import pytest

from sectionsdf.datasets import (
    FigureEight,
    TubeBundle,
    aligned_planes,
    axis_index,
    box_mesh,
    circle_contour,
    icosphere,
    midpoints,
    nonaligned_planes,
    rotated_planes,
    slice_positions,
    slice_scene,
    sphere_sections,
)
from sectionsdf.geometry import GeometryError, TriMesh
from sectionsdf.metrics import connected_components


@pytest.mark.parametrize("mesh", [box_mesh(), icosphere(0.5, 2)], ids=["box", "icosphere"])
def test_closed_meshes(mesh):
    assert mesh.is_watertight() and mesh.euler_characteristic() == 2
    c = mesh.vertices[mesh.triangles].mean(axis=1) - mesh.vertices.mean(axis=0)
    assert np.all(np.sum(mesh.face_normals() * c, axis=1) > 0)


def test_icosphere_radius():
    m = icosphere(0.7, 3, center=(1, 2, 3))
    np.testing.assert_allclose(np.linalg.norm(m.vertices - [1, 2, 3], axis=1), 0.7)


def test_axis_index():
    assert axis_index("Z") == 2 and axis_index(1) == 1
    with pytest.raises(ValueError):
        axis_index("w")


def test_slice_positions_inset():
    p = slice_positions(-1.0, 1.0, 5, inset=0.02)
    np.testing.assert_allclose(p, np.linspace(-0.96, 0.96, 5))
    assert slice_positions(0.0, 2.0, 1).tolist() == [1.0]
    with pytest.raises(ValueError):
        slice_positions(0, 1, 0)


def test_midpoints():
    np.testing.assert_allclose(midpoints([0.0, 1.0, 3.0]), [0.5, 2.0])


def test_aligned_cube_sections():
    sec = slice_scene(box_mesh(), aligned_planes([-1] * 3, [1] * 3, 5, "z"))
    assert len(sec) == 5
    for s in sec.sections:
        assert len(s.contours) == 1 and len(s.contours[0]) == 4
        assert s.contours[0].area == pytest.approx(4.0)


def test_nonaligned_half_and_half():
    planes = nonaligned_planes([-0.5] * 3, [0.5] * 3, 4, "z")
    normals = np.array([p.normal for p in planes])
    assert np.allclose(np.abs(normals[:2, 2]), 1)
    assert np.allclose(normals[2:, 2], 0)
    assert len(nonaligned_planes([-1] * 3, [1] * 3, 5)) == 5


def test_rotated_planes_contain_axis():
    for p in rotated_planes(np.zeros(3), 6, "x"):
        assert abs(p.normal[0]) < 1e-12
    angles = [np.arctan2(p.u[2], p.u[1]) for p in rotated_planes(np.zeros(3), 4, "x")]
    np.testing.assert_allclose(np.diff(angles), np.pi / 4)


def test_sphere_sections_radii():
    sec = sphere_sections(7, radius=0.5, segments=512)
    for s in sec.sections:
        z = s.plane.origin[2]
        assert s.contours[0].area == pytest.approx(np.pi * (0.25 - z * z), rel=1e-4)
    empty = sphere_sections(1, positions=[0.7])
    assert len(empty.sections[0].contours) == 0


def test_sliced_icosphere_matches_analytic():
    mesh = icosphere(0.5, 5)
    sec = slice_scene(mesh, aligned_planes([-0.5] * 3, [0.5] * 3, 3))
    assert [len(s.contours) for s in sec.sections] == [1, 1, 1]
    mid = sec.sections[1].contours[0]
    assert mid.area == pytest.approx(np.pi * 0.25, rel=5e-3)


def test_slice_open_mesh_raises():
    m = icosphere(0.5, 2)
    z = m.vertices[m.triangles][:, :, 2]
    cut = np.flatnonzero((z.min(axis=1) < 0) & (z.max(axis=1) > 0))[0]
    opened = TriMesh(m.vertices, np.delete(m.triangles, cut, axis=0))
    with pytest.raises(GeometryError):
        slice_scene(opened, aligned_planes([-0.5] * 3, [0.5] * 3, 3))


def test_figure_eight_fixture():
    f8 = FigureEight()
    assert f8.sdf([0.0, 0.0, 0.0]) < 0
    assert f8.sdf([0.7, 0.0, 0.0]) == pytest.approx(0.0)
    n = f8.normal(np.array([[0.7, 0.0, 0.0], [-0.3, 0.4, 0.0]]))
    np.testing.assert_allclose(n, [[1, 0, 0], [0, 1, 0]])
    mesh = f8.mesh(64)
    assert mesh.is_watertight() and connected_components(mesh) == 1


def test_tube_bundle_fixture():
    tb = TubeBundle()
    assert tb.count == 20
    sec = tb.sections(4)
    assert len(sec) == 4 and all(len(s.contours) == 20 for s in sec.sections)
    assert np.abs(sec.world_vertices()).max() <= 0.9 + 1e-12
    assert tb.sdf(np.array([*tb.centers[0], 0.0])) == pytest.approx(-tb.radius)


def test_tube_recovery_counter():
    tb = TubeBundle(radius=0.05, cols=2, rows=1)
    from sectionsdf.datasets import mesh_from_sdf

    mesh = mesh_from_sdf(tb.sdf, [-1] * 3, [1] * 3, 64)
    assert tb.recovered(mesh) == 2
    # a single merged blob does not count
    blob = icosphere(0.9, 2)
    assert tb.recovered(blob) == 0
    assert tb.recovered(TriMesh(np.zeros((0, 3)), np.zeros((0, 3), int))) == 0


def test_circle_contour_ccw():
    c = circle_contour(1.0, 64)
    assert c.area > 0
