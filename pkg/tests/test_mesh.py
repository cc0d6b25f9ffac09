import math

import numpy as np
import pytest

from ndm._bvh import closest_point_triangle
from ndm.geometry import DomainConfig, GlobalParams, sample_surface
from ndm.mesh import (TriMesh, enf_ratio, grid_faces, intersecting_faces, merge, normal_consistency,
                      sample_points, self_intersection_ratio, triangulate)
from ndm.model import NdmModel
from ndm.flow import VelocityField

from conftest import SPHERE_DOMAIN, close_pole, random_mesh, sphere_mesh, sphere_params


def test_face_count_small_grid():
    F = grid_faces(3, 4)
    assert len(F) == 4 + 2 * 4
    assert len(np.unique(np.sort(F, axis=1), axis=0)) == len(F)


def test_sphere_normals_point_outward():
    s = sample_surface(sphere_params(), SPHERE_DOMAIN, 0, 16, 32)
    m = triangulate(s)
    n = m.face_normals()
    c = m.vertices[m.faces].mean(axis=1)
    good = m.face_areas() > 1e-12
    assert np.all(np.sum(n[good] * c[good], axis=1) > 0)


def test_connectivity_independent_of_deformation(rng):
    d = DomainConfig()
    g = GlobalParams.identity()
    g.aspect = rng.normal(0, 0.3, g.aspect.shape)
    vf = VelocityField.random(rng, zero_last=False)
    a = NdmModel(GlobalParams.identity(), domain=d).mesh(1, 10, 20)
    b = NdmModel(g, [vf.copy() for _ in range(3)], domain=d).mesh(1, 10, 20)
    assert np.array_equal(a.faces, b.faces)
    assert a.euler_characteristic() == b.euler_characteristic() == 1  # a disc


def test_closed_sphere_is_manifold():
    m = sphere_mesh(12, 24)
    e = enf_ratio(m)
    assert e.mean == 2.0 and e.irregular == 0
    assert m.euler_characteristic() == 2
    assert self_intersection_ratio(m) == 0.0


def test_open_rim_and_duplicated_face():
    s = sample_surface(GlobalParams.constant(), DomainConfig(), 0, 10, 20)
    m = triangulate(s)
    e = enf_ratio(m)
    assert e.mean < 2.0 and e.boundary == 20 and e.nonmanifold == 0
    dup = TriMesh(m.vertices, np.concatenate([m.faces, m.faces[40:41]]))
    assert enf_ratio(dup).nonmanifold >= 3


def test_two_identical_spheres_fully_intersect():
    a = sphere_mesh(10, 10)
    m = merge(a, a)
    assert self_intersection_ratio(m, brute_force=True) == 1.0
    assert self_intersection_ratio(m) == 1.0


def test_shifted_spheres_match_brute_force():
    m = merge(sphere_mesh(10, 10), sphere_mesh(10, 10, c=(0.3, 0.1, 0.05)))
    assert np.array_equal(intersecting_faces(m), intersecting_faces(m, brute_force=True))
    assert 0 < self_intersection_ratio(m) < 1


def test_bvh_matches_brute_force_random(rng):
    for _ in range(3):
        m = random_mesh(rng, 300, 150)
        assert np.array_equal(intersecting_faces(m), intersecting_faces(m, brute_force=True))


def _brute_nearest(P, m):
    best = np.full(len(P), np.inf)
    for f in m.faces:
        a, b, c = m.vertices[f]
        for k, p in enumerate(P):
            q = closest_point_triangle(p, a, b, c)
            best[k] = min(best[k], float(np.sum((p - q) ** 2)))
    return best


def test_point_triangle_regions():
    a, b, c = np.array([0.0, 0, 0]), np.array([1.0, 0, 0]), np.array([0.0, 1, 0])
    cases = {(0.2, 0.2, 1.0): (0.2, 0.2, 0), (-1, -1, 0): (0, 0, 0), (2, -0.5, 0): (1, 0, 0),
             (0.5, -1, 0): (0.5, 0, 0), (1, 1, 0): (0.5, 0.5, 0), (-1, 0.5, 0): (0, 0.5, 0)}
    for p, q in cases.items():
        np.testing.assert_allclose(closest_point_triangle(np.array(p, float), a, b, c), q, atol=1e-15)
    # degenerate triangle falls back to its edges
    np.testing.assert_allclose(closest_point_triangle(np.array([0.5, 1.0, 0]), a, b, b), [0.5, 0, 0])


def test_bvh_nearest_matches_brute_force(rng):
    m = random_mesh(rng, 200, 100)
    P = rng.normal(size=(60, 3))
    d2, f, q = m.bvh().nearest(P)
    np.testing.assert_allclose(d2, _brute_nearest(P, m), rtol=0, atol=1e-12)
    np.testing.assert_allclose(np.sum((P - q) ** 2, axis=1), d2, atol=1e-12)


def test_normal_consistency():
    m = sphere_mesh(16, 32)
    assert normal_consistency(m, m) == pytest.approx(1.0, abs=1e-6)
    flipped = TriMesh(m.vertices, m.faces[:, [0, 2, 1]])
    assert normal_consistency(m, flipped) == pytest.approx(1.0, abs=1e-6)
    big = sphere_mesh(16, 32, radius=1.1)
    m64 = sphere_mesh(64, 128)
    assert normal_consistency(m64, TriMesh(m64.vertices * 1.1, m64.faces)) > 0.999
    assert normal_consistency(m, big) > 0.99


def test_sample_points_on_surface(rng):
    m = sphere_mesh(16, 32)
    pts, f = sample_points(m, 500, rng)
    d2, _, _ = m.bvh().nearest(pts)
    assert np.max(d2) < 1e-20
    with pytest.raises(ValueError):
        sample_points(TriMesh(np.zeros((3, 3)), [[0, 1, 2]]), 5, rng)


def test_trimesh_validation():
    with pytest.raises(ValueError):
        TriMesh(np.zeros((3, 3)), [[0, 1, 3]])
    with pytest.raises(ValueError):
        TriMesh(np.zeros((3, 3)), [[0, 1, 1]])
