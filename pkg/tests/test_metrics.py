import itertools

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from ndm.metrics import (EMD_EXACT_MAX, LabeledPointCloud, chamfer, emd, emd_exact, nn_distances,
                         point_to_surface)
from ndm.mesh import TriMesh

from conftest import random_mesh, sphere_mesh


def brute_chamfer(a, b):
    D = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    return 0.5 * (D.min(1).mean() + D.min(0).mean())


def brute_emd(a, b):
    D = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    n = len(a)
    return min(D[np.arange(n), list(p)].mean() for p in itertools.permutations(range(n)))


def test_chamfer_basic():
    a = np.zeros((1, 3))
    assert chamfer(a, np.array([[3.0, 4.0, 0.0]])) == 5.0
    x = np.random.default_rng(0).normal(size=(20, 3))
    assert chamfer(x, x) == 0.0
    with pytest.raises(ValueError):
        chamfer(np.zeros((0, 3)), x)


def test_chamfer_brute_force(rng):
    a, b = rng.normal(size=(200, 3)), rng.normal(size=(180, 3)) + 0.3
    assert abs(chamfer(a, b) - brute_chamfer(a, b)) < 1e-12


@pytest.mark.parametrize("n", [1, 2, 3, 5, 7])
def test_emd_permutation_oracle(rng, n):
    a, b = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
    assert abs(emd_exact(a, b) - brute_emd(a, b)) < 1e-12


def test_emd_examples():
    a = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
    assert emd(a, a + [10, 0, 0]).value == pytest.approx(10.0, abs=1e-12)
    assert emd(a, a).value == 0.0
    with pytest.raises(ValueError):
        emd(a, a[:2])


def test_emd_subsample_flag(rng):
    a, b = rng.normal(size=(EMD_EXACT_MAX + 10, 3)), rng.normal(size=(EMD_EXACT_MAX + 10, 3))
    r = emd(a, b, seed=3)
    assert r.approximate and r.n_used == EMD_EXACT_MAX
    assert emd(a, b, seed=3).value == r.value
    assert not emd(a[:100], b[:100]).approximate


def test_symmetry_and_rigid_invariance(rng):
    a, b = rng.normal(size=(60, 3)), rng.normal(size=(60, 3))
    R = Rotation.from_rotvec([0.3, -1.2, 0.7]).as_matrix()
    t = np.array([5.0, -2.0, 1.0])
    ta, tb = a @ R.T + t, b @ R.T + t
    assert abs(chamfer(a, b) - chamfer(b, a)) < 1e-12
    assert abs(emd_exact(a, b) - emd_exact(b, a)) < 1e-9
    assert abs(chamfer(a, b) - chamfer(ta, tb)) < 1e-9
    assert abs(emd_exact(a, b) - emd_exact(ta, tb)) < 1e-9
    m = random_mesh(rng, 100, 60)
    mt = TriMesh(m.vertices @ R.T + t, m.faces)
    assert abs(point_to_surface(a, m) - point_to_surface(ta, mt)) < 1e-9


def test_emd_dominates_one_sided_chamfer(rng):
    a, b = rng.normal(size=(80, 3)), rng.normal(size=(80, 3))
    assert emd_exact(a, b) >= nn_distances(a, b).mean() - 1e-12
    assert emd_exact(a, b) >= nn_distances(b, a).mean() - 1e-12


def test_point_to_surface(rng):
    m = sphere_mesh(64, 128)
    assert point_to_surface(m.vertices, m) < 1e-12
    assert abs(point_to_surface(np.array([[0.0, 0, 2]]), m) - 1.0) < 0.01
    small = random_mesh(rng, 400, 150)
    P = rng.normal(size=(50, 3))
    from ndm._bvh import closest_point_triangle
    brute = []
    for p in P:
        brute.append(min(np.linalg.norm(p - closest_point_triangle(p, *small.vertices[f])) for f in small.faces))
    assert abs(point_to_surface(P, small) - np.mean(brute)) < 1e-12
    with pytest.raises(ValueError):
        point_to_surface(P, TriMesh(np.zeros((0, 3)), np.zeros((0, 3), int)))


def test_labeled_cloud_validation():
    with pytest.raises(ValueError):
        LabeledPointCloud(np.zeros((2, 3)), [0, 3])
    with pytest.raises(ValueError):
        LabeledPointCloud(np.full((1, 3), np.inf), [0])
    c = LabeledPointCloud.from_surfaces([np.zeros((2, 3)), np.ones((1, 3)), np.ones((3, 3))])
    assert c.has_all_labels() and len(c.surface(2)) == 3
