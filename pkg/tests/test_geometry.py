import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from ndm.geometry import (RV, DomainConfig, DomainError, GlobalParams, MaterialCoord, NumericError,
                          ParamFunction, apply_axis_offset, apply_pose, eval_primitive, hat_basis,
                          sample_surface, shape_points, grid_tensors)
from ndm.mesh import triangulate

from conftest import SPHERE_DOMAIN, sphere_params


def test_axis_point_and_apex():
    g = GlobalParams.constant(aspects=((0.5, 0.5, 0.5),) * 3)
    np.testing.assert_allclose(eval_primitive(MaterialCoord(0.0, 0.0, 0), g), [0.5, 0, 0], atol=1e-15)
    np.testing.assert_allclose(eval_primitive(MaterialCoord(-math.pi / 2, 1.3, 0), g), [0, 0, -0.5], atol=1e-15)


def test_rv_seam_continuity_for_differing_branches():
    g = GlobalParams.constant(aspects=((1, 1, 1), (1, 1, 1), (1.0, 0.9, 1.0)), rv_a2_alt=0.4)
    for u in (-1.0, 0.0, 0.7):
        a = eval_primitive(MaterialCoord(u, -1e-12, RV), g)
        b = eval_primitive(MaterialCoord(u, 0.0, RV), g)
        np.testing.assert_allclose(a, b, atol=1e-9)
        c = eval_primitive(MaterialCoord(u, -math.pi, RV), g)
        d = eval_primitive(MaterialCoord(u, math.pi - 1e-12, RV), g)
        np.testing.assert_allclose(c, d, atol=1e-9)


def test_rv_negative_half_uses_alt_branch():
    g = GlobalParams.constant(aspects=((1, 1, 1), (1, 1, 1), (1.0, 0.9, 1.0)), rv_a2_alt=0.4)
    p = eval_primitive(MaterialCoord(0.0, -math.pi / 2, RV), g)
    np.testing.assert_allclose(p, [0, 0.4, 0], atol=1e-15)
    q = eval_primitive(MaterialCoord(0.0, math.pi / 2, RV), g)
    np.testing.assert_allclose(q, [0, 0.9, 0], atol=1e-15)


def test_domain_errors():
    g = GlobalParams.constant()
    with pytest.raises(DomainError):
        eval_primitive(MaterialCoord(1.0, 0.0, 0), g)  # above pi/6 on the LV
    with pytest.raises(DomainError):
        eval_primitive(MaterialCoord(0.0, math.pi, 0), g)
    with pytest.raises(DomainError):
        eval_primitive(MaterialCoord(0.0, 0.0, 3), g)
    bad = GlobalParams.constant()
    bad.aspect[0, 0, 3] = np.nan
    with pytest.raises(NumericError):
        eval_primitive(MaterialCoord(0.0, 0.0, 0), bad)


def test_axis_offset():
    g = GlobalParams.constant(offsets=((0.1, 0.0),) * 3)
    m = MaterialCoord(0.0, 0.0, 0)
    np.testing.assert_allclose(apply_axis_offset([0.5, 0, 0], m, g), [0.6, 0, 0], atol=1e-15)
    g0 = GlobalParams.constant()
    np.testing.assert_array_equal(apply_axis_offset([0.5, 0.2, 0.1], m, g0), [0.5, 0.2, 0.1])


def test_linear_offsets_translate_ring_centroids():
    d = DomainConfig()
    g = GlobalParams.constant()
    ku = d.knots(1)
    g.offsets[1, 0] = 0.3 * ku + 0.1
    g.offsets[1, 1] = -0.2 * ku
    s0 = sample_surface(GlobalParams.constant(), d, 1, 9, 40).grid_positions()
    s1 = sample_surface(g, d, 1, 9, 40).grid_positions()
    u, _ = d.grid(1, 9, 40)
    shift = s1.mean(axis=1) - s0.mean(axis=1)
    np.testing.assert_allclose(shift[:, 0], 0.3 * u + 0.1, atol=1e-12)
    np.testing.assert_allclose(shift[:, 1], -0.2 * u, atol=1e-12)
    np.testing.assert_allclose(shift[:, 2], 0.0, atol=1e-12)


def test_pose():
    g = GlobalParams.constant(c=(1, 2, 3))
    np.testing.assert_allclose(apply_pose([0, 0, 0], g), [1, 2, 3])
    g = GlobalParams.constant(quat=(math.cos(math.pi / 4), 0, 0, math.sin(math.pi / 4)))
    np.testing.assert_allclose(apply_pose([1, 0, 0], g), [0, 1, 0], atol=1e-12)
    g.quat = np.array([1.0, 0.1, 0, 0])
    with pytest.raises(NumericError):
        apply_pose([1, 0, 0], g)


def test_sphere_sample_indexing():
    g = sphere_params()
    s = sample_surface(g, DomainConfig(), 0, 2, 3)
    assert s.positions.shape == (6, 3)
    s = sample_surface(g, SPHERE_DOMAIN, 0, 32, 64)
    assert s.positions.shape == (2048, 3)
    np.testing.assert_allclose(np.linalg.norm(s.positions, axis=1), 1.0, atol=1e-14)
    u, v = SPHERE_DOMAIN.grid(0, 32, 64)
    i, j = 5, 17
    expected = [math.cos(u[i]) * math.cos(v[j]), math.cos(u[i]) * math.sin(v[j]), math.sin(u[i])]
    np.testing.assert_allclose(s.positions[s.index(i, j)], expected, atol=1e-14)
    with pytest.raises(DomainError):
        sample_surface(g, DomainConfig(), 0, 1, 3)


def _zone_area_error(nu):
    # closed-form area of the southern hemisphere of the unit sphere is 2 pi
    d = DomainConfig(alpha=(0.0, 0.0, 0.0))
    m = triangulate(sample_surface(sphere_params(), d, 0, nu, 4 * nu))
    return abs(m.face_areas().sum() - 2 * math.pi)


def test_area_converges_with_refinement():
    errs = [_zone_area_error(n) for n in (8, 16, 32)]
    assert errs[0] > errs[1] > errs[2]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2), st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3), st.floats(0.1, 3.0))
def test_pose_equivariance(w, tx, ty, tz, angle):
    rng = np.random.default_rng(7)
    g = GlobalParams.identity()
    g.aspect = rng.normal(0, 0.2, g.aspect.shape)
    g.rv_a2_alt = rng.normal(0, 0.2, g.rv_a2_alt.shape)
    g.offsets = rng.normal(0, 0.1, g.offsets.shape)
    s0 = sample_surface(g, DomainConfig(), w, 6, 10).positions
    axis = np.array([1.0, 2.0, -0.5]) / np.linalg.norm([1.0, 2.0, -0.5])
    g2 = g.copy()
    g2.quat = np.concatenate([[math.cos(angle / 2)], math.sin(angle / 2) * axis])
    g2.c = np.array([tx, ty, tz])
    s1 = sample_surface(g2, DomainConfig(), w, 6, 10).positions
    from scipy.spatial.transform import Rotation
    R = Rotation.from_rotvec(angle * axis).as_matrix()
    np.testing.assert_allclose(s1, s0 @ R.T + g2.c, atol=1e-9)
    D0 = np.linalg.norm(s0[:, None] - s0[None], axis=-1)
    D1 = np.linalg.norm(s1[:, None] - s1[None], axis=-1)
    np.testing.assert_allclose(D0, D1, atol=1e-9)


def test_knot_locality():
    d = DomainConfig()
    g = GlobalParams.identity()
    ku = d.knots(0)
    k = 7
    g2 = g.copy()
    g2.aspect[0, 0, k] += 0.3
    s0 = sample_surface(g, d, 0, 64, 16)
    s1 = sample_surface(g2, d, 0, 64, 16)
    h = ku[1] - ku[0]
    uu = s0.coords[:, 0]
    changed = np.any(np.abs(s1.positions - s0.positions) > 0, axis=1)
    assert np.all(np.abs(uu[changed] - ku[k]) < h)
    assert changed.any()


def test_constant_functions_match_closed_form():
    g = GlobalParams.constant(a0=(2.0, 1.0, 1.0), aspects=((0.7, 0.4, 0.9),) * 3)
    m = MaterialCoord(-0.4, 1.1, 0)
    expect = 2.0 * np.array([0.7 * math.cos(-0.4) * math.cos(1.1), 0.4 * math.cos(-0.4) * math.sin(1.1),
                             0.9 * math.sin(-0.4)])
    np.testing.assert_allclose(eval_primitive(m, g), expect, rtol=1e-14)


def test_param_function_interpolates_exactly():
    knots = np.linspace(-1, 1, 5)
    f = ParamFunction(knots, np.array([0.0, 1.0, 4.0, 9.0, 16.0]))
    assert f(-0.75) == pytest.approx(0.5)
    assert f(0.25) == pytest.approx(6.5)
    B = hat_basis(np.array([-1.0, 0.1, 1.0]), knots)
    np.testing.assert_allclose(B.sum(axis=1), 1.0)


def test_torch_and_numpy_paths_agree():
    rng = np.random.default_rng(3)
    g = GlobalParams.identity()
    g.aspect = rng.normal(0, 0.2, g.aspect.shape)
    g.rv_a2_alt = rng.normal(0, 0.2, g.rv_a2_alt.shape)
    d = DomainConfig()
    B, uu, vv, u, v = grid_tensors(d, RV, 5, 8)
    t = g.tensors()
    t["offsets"] = torch.zeros_like(t["offsets"])
    P = shape_points(t, RV, B, uu, vv).numpy()
    for k in (0, 9, 23, 39):
        m = MaterialCoord(float(uu[k]), float(vv[k]), RV)
        np.testing.assert_allclose(P[k], eval_primitive(m, g, d), atol=1e-14)
