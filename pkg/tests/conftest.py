import math

import numpy as np
import pytest

from ndm.geometry import DomainConfig, GlobalParams
from ndm.mesh import TriMesh, triangulate
from ndm.model import NdmModel
from ndm.geometry import sample_surface

SPHERE_DOMAIN = DomainConfig(alpha=(math.pi / 2, math.pi / 2, math.pi / 2))


def sphere_params(radius=1.0, c=(0.0, 0.0, 0.0)):
    return GlobalParams.constant(a0=(radius,) * 3, c=c)


def sphere_mesh(nu=32, nv=64, radius=1.0, c=(0.0, 0.0, 0.0)) -> TriMesh:
    """Closed sphere: material grid up to the north pole, last ring collapsed."""
    s = sample_surface(sphere_params(radius, c), SPHERE_DOMAIN, 0, nu, nv)
    m = triangulate(s)
    return close_pole(m, nu, nv)


def close_pole(m: TriMesh, nu: int, nv: int) -> TriMesh:
    # collapse the top ring onto one vertex so the mesh is a closed 2-manifold
    top = 1 + (nu - 2) * nv
    V = np.concatenate([m.vertices[:top], m.vertices[top:top + 1]])
    F = m.faces.copy()
    F[F >= top] = top
    keep = (F[:, 0] != F[:, 1]) & (F[:, 1] != F[:, 2]) & (F[:, 0] != F[:, 2])
    return TriMesh(V, F[keep])


def random_mesh(rng, n_faces=200, n_verts=120, spread=1.0) -> TriMesh:
    V = rng.normal(size=(n_verts, 3)) * spread
    F = []
    while len(F) < n_faces:
        f = rng.choice(n_verts, 3, replace=False)
        F.append(f)
    return TriMesh(V, np.array(F))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def unit_sphere_model():
    return NdmModel(sphere_params(), domain=SPHERE_DOMAIN)


PAIR_GRIDS = ((6, 8), (6, 8), (6, 8))


def random_pair(seed: int):
    """Small random (model, target) pair in the normalized frame.

    The model is a jittered heart-like primitive with non-zero random flows;
    the target is a noisy sample of a second jittered primitive.
    """
    from ndm.flow import VelocityField
    from ndm.metrics import LabeledPointCloud

    rng = np.random.default_rng([seed, 77])

    def jittered():
        g = GlobalParams.constant(a0=(0.35, 0.35, 0.7), aspects=((0.8, 0.8, 0.9), (1.0, 1.0, 1.0), (1.1, 1.6, 0.95)),
                                  rv_a2_alt=0.9, offsets=((0, 0), (0, 0), (0, 0.3)))
        g.c = rng.normal(0, 0.05, 3)
        q = np.array([1.0, *rng.normal(0, 0.1, 3)])
        g.quat = q / np.linalg.norm(q)
        g.log_a0 = g.log_a0 + rng.normal(0, 0.05, 3)
        g.aspect = g.aspect + rng.normal(0, 0.03, g.aspect.shape)
        g.rv_a2_alt = g.rv_a2_alt + rng.normal(0, 0.03, g.rv_a2_alt.shape)
        g.offsets = g.offsets + rng.normal(0, 0.02, g.offsets.shape)
        return NdmModel(g)

    model = jittered()
    model.flows = [VelocityField.random(rng, zero_last=False, gain=0.3) for _ in range(3)]
    for f in model.flows:
        f.latent = rng.normal(0, 0.5, f.latent_dim)
    other = jittered()
    pts, labels = [], []
    for w in range(3):
        P = other.sample(w, 7, 9).positions
        P = P + rng.normal(0, 0.01, P.shape)
        pts.append(P)
        labels.append(np.full(len(P), w))
    return model, LabeledPointCloud(np.concatenate(pts), np.concatenate(labels), frame="normalized")


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
