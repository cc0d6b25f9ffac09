"""Registration through the dense correspondence shared by two fitted models.

Both models parametrize their surfaces over the same primitive, so grid
index ``(i, j, w)`` names corresponding points ``q1`` and ``q2``.  A point
near shape 1 is mapped by finding its nearest ``q1`` and returning the
paired ``q2``.  By convention model 1 is the ED phase and model 2 the ES
phase.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import SURFACES
from .metrics import LabeledPointCloud
from .model import NdmModel

DIRECTION = "ED->ES"
_TIE_K = 8


@dataclass
class CorrespondenceMap:
    source: NdmModel
    target: NdmModel
    grid: tuple[int, int]
    q1: list[np.ndarray]  # per surface, (nu * nv, 3)
    q2: list[np.ndarray]
    coords: list[np.ndarray]  # per surface, (nu * nv, 3) of (u, v, w)

    def __post_init__(self):
        self._trees = [None] * len(self.q1)

    @property
    def n_pairs(self) -> int:
        return sum(len(q) for q in self.q1)

    def tree(self, w: int) -> cKDTree:
        if self._trees[w] is None:
            self._trees[w] = cKDTree(self.q1[w])
        return self._trees[w]


def build_correspondence(model1: NdmModel, model2: NdmModel, grid=(64, 128)) -> CorrespondenceMap:
    """Sample both models on one material grid and pair the samples by index."""
    if tuple(model1.domain.alpha) != tuple(model2.domain.alpha) or \
            model1.domain.n_knots != model2.domain.n_knots:
        raise ValueError("models are defined on different material domains")
    nu, nv = int(grid[0]), int(grid[1])
    q1, q2, coords = [], [], []
    for w in SURFACES:
        s1 = model1.sample(w, nu, nv)
        s2 = model2.sample(w, nu, nv)
        q1.append(s1.positions)
        q2.append(s2.positions)
        coords.append(s1.coords)
    return CorrespondenceMap(model1, model2, (nu, nv), q1, q2, coords)


def _nearest_lowest(tree: cKDTree, n: int, points: np.ndarray):
    """Nearest sample per query; exact distance ties go to the lowest index."""
    k = min(_TIE_K, n)
    d, idx = tree.query(points, k=k)
    if k == 1:
        return idx, d
    d = np.asarray(d).reshape(len(points), k)
    idx = np.asarray(idx).reshape(len(points), k)
    tie = d == d[:, :1]
    best = np.where(tie, idx, n).min(axis=1)
    return best, d[:, 0]


def _frames(q: np.ndarray, nu: int, nv: int):
    """Orthonormal frames (tangent_v, binormal, normal) per grid sample; NaN where degenerate."""
    P = q.reshape(nu, nv, 3)
    du = np.gradient(P, axis=0)
    dv = 0.5 * (np.roll(P, -1, axis=1) - np.roll(P, 1, axis=1))
    n = np.cross(du, dv)
    nn = np.linalg.norm(n, axis=-1, keepdims=True)
    tv = np.linalg.norm(dv, axis=-1, keepdims=True)
    bad = (nn[..., 0] <= 1e-12) | (tv[..., 0] <= 1e-12)
    with np.errstate(invalid="ignore", divide="ignore"):
        e1 = dv / tv
        e3 = n / nn
    e2 = np.cross(e3, e1)
    F = np.stack([e1, e2, e3], axis=-1)  # columns are the frame axes
    F[bad] = np.nan
    return F.reshape(nu * nv, 3, 3)


def register(points, cmap: CorrespondenceMap, labels=None, residual: bool = False):
    """Map points near shape 1 onto shape 2.

    ``points`` is an ``(n, 3)`` array or a ``LabeledPointCloud``; with labels,
    each point is matched only against samples of its own surface.  Returns
    ``(registered, snap_distance)``, with a cloud in, a cloud out.  With
    ``residual`` the offset ``p1 - q1`` is carried over in the local surface
    frame of ``q2``.
    """
    if cmap.n_pairs == 0:
        raise ValueError("empty correspondence map")
    cloud = points if isinstance(points, LabeledPointCloud) else None
    P = cloud.points if cloud is not None else np.asarray(points, float).reshape(-1, 3)
    if cloud is not None:
        labels = cloud.labels
    out = np.empty_like(P)
    dist = np.empty(len(P))
    groups = [(w, np.flatnonzero(np.asarray(labels) == w)) for w in SURFACES] if labels is not None else None
    if groups is None:
        # unlabeled: search the union of all surfaces
        allq1 = np.concatenate(cmap.q1)
        allq2 = np.concatenate(cmap.q2)
        idx, d = _nearest_lowest(cKDTree(allq1), len(allq1), P)
        out[:] = allq2[idx]
        dist[:] = d
        if residual:
            off = np.cumsum([0] + [len(q) for q in cmap.q1])
            for w in SURFACES:
                sel = np.flatnonzero((idx >= off[w]) & (idx < off[w + 1]))
                out[sel] = _residual(P[sel], idx[sel] - off[w], cmap, w)
    else:
        for w, sel in groups:
            if not len(sel):
                continue
            idx, d = _nearest_lowest(cmap.tree(w), len(cmap.q1[w]), P[sel])
            out[sel] = cmap.q2[w][idx]
            dist[sel] = d
            if residual:
                out[sel] = _residual(P[sel], idx, cmap, w)
    if cloud is not None:
        return cloud.with_points(out), dist
    return out, dist


def _residual(p: np.ndarray, idx: np.ndarray, cmap: CorrespondenceMap, w: int) -> np.ndarray:
    nu, nv = cmap.grid
    F1 = _frames(cmap.q1[w], nu, nv)[idx]
    F2 = _frames(cmap.q2[w], nu, nv)[idx]
    q1, q2 = cmap.q1[w][idx], cmap.q2[w][idx]
    local = np.einsum("nki,nk->ni", F1, p - q1)
    moved = q2 + np.einsum("nik,nk->ni", F2, local)
    ok = np.all(np.isfinite(moved), axis=1)
    return np.where(ok[:, None], moved, q2)


def grid_spacing(model: NdmModel, grid=(64, 128)) -> float:
    """Mean edge length of the model's meshes on the given material grid."""
    lengths = []
    for m in model.meshes(*grid):
        e = np.unique(m.edges(), axis=0)
        lengths.append(np.linalg.norm(m.vertices[e[:, 0]] - m.vertices[e[:, 1]], axis=1))
    return float(np.concatenate(lengths).mean())
