"""Triangle meshes inherited from the material grid, and mesh-quality metrics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ._bvh import BVH, brute_force_intersecting
from .geometry import SurfaceSample

NC_SAMPLES = 3000


@dataclass
class TriMesh:
    vertices: np.ndarray  # (n, 3)
    faces: np.ndarray  # (F, 3) int
    vertex_material: np.ndarray | None = None  # (n, 3) of (u, v, w)
    surface: int = -1

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")
        f = self.faces
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise ValueError("face with repeated vertex index")

    def with_vertices(self, vertices) -> "TriMesh":
        return TriMesh(vertices, self.faces, self.vertex_material, self.surface)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def face_cross(self) -> np.ndarray:
        t = self.vertices[self.faces]
        return np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_cross(), axis=1)

    def face_normals(self) -> np.ndarray:
        c = self.face_cross()
        n = np.linalg.norm(c, axis=1, keepdims=True)
        return np.divide(c, n, out=np.zeros_like(c), where=n > 0)

    def edges(self) -> np.ndarray:
        """Undirected edge per face side, shape ``(3F, 2)``, sorted within rows."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        return np.sort(e, axis=1)

    def euler_characteristic(self) -> int:
        used = np.unique(self.faces)
        n_edges = len(np.unique(self.edges(), axis=0))
        return len(used) - n_edges + self.n_faces

    def bvh(self) -> BVH:
        return BVH(self.vertices, self.faces)

    def scale(self) -> float:
        if not len(self.vertices):
            return 1.0
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0))) or 1.0


def grid_faces(nu: int, nv: int) -> np.ndarray:
    """Connectivity of a ``nu x nv`` latitude/longitude grid with a collapsed apex.

    Vertex 0 is the apex (row ``u = -pi/2``); grid point ``(i, j)`` with
    ``i >= 1`` is vertex ``1 + (i - 1) * nv + j``.  Longitude wraps.  Winding
    gives ``dq/dv x dq/du`` normals (outward for the untouched primitive).
    """
    if nu < 2 or nv < 3:
        raise ValueError(f"grid {nu}x{nv} too small for triangulation")
    j = np.arange(nv)
    jn = (j + 1) % nv
    fan = np.column_stack([np.zeros(nv, dtype=np.int64), 1 + jn, 1 + j])
    quads = []
    for i in range(1, nu - 1):
        a = 1 + (i - 1) * nv + j
        b = 1 + (i - 1) * nv + jn
        c = 1 + i * nv + jn
        d = 1 + i * nv + j
        quads += [np.column_stack([a, b, c]), np.column_stack([a, c, d])]
    return np.concatenate([fan] + quads).astype(np.int64)


def triangulate(sample: SurfaceSample) -> TriMesh:
    """Mesh a grid sample; connectivity depends on the grid shape only."""
    nu, nv = sample.shape
    if sample.positions.shape[0] != nu * nv:
        raise ValueError("sample is not grid-structured")
    P = sample.grid_positions()
    verts = np.concatenate([P[0, :1], P[1:].reshape(-1, 3)])
    coords = sample.coords.reshape(nu, nv, 3)
    mat = np.concatenate([coords[0, :1], coords[1:].reshape(-1, 3)])
    return TriMesh(verts, grid_faces(nu, nv), mat, sample.w)


def merge(*meshes: TriMesh) -> TriMesh:
    verts, faces, off = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + off)
        off += len(m.vertices)
    return TriMesh(np.concatenate(verts), np.concatenate(faces))


def _si_eps(mesh: TriMesh) -> float:
    return 1e-9 * mesh.scale()


def intersecting_faces(mesh: TriMesh, brute_force: bool = False) -> np.ndarray:
    if mesh.n_faces == 0:
        return np.zeros(0, dtype=bool)
    eps = _si_eps(mesh)
    if brute_force:
        return brute_force_intersecting(np.ascontiguousarray(mesh.vertices), mesh.faces, eps)
    return mesh.bvh().intersecting_faces(eps)


def self_intersection_ratio(mesh: TriMesh, brute_force: bool = False) -> float:
    """Fraction of faces crossing at least one face that shares no vertex with them."""
    if mesh.n_faces == 0:
        return 0.0
    return float(intersecting_faces(mesh, brute_force).mean())


class EdgeIncidence(NamedTuple):
    mean: float  # mean number of faces per undirected edge
    irregular: int  # edges used by other than two faces
    boundary: int  # edges used by one face
    nonmanifold: int  # edges used by more than two faces


def enf_ratio(mesh: TriMesh) -> EdgeIncidence:
    """Edge-incidence statistics used as the ENF figure (operational definition)."""
    if mesh.n_faces == 0:
        return EdgeIncidence(0.0, 0, 0, 0)
    _, counts = np.unique(mesh.edges(), axis=0, return_counts=True)
    return EdgeIncidence(float(counts.mean()), int(np.sum(counts != 2)), int(np.sum(counts == 1)),
                         int(np.sum(counts > 2)))


def sample_points(mesh: TriMesh, n: int, rng: np.random.Generator, exclude_degenerate: bool = True):
    """Area-uniform surface samples; returns ``(points, face_index)``."""
    areas = mesh.face_areas()
    if exclude_degenerate:
        areas = np.where(areas > 1e-14 * mesh.scale() ** 2, areas, 0.0)
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has no area to sample")
    f = rng.choice(mesh.n_faces, size=n, p=areas / total)
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    b = np.column_stack([1 - s, s * (1 - r2), s * r2])
    tri = mesh.vertices[mesh.faces[f]]
    return np.einsum("nk,nkd->nd", b, tri), f


def _non_degenerate(mesh: TriMesh) -> TriMesh:
    keep = mesh.face_areas() > 1e-14 * mesh.scale() ** 2
    return TriMesh(mesh.vertices, mesh.faces[keep], None, mesh.surface)


def _one_sided_nc(a: TriMesh, b: TriMesh, n: int, rng) -> float:
    pts, f = sample_points(a, n, rng)
    na = a.face_normals()[f]
    b = _non_degenerate(b)
    _, fb, _ = b.bvh().nearest(pts)
    nb = b.face_normals()[fb]
    return float(np.mean(np.abs(np.sum(na * nb, axis=1))))


def normal_consistency(pred: TriMesh, gt: TriMesh, n: int = NC_SAMPLES, seed: int = 0) -> float:
    """Symmetric mean ``|n_a . n_b|`` between samples and their nearest faces."""
    if pred.n_faces == 0 or gt.n_faces == 0:
        raise ValueError("normal consistency needs non-empty meshes")
    rng = np.random.default_rng(seed)
    return 0.5 * (_one_sided_nc(pred, gt, n, rng) + _one_sided_nc(gt, pred, n, rng))
