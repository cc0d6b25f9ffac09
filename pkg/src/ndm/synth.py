"""Synthetic bi-ventricular phantoms and the clinical-protocol degradation.

A phantom is a model of the same family that gets fitted (millimetre frame),
meshed on the material grid and sampled densely.  The sparse input mimics
CMR acquisition: short-axis (SAX) planes stacked along the LV long axis and
long-axis (LAX) planes rotated about it are intersected with the meshes, the
contours are resampled by arclength, and farthest-point sampling reduces the
result to a fixed count.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .flow import VelocityField, integrate_forward
from .geometry import LV_ENDO, LV_EPI, RV, SURFACES, U_MIN, DomainConfig, GlobalParams
from .mesh import TriMesh, sample_points, self_intersection_ratio
from .metrics import LabeledPointCloud
from .model import NdmModel, _matrix
from .template import rv_profile, slave_fold

log = logging.getLogger(__name__)

NORMALIZED_EXTENT = 0.85
CONTOUR_SPACING = 1.5  # mm
DENSE_POINTS = 3000


class SpecError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class SliceConfig:
    sax_count: int = 10
    lax_count: int = 3
    lax_angles: tuple[float, ...] = (0.0, math.pi / 3, 2 * math.pi / 3)
    sax_spacing: float | None = None  # mm; None spreads the stack apex-to-base
    total_points: int = 5600
    contour_spacing: float = CONTOUR_SPACING
    seed: int = 0

    def __post_init__(self):
        if self.sax_count < 0 or self.lax_count < 0 or self.sax_count + self.lax_count == 0:
            raise SpecError("need at least one slice plane")
        if len(self.lax_angles) < self.lax_count:
            raise SpecError("fewer LAX angles than LAX planes")
        ang = np.mod(np.asarray(self.lax_angles[:self.lax_count]), math.pi)
        if len(np.unique(np.round(ang, 12))) != self.lax_count:
            raise SpecError("LAX angles must be distinct")
        if self.total_points <= 0:
            raise SpecError("total_points must be positive")


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    lv_length: tuple[float, float] = (80.0, 100.0)  # LV-epi apex to base, mm
    wall: tuple[float, float] = (6.0, 12.0)  # mm
    endo_radius: tuple[float, float] = (20.0, 26.0)  # equatorial, mm
    aspect_jitter: float = 0.04
    bend: float = 3.0  # long-axis offset amplitude, mm
    warp_amplitude: float = 1.5  # RMS local displacement, mm
    noise: float = 0.0  # Gaussian noise on sparse points, mm
    translation: float = 40.0
    dense_points: int = DENSE_POINTS
    domain: DomainConfig = field(default_factory=DomainConfig)


@dataclass
class Phantom:
    model: NdmModel
    dense: LabeledPointCloud
    meshes: list[TriMesh]
    spec: PhantomSpec

    @property
    def diagonal(self) -> float:
        p = self.dense.points
        return float(np.linalg.norm(p.max(0) - p.min(0)))


# ---------------------------------------------------------------------------
# the shape family


def _smooth(rng, u, lo, hi, amp, terms=3):
    s = (u - lo) / (hi - lo)
    return sum(rng.normal(0, amp / k) * np.cos(k * math.pi * s) for k in range(1, terms + 1))


def phantom_params(rng: np.random.Generator, spec: PhantomSpec) -> GlobalParams:
    """Model-frame parameters (mm) of one random bi-ventricular phantom."""
    d = spec.domain
    K = d.n_knots
    g = GlobalParams.identity(K)
    L = rng.uniform(*spec.lv_length)
    A_epi = L / (1 + math.sin(d.alpha[LV_EPI]))
    t = rng.uniform(*spec.wall)
    r_endo = rng.uniform(*spec.endo_radius)
    r_epi = r_endo + t
    A_endo = A_epi - t

    ku = d.knots(LV_EPI)
    jit = [_smooth(rng, ku, U_MIN, d.alpha[LV_EPI], spec.aspect_jitter) for _ in range(3)]
    ell = rng.uniform(-0.04, 0.04)
    for w, A, r in ((LV_ENDO, A_endo, r_endo), (LV_EPI, A_epi, r_epi)):
        g.log_a0[w] = math.log(A)
        g.aspect[w, 0] = math.log(r / A) + ell + jit[0]
        g.aspect[w, 1] = math.log(r / A) - ell + jit[1]
        g.aspect[w, 2] = jit[2]
    s = (ku - U_MIN) / (d.alpha[LV_EPI] - U_MIN)
    bx, by = rng.uniform(-spec.bend, spec.bend, 2)
    for w in (LV_ENDO, LV_EPI):
        g.offsets[w, 0] = bx * s ** 2
        g.offsets[w, 1] = by * s ** 2

    # right ventricle: a crescent wrapped around the +y side of the LV
    depth = rng.uniform(0.6, 0.8) * A_epi
    top = A_epi * math.sin(d.alpha[LV_EPI]) + rng.uniform(3.0, 10.0)
    A1 = r_epi + rng.uniform(8.0, 14.0)
    A_alt = r_epi + rng.uniform(-2.0, 2.0)
    A2 = A_alt + rng.uniform(12.0, 20.0)
    ex = rng.uniform(-4.0, 4.0)
    la1, la2, la3, lalt, eyo = rv_profile(g, d, depth, top, A1, A_alt, A2, rng.uniform(3.0, 5.0), ex)
    kr = d.knots(RV)
    below = kr <= math.pi / 2 - 1e-9
    rj = [_smooth(rng, kr[below], U_MIN, math.pi / 2, 0.5 * spec.aspect_jitter) for _ in range(2)]
    la1[below] += rj[0]
    la2[below] += rj[1]
    g.log_a0[RV] = math.log(depth)
    g.aspect[RV] = np.stack([la1, la2, la3])
    g.rv_a2_alt = lalt
    g.offsets[RV, 0] = ex
    g.offsets[RV, 1] = eyo
    slave_fold(g, d)
    return g


def random_pose(rng, translation):
    q = Rotation.random(random_state=rng).as_quat()
    return np.array([q[3], q[0], q[1], q[2]]), rng.uniform(-translation, translation, 3)


def calibrated_warp(rng, model: NdmModel, amplitude: float, grid=(16, 32)) -> VelocityField:
    """Random smooth field rescaled so the RMS displacement on the LV-epi is ``amplitude``."""
    L = float(np.exp(model.params.log_a0[LV_EPI]))
    field_ = VelocityField.random(rng, zero_last=False, length_scale=L)
    if amplitude <= 0:
        return VelocityField(field_.layer_sizes, length_scale=L)
    s = model.global_sample(LV_EPI, *grid)
    local = model.model_frame(s.positions)
    rms = np.sqrt(np.mean(np.sum((integrate_forward(local, field_) - local) ** 2, axis=1)))
    # the last layer is linear in the output; rescale it and iterate once for the nonlinearity
    for _ in range(3):
        n_last = 3 * field_.layer_sizes[-2] + 3
        field_.weights[-n_last:] *= amplitude / rms
        rms = np.sqrt(np.mean(np.sum((integrate_forward(local, field_) - local) ** 2, axis=1)))
    return field_


def inside_fraction(points: np.ndarray, mesh: TriMesh) -> float:
    """Share of points on the inner side of ``mesh`` (nearest-face normal test)."""
    _, f, cp = mesh.bvh().nearest(points)
    n = mesh.face_normals()[f]
    return float(np.mean(np.sum((points - cp) * n, axis=1) < 0))


def generate_phantom(spec: PhantomSpec = PhantomSpec(), max_draws: int = 100) -> Phantom:
    rng = np.random.default_rng(spec.seed)
    for draw in range(max_draws):
        g = phantom_params(rng, spec)
        g.quat, g.c = random_pose(rng, spec.translation)
        model = NdmModel(g, domain=spec.domain)
        warp = calibrated_warp(rng, model, spec.warp_amplitude)
        model.flows = [warp.copy() for _ in SURFACES]
        meshes = model.meshes()
        if any(self_intersection_ratio(m) > 0 for m in meshes):
            log.info("phantom draw %d rejected: self-intersection", draw)
            continue
        if inside_fraction(meshes[LV_ENDO].vertices, meshes[LV_EPI]) < 1.0:
            log.info("phantom draw %d rejected: endo leaves epi", draw)
            continue
        dense = LabeledPointCloud.from_surfaces(
            [sample_points(m, spec.dense_points, rng)[0] for m in meshes])
        return Phantom(model, dense, meshes, spec)
    raise SpecError(f"no valid phantom after {max_draws} draws")


def warp_phantom(ph: Phantom, seed: int, contraction: float = 0.12, amplitude: float = 1.0):
    """Second shape of a registration pair: ``ph`` warped by a known flow.

    The flow is an ED-to-ES-like contraction toward the LV long axis plus a
    random smooth field, integrated with the model's own integrator.  Returns
    ``(warp, meshes, dense)`` where ``warp(points)`` maps world points.
    """
    rng = np.random.default_rng(seed)
    R = _matrix(ph.model.params.quat)
    c = ph.model.params.c
    L = float(np.exp(ph.model.params.log_a0[LV_EPI]))
    k_r = contraction * rng.uniform(0.8, 1.2)
    k_z = 0.5 * contraction * rng.uniform(0.8, 1.2)
    base = L * math.sin(ph.spec.domain.alpha[LV_EPI])
    probe = ph.model.model_frame(ph.meshes[LV_EPI].vertices[::7])
    rnd_full = VelocityField.random(rng, zero_last=False, length_scale=L)
    n_last = 3 * rnd_full.layer_sizes[-2] + 3
    disp = integrate_forward(probe, rnd_full) - probe
    rms = np.sqrt(np.mean(np.sum(disp ** 2, axis=1))) or 1.0
    rnd_full.weights[-n_last:] *= amplitude / rms
    rnd_f = rnd_full.torch_field()

    def field_(x, t):
        # x in model frame (mm): radial contraction plus axial shortening toward the base
        v = x.clone()
        v[:, 0] = -k_r * x[:, 0]
        v[:, 1] = -k_r * x[:, 1]
        v[:, 2] = -k_z * (x[:, 2] - base)
        return v + rnd_f(x, t)

    def warp(points):
        local = (np.asarray(points, float) - c) @ R
        return integrate_forward(local, field_) @ R.T + c

    meshes = [m.with_vertices(warp(m.vertices)) for m in ph.meshes]
    dense = ph.dense.with_points(warp(ph.dense.points))
    return warp, meshes, dense


# ---------------------------------------------------------------------------
# slicing


def plane_contours(mesh: TriMesh, normal, offset: float) -> list[np.ndarray]:
    """Polylines of ``mesh`` ∩ {x : n.x = offset}; vertices on the plane count as above."""
    n = np.asarray(normal, float)
    s = mesh.vertices @ n - offset
    pos = s >= 0
    F = mesh.faces
    fp = pos[F]
    mixed = np.flatnonzero(fp.any(1) & ~fp.all(1))
    if not len(mixed):
        return []
    seg_keys = []
    points = {}
    for f in mixed:
        keys = []
        for a, b in ((0, 1), (1, 2), (2, 0)):
            i, j = F[f, a], F[f, b]
            if pos[i] != pos[j]:
                key = (min(i, j), max(i, j))
                if key not in points:
                    t = s[key[0]] / (s[key[0]] - s[key[1]])
                    points[key] = mesh.vertices[key[0]] + t * (mesh.vertices[key[1]] - mesh.vertices[key[0]])
                keys.append(key)
        seg_keys.append(tuple(keys))
    nbr = {}
    for a, b in seg_keys:
        nbr.setdefault(a, []).append(b)
        nbr.setdefault(b, []).append(a)
    seen = set()
    lines = []
    # open chains first (endpoints have one neighbour), then closed loops
    starts = sorted(k for k, v in nbr.items() if len(v) == 1) + sorted(nbr)
    for s0 in starts:
        if s0 in seen:
            continue
        chain = [s0]
        seen.add(s0)
        cur = s0
        while True:
            nxt = [k for k in nbr[cur] if k not in seen]
            if not nxt:
                if len(chain) > 2 and chain[0] in nbr[cur]:
                    chain.append(chain[0])  # close the loop
                break
            cur = nxt[0]
            seen.add(cur)
            chain.append(cur)
        if len(chain) > 1:
            lines.append(np.array([points[k] for k in chain]))
    return lines


def resample_polyline(line: np.ndarray, spacing: float) -> np.ndarray:
    seg = np.linalg.norm(np.diff(line, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if total <= 0:
        return line[:1]
    n = max(1, int(math.floor(total / spacing)))
    at = (np.arange(n) + 0.5) * (total / n)
    out = np.empty((n, 3))
    for k in range(3):
        out[:, k] = np.interp(at, cum, line[:, k])
    return out


def slice_planes(axis_origin, axis_R, cfg: SliceConfig, z_apex: float, z_base: float):
    """``(normal, offset, kind)`` for the SAX stack and LAX fan of one long axis."""
    z = axis_R[:, 2]
    planes = []
    if cfg.sax_count:
        if cfg.sax_spacing is None:
            step = (z_base - z_apex) / cfg.sax_count
            heights = z_apex + (np.arange(cfg.sax_count) + 0.5) * step
        else:
            mid = 0.5 * (z_apex + z_base)
            heights = mid + (np.arange(cfg.sax_count) - 0.5 * (cfg.sax_count - 1)) * cfg.sax_spacing
        for h in heights:
            planes.append((z, float(z @ axis_origin + h), "SAX"))
    for th in cfg.lax_angles[:cfg.lax_count]:
        n = axis_R @ np.array([-math.sin(th), math.cos(th), 0.0])
        planes.append((n, float(n @ axis_origin), "LAX"))
    return planes


def farthest_point_sample(points, k: int, seed: int = 0) -> np.ndarray:
    """Indices of a greedy max-min subset of size ``k`` from a seeded random start."""
    P = np.asarray(points, dtype=float)
    n = len(P)
    if k > n:
        raise ValueError(f"cannot sample {k} of {n} points")
    if k <= 0:
        return np.zeros(0, dtype=np.int64)
    idx = np.empty(k, dtype=np.int64)
    idx[0] = np.random.default_rng(seed).integers(n)
    d = np.sum((P - P[idx[0]]) ** 2, axis=1)
    for i in range(1, k):
        idx[i] = int(np.argmax(d))
        d = np.minimum(d, np.sum((P - P[idx[i]]) ** 2, axis=1))
    return idx


def slice_to_sparse(meshes: list[TriMesh], cfg: SliceConfig = SliceConfig(), axis=None,
                    noise: float = 0.0) -> LabeledPointCloud:
    """Contour points of every surface on the SAX/LAX planes, FPS-reduced.

    ``axis`` is ``(origin, R)`` of the long-axis frame (third column of ``R``
    points from apex to base); when omitted it is estimated from the LV-epi
    mesh by principal components.
    """
    if axis is None:
        axis = estimate_long_axis(meshes[LV_EPI].vertices)
    origin, R = np.asarray(axis[0], float), np.asarray(axis[1], float)
    z_epi = (meshes[LV_EPI].vertices - origin) @ R[:, 2]
    z_endo = (meshes[LV_ENDO].vertices - origin) @ R[:, 2]
    planes = slice_planes(origin, R, cfg, float(z_epi.min()), float(min(z_epi.max(), z_endo.max())))
    lines = {w: [] for w in SURFACES}
    for n, off, kind in planes:
        hit = False
        for w, m in enumerate(meshes):
            for line in plane_contours(m, n, off):
                lines[w].append(line)
                hit = True
        if not hit:
            log.info("%s plane at offset %.2f misses every mesh", kind, off)
    length = sum(np.linalg.norm(np.diff(l, axis=0), axis=1).sum() for ls in lines.values() for l in ls)
    spacing = cfg.contour_spacing
    if length / spacing < 1.2 * cfg.total_points:
        spacing = length / (1.2 * cfg.total_points)
        log.info("contours too short for %d points; spacing reduced to %.3f mm", cfg.total_points, spacing)
    parts = [[resample_polyline(l, spacing) for l in lines[w]] for w in SURFACES]
    parts = [np.concatenate(p) if p else np.zeros((0, 3)) for p in parts]
    cloud = LabeledPointCloud.from_surfaces(parts)
    keep = np.sort(farthest_point_sample(cloud.points, min(cfg.total_points, len(cloud)), cfg.seed))
    pts = cloud.points[keep]
    if noise > 0:
        pts = pts + np.random.default_rng(cfg.seed + 7919).normal(0, noise, pts.shape)
    return LabeledPointCloud(pts, cloud.labels[keep])


def estimate_long_axis(points: np.ndarray):
    """Centroid and principal frame; the third column follows the largest spread,
    signed so the tapered (apex) end lies at negative height."""
    P = np.asarray(points, float)
    c = P.mean(0)
    _, _, Vt = np.linalg.svd(P - c, full_matrices=False)
    z = Vt[0]
    h = (P - c) @ z
    if -h.min() < h.max():
        z = -z
    x = Vt[1] - (Vt[1] @ z) * z
    x /= np.linalg.norm(x)
    return c, np.column_stack([x, np.cross(z, x), z])


def phantom_axis(ph: Phantom):
    return ph.model.params.c, _matrix(ph.model.params.quat)


def make_sparse(ph: Phantom, cfg: SliceConfig = SliceConfig()) -> LabeledPointCloud:
    return slice_to_sparse(ph.meshes, cfg, phantom_axis(ph), ph.spec.noise)


# ---------------------------------------------------------------------------
# normalization


@dataclass(frozen=True)
class NormTransform:
    """``x_n = scale * R (x - centroid)``; ``quat`` is ``R`` as ``(w, x, y, z)``."""

    centroid: np.ndarray
    quat: np.ndarray
    scale: float

    @property
    def R(self) -> np.ndarray:
        return _matrix(self.quat)

    def apply(self, x) -> np.ndarray:
        return self.scale * (np.asarray(x, float) - self.centroid) @ self.R.T

    def invert(self, x) -> np.ndarray:
        return (np.asarray(x, float) / self.scale) @ self.R + self.centroid

    def denormalize_model(self, model: NdmModel) -> NdmModel:
        return model.transformed(1.0 / self.scale, self.R.T, self.centroid)

    def normalize_model(self, model: NdmModel) -> NdmModel:
        return model.transformed(self.scale, self.R, -self.scale * (self.R @ self.centroid))


def rotation_to_y(d: np.ndarray) -> np.ndarray:
    """Smallest rotation taking unit vector ``d`` onto ``+y``."""
    y = np.array([0.0, 1.0, 0.0])
    d = d / np.linalg.norm(d)
    axis = np.cross(d, y)
    s, c = np.linalg.norm(axis), float(d @ y)
    if s < 1e-15:
        if c > 0:
            return np.eye(3)
        return Rotation.from_rotvec(math.pi * np.array([1.0, 0.0, 0.0])).as_matrix()
    return Rotation.from_rotvec(axis / s * math.atan2(s, c)).as_matrix()


def normalize(cloud: LabeledPointCloud, extent: float = NORMALIZED_EXTENT):
    """Centre, align the LV->RV centroid line with +y and scale to ``[-extent, extent]``."""
    P = cloud.points
    if len(P) < 2:
        raise AlignmentError("cloud too small to normalize")
    centroid = P.mean(0)
    lv = P[cloud.labels != RV]
    rv = P[cloud.labels == RV]
    if not len(lv) or not len(rv):
        raise AlignmentError("normalization needs LV and RV points")
    d = rv.mean(0) - lv.mean(0)
    if np.linalg.norm(d) < 1e-12 * (np.abs(P).max() + 1.0):
        raise AlignmentError("LV and RV centroids coincide")
    R = rotation_to_y(d)
    rotated = (P - centroid) @ R.T
    m = np.abs(rotated).max()
    if m <= 0:
        raise AlignmentError("degenerate cloud")
    x, y, z, w = Rotation.from_matrix(R).as_quat()
    tr = NormTransform(centroid, np.array([w, x, y, z]), extent / m)
    out = LabeledPointCloud(tr.scale * rotated, cloud.labels.copy(), "normalized")
    return out, tr
