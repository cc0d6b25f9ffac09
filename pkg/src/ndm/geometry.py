"""Blended deformable-superquadric primitive.

Material coordinates ``(u, v, w)`` map to model-frame points through a
scaled ellipsoid whose aspect ratios are piecewise-linear functions of the
latitude ``u``; the right-ventricle surface (``w = 2``) blends two halves
that differ only in ``a2``.  Axis offsets bend the long axis, and the pose
``(c, R)`` places the model in the world frame.

All heavy lifting is written against torch tensors so the fitting engine can
differentiate through it; the public helpers accept and return numpy arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
import torch

LV_ENDO, LV_EPI, RV = 0, 1, 2
SURFACES = (LV_ENDO, LV_EPI, RV)
SURFACE_NAMES = ("LV-endo", "LV-epi", "RV")

U_MIN = -math.pi / 2
QUAT_TOL = 1e-6


class DomainError(ValueError):
    """Material coordinate or grid outside the primitive's domain."""


class NumericError(ArithmeticError):
    """Non-finite value or invalid numeric state."""


class MaterialCoord(NamedTuple):
    u: float
    v: float
    w: int


@dataclass(frozen=True)
class DomainConfig:
    """Per-surface latitude bounds, knot count and the default output grid."""

    alpha: tuple[float, float, float] = (math.pi / 6, math.pi / 6, math.pi / 2)
    grid_u: int = 64
    grid_v: int = 128
    n_knots: int = 16

    def __post_init__(self):
        if len(self.alpha) != 3:
            raise DomainError("alpha needs one bound per surface")
        if any(a <= U_MIN for a in self.alpha):
            raise DomainError("alpha must exceed -pi/2")
        if self.grid_u < 2 or self.grid_v < 3:
            raise DomainError(f"grid {self.grid_u}x{self.grid_v} too small (need >= 2x3)")
        if self.n_knots < 2:
            raise DomainError("need at least two knots")

    def knots(self, w: int) -> np.ndarray:
        return np.linspace(U_MIN, self.alpha[w], self.n_knots)

    def grid(self, w: int, grid_u: int | None = None, grid_v: int | None = None):
        """Uniform ``(u, v)`` axes for surface ``w``; v is periodic (endpoint excluded)."""
        nu = self.grid_u if grid_u is None else grid_u
        nv = self.grid_v if grid_v is None else grid_v
        if nu < 2 or nv < 3:
            raise DomainError(f"grid {nu}x{nv} too small (need >= 2x3)")
        u = np.linspace(U_MIN, self.alpha[w], nu)
        v = -math.pi + 2 * math.pi * np.arange(nv) / nv
        return u, v

    def with_grid(self, grid_u: int, grid_v: int) -> "DomainConfig":
        return replace(self, grid_u=grid_u, grid_v=grid_v)


def check_coord(m: MaterialCoord, domain: DomainConfig) -> None:
    u, v, w = m
    if w not in SURFACES:
        raise DomainError(f"surface index {w} not in {{0,1,2}}")
    if not (U_MIN - 1e-12 <= u <= domain.alpha[w] + 1e-12):
        raise DomainError(f"u={u} outside [-pi/2, {domain.alpha[w]}] for surface {w}")
    if not (-math.pi - 1e-12 <= v < math.pi):
        raise DomainError(f"v={v} outside [-pi, pi)")


@dataclass(frozen=True)
class ParamFunction:
    """Piecewise-linear function of latitude given by ``(knot_u, value)`` pairs."""

    knots_u: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if len(self.knots_u) != len(self.values) or len(self.knots_u) < 2:
            raise ValueError("knots and values must have equal length >= 2")
        if np.any(np.diff(self.knots_u) <= 0):
            raise ValueError("knots must be strictly increasing")

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        lo, hi = self.knots_u[0], self.knots_u[-1]
        if np.any(u < lo - 1e-12) or np.any(u > hi + 1e-12):
            raise DomainError("parameter function evaluated outside its knot range")
        return np.interp(u, self.knots_u, self.values)


def hat_basis(u: np.ndarray, knots: np.ndarray) -> np.ndarray:
    """Linear-interpolation weights, shape ``(len(u), len(knots))``."""
    u = np.clip(np.asarray(u, dtype=float), knots[0], knots[-1])
    k = len(knots)
    idx = np.clip(np.searchsorted(knots, u, side="right") - 1, 0, k - 2)
    t = (u - knots[idx]) / (knots[idx + 1] - knots[idx])
    B = np.zeros((len(u), k))
    rows = np.arange(len(u))
    B[rows, idx] = 1.0 - t
    B[rows, idx + 1] += t
    return B


@dataclass
class GlobalParams:
    """Global deformation parameters, stored unconstrained.

    ``log_a0``, ``aspect`` and ``rv_a2_alt`` hold log-values (the positive
    quantities are their exponentials, so the all-zero state is the unit
    sphere); ``offsets`` are stored as-is.  ``quat`` is ``(w, x, y, z)``.
    """

    c: np.ndarray = field(default_factory=lambda: np.zeros(3))
    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    log_a0: np.ndarray = field(default_factory=lambda: np.zeros(3))
    aspect: np.ndarray = None  # (3 surfaces, 3 axes, K)
    rv_a2_alt: np.ndarray = None  # (K,)
    offsets: np.ndarray = None  # (3 surfaces, 2 axes, K)

    @classmethod
    def identity(cls, n_knots: int = 16) -> "GlobalParams":
        return cls(
            aspect=np.zeros((3, 3, n_knots)),
            rv_a2_alt=np.zeros(n_knots),
            offsets=np.zeros((3, 2, n_knots)),
        )

    @classmethod
    def constant(cls, a0=(1.0, 1.0, 1.0), aspects=((1, 1, 1),) * 3, rv_a2_alt=None,
                 offsets=((0, 0),) * 3, n_knots=16, c=(0, 0, 0), quat=(1, 0, 0, 0)):
        """Parameters with every parameter function constant in ``u``."""
        ones = np.ones(n_knots)
        asp = np.log(np.asarray(aspects, float))[:, :, None] * ones
        alt = asp[RV, 1].copy() if rv_a2_alt is None else np.log(rv_a2_alt) * ones
        off = np.asarray(offsets, float)[:, :, None] * ones
        return cls(c=np.asarray(c, float), quat=np.asarray(quat, float),
                   log_a0=np.log(np.asarray(a0, float)), aspect=asp,
                   rv_a2_alt=alt, offsets=off)

    @property
    def n_knots(self) -> int:
        return self.aspect.shape[-1]

    @property
    def a0(self) -> np.ndarray:
        return np.exp(self.log_a0)

    def copy(self) -> "GlobalParams":
        return GlobalParams(**{k: np.array(v, dtype=float) for k, v in self.as_dict().items()})

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"c": self.c, "quat": self.quat, "log_a0": self.log_a0,
                "aspect": self.aspect, "rv_a2_alt": self.rv_a2_alt, "offsets": self.offsets}

    def aspect_function(self, w: int, axis: int, domain: DomainConfig, alt: bool = False) -> ParamFunction:
        raw = self.rv_a2_alt if alt else self.aspect[w, axis]
        return ParamFunction(domain.knots(w), np.exp(raw))

    def offset_function(self, w: int, axis: int, domain: DomainConfig) -> ParamFunction:
        return ParamFunction(domain.knots(w), np.array(self.offsets[w, axis]))

    def tensors(self, dtype=torch.float64) -> dict[str, torch.Tensor]:
        return {k: torch.tensor(np.asarray(v, dtype=float), dtype=dtype) for k, v in self.as_dict().items()}

    @classmethod
    def from_tensors(cls, t: dict[str, torch.Tensor]) -> "GlobalParams":
        return cls(**{k: t[k].detach().cpu().numpy().astype(float).copy() for k in
                      ("c", "quat", "log_a0", "aspect", "rv_a2_alt", "offsets")})


# ---------------------------------------------------------------------------
# torch kernels


def quat_to_matrix(q: torch.Tensor) -> torch.Tensor:
    q = q / torch.linalg.norm(q)
    w, x, y, z = q[0], q[1], q[2], q[3]
    return torch.stack([
        torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)]),
        torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)]),
        torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)]),
    ])


def shape_points(t: dict[str, torch.Tensor], w: int, B: torch.Tensor, u: torch.Tensor,
                 v: torch.Tensor) -> torch.Tensor:
    """Model-frame primitive plus axis offsets, ``s = T_o(e)``.

    ``B`` is the hat basis of the per-point latitudes ``u`` (shape ``(n, K)``)
    and ``v`` the per-point longitudes.  For the RV the ``v < 0`` half is the
    blended component evaluated at ``(u, -v)`` with its own ``a2`` function.
    """
    a0 = torch.exp(t["log_a0"][w])
    a1 = torch.exp(B @ t["aspect"][w, 0])
    a2 = torch.exp(B @ t["aspect"][w, 1])
    a3 = torch.exp(B @ t["aspect"][w, 2])
    cu, su = torch.cos(u), torch.sin(u)
    if w == RV:
        alt = torch.exp(B @ t["rv_a2_alt"])
        neg = v < 0
        a2 = torch.where(neg, alt, a2)
        v = torch.where(neg, -v, v)
    x = a0 * a1 * cu * torch.cos(v) + B @ t["offsets"][w, 0]
    y = a0 * a2 * cu * torch.sin(v) + B @ t["offsets"][w, 1]
    z = a0 * a3 * su
    return torch.stack([x, y, z], dim=-1)


def pose_points(t: dict[str, torch.Tensor], p: torch.Tensor) -> torch.Tensor:
    return t["c"] + p @ quat_to_matrix(t["quat"]).T


# ---------------------------------------------------------------------------
# public numpy surface


def _basis_t(u, w, domain, dtype=torch.float64):
    return torch.tensor(hat_basis(np.atleast_1d(u), domain.knots(w)), dtype=dtype)


def _finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite {what}")
    return arr


def eval_primitive(m: MaterialCoord, g: GlobalParams, domain: DomainConfig = DomainConfig()) -> np.ndarray:
    """Blended primitive ``e(m)`` without offsets or pose."""
    check_coord(m, domain)
    for arr in g.as_dict().values():
        _finite(np.asarray(arr), "parameter value")
    t = g.tensors()
    t["offsets"] = torch.zeros_like(t["offsets"])
    u, v, w = m
    p = shape_points(t, w, _basis_t(u, w, domain), torch.tensor([u], dtype=torch.float64),
                     torch.tensor([v], dtype=torch.float64))
    return _finite(p[0].numpy(), "primitive position")


def apply_axis_offset(p, m: MaterialCoord, g: GlobalParams, domain: DomainConfig = DomainConfig()) -> np.ndarray:
    check_coord(m, domain)
    u, _, w = m
    p = np.asarray(p, dtype=float)
    dx = g.offset_function(w, 0, domain)(u)
    dy = g.offset_function(w, 1, domain)(u)
    return _finite(np.array([p[0] + dx, p[1] + dy, p[2]]), "offset position")


def rotation_matrix(quat) -> np.ndarray:
    q = np.asarray(quat, dtype=float)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or abs(n - 1.0) > QUAT_TOL:
        raise NumericError(f"quaternion norm {n} is not 1")
    return quat_to_matrix(torch.tensor(q, dtype=torch.float64)).numpy()


def apply_pose(p, g: GlobalParams) -> np.ndarray:
    """``c + R p`` for one point or an ``(n, 3)`` array."""
    R = rotation_matrix(g.quat)
    p = np.asarray(p, dtype=float)
    return _finite(g.c + p @ R.T, "posed position")


@dataclass
class SurfaceSample:
    """Row-major ``(u, v)`` grid of one surface with evaluated positions."""

    u: np.ndarray
    v: np.ndarray
    w: int
    positions: np.ndarray  # (len(u) * len(v), 3)

    def __post_init__(self):
        if self.positions.shape != (len(self.u) * len(self.v), 3):
            raise ValueError("positions do not match the (u, v) grid")

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.u), len(self.v)

    @property
    def coords(self) -> np.ndarray:
        """``(n, 3)`` array of ``(u, v, w)`` in row-major order."""
        uu, vv = np.meshgrid(self.u, self.v, indexing="ij")
        return np.column_stack([uu.ravel(), vv.ravel(), np.full(uu.size, self.w, float)])

    def index(self, i: int, j: int) -> int:
        return i * len(self.v) + (j % len(self.v))

    def grid_positions(self) -> np.ndarray:
        return self.positions.reshape(len(self.u), len(self.v), 3)

    def with_positions(self, positions: np.ndarray) -> "SurfaceSample":
        return SurfaceSample(self.u, self.v, self.w, np.asarray(positions, dtype=float))


def grid_tensors(domain: DomainConfig, w: int, grid_u=None, grid_v=None, dtype=torch.float64):
    """Flattened ``(B, u, v)`` tensors of a surface grid plus its numpy axes."""
    u, v = domain.grid(w, grid_u, grid_v)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    B = hat_basis(uu.ravel(), domain.knots(w))
    return (torch.tensor(B, dtype=dtype), torch.tensor(uu.ravel(), dtype=dtype),
            torch.tensor(vv.ravel(), dtype=dtype), u, v)


def sample_surface(g: GlobalParams, domain: DomainConfig, w: int, grid_u=None, grid_v=None) -> SurfaceSample:
    """Posed, offset primitive on the uniform material grid of surface ``w``."""
    if w not in SURFACES:
        raise DomainError(f"surface index {w} not in {{0,1,2}}")
    rotation_matrix(g.quat)
    B, uu, vv, u, v = grid_tensors(domain, w, grid_u, grid_v)
    t = g.tensors()
    p = pose_points(t, shape_points(t, w, B, uu, vv)).numpy()
    return SurfaceSample(u, v, w, _finite(p, "surface position"))
