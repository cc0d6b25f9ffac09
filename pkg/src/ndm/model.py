"""The full neural deformable model ``q = c + R (s + d)``.

The local deformation ``d`` is the displacement produced by integrating one
velocity field per surface; it acts in the model frame, before the pose.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.spatial.transform import Rotation

from .flow import FlowConfig, VelocityField, rk4
from .geometry import (SURFACES, DomainConfig, GlobalParams, SurfaceSample, grid_tensors,
                       pose_points, shape_points)
from .mesh import TriMesh, triangulate


def _quat_wxyz(R: np.ndarray) -> np.ndarray:
    x, y, z, w = Rotation.from_matrix(R).as_quat()
    return np.array([w, x, y, z])


def _matrix(quat) -> np.ndarray:
    w, x, y, z = np.asarray(quat, float) / np.linalg.norm(quat)
    return Rotation.from_quat([x, y, z, w]).as_matrix()


def surface_forward(t: dict, w: int, B, uu, vv, field=None, steps: int = 8):
    """Posed positions ``Q'`` and model-frame displacement ``q_d`` on one grid."""
    s = shape_points(t, w, B, uu, vv)
    if field is None:
        return pose_points(t, s), torch.zeros_like(s)
    moved = rk4(field, s, steps, check=False)
    return pose_points(t, moved), moved - s


@dataclass
class NdmModel:
    params: GlobalParams
    flows: list[VelocityField] = field(default_factory=lambda: [VelocityField() for _ in SURFACES])
    domain: DomainConfig = field(default_factory=DomainConfig)
    flow_cfg: FlowConfig = field(default_factory=FlowConfig)

    def __post_init__(self):
        if len(self.flows) != 3:
            raise ValueError("one velocity field per surface")
        if self.params.n_knots != self.domain.n_knots:
            raise ValueError("knot count differs from the domain")

    def copy(self) -> "NdmModel":
        return NdmModel(self.params.copy(), [f.copy() for f in self.flows], self.domain, self.flow_cfg)

    def has_flow(self, w: int) -> bool:
        return not self.flows[w].is_zero()

    def evaluate(self, w: int, grid_u=None, grid_v=None, flow: bool = True):
        """``(SurfaceSample of Q', q_d)`` on the uniform grid of surface ``w``."""
        B, uu, vv, u, v = grid_tensors(self.domain, w, grid_u, grid_v)
        t = self.params.tensors()
        f = self.flows[w].torch_field() if flow and self.has_flow(w) else None
        with torch.no_grad():
            q, qd = surface_forward(t, w, B, uu, vv, f, self.flow_cfg.steps)
        return SurfaceSample(u, v, w, q.numpy()), qd.numpy()

    def sample(self, w: int, grid_u=None, grid_v=None, flow: bool = True) -> SurfaceSample:
        return self.evaluate(w, grid_u, grid_v, flow)[0]

    def global_sample(self, w: int, grid_u=None, grid_v=None) -> SurfaceSample:
        """Globally deformed primitive ``s_g`` (posed, no local flow)."""
        return self.sample(w, grid_u, grid_v, flow=False)

    def mesh(self, w: int, grid_u=None, grid_v=None) -> TriMesh:
        return triangulate(self.sample(w, grid_u, grid_v))

    def meshes(self, grid_u=None, grid_v=None) -> list[TriMesh]:
        return [self.mesh(w, grid_u, grid_v) for w in SURFACES]

    def model_frame(self, points: np.ndarray) -> np.ndarray:
        R = _matrix(self.params.quat)
        return (np.asarray(points, float) - self.params.c) @ R

    def transformed(self, scale: float, R: np.ndarray, t: np.ndarray) -> "NdmModel":
        """Exact model for the similarity ``x -> scale * R x + t`` of world space."""
        g = self.params.copy()
        R = np.asarray(R, float)
        g.c = scale * (R @ self.params.c) + np.asarray(t, float)
        g.quat = _quat_wxyz(R @ _matrix(self.params.quat))
        g.log_a0 = self.params.log_a0 + np.log(scale)
        g.offsets = self.params.offsets * scale
        flows = []
        for f in self.flows:
            f = f.copy()
            f.length_scale = f.length_scale * scale
            flows.append(f)
        return NdmModel(g, flows, self.domain, self.flow_cfg)
