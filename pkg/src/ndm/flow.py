"""Local deformation as a diffeomorphic point flow.

A velocity field ``v(x, t; z)`` (a small tanh MLP) is integrated with fixed-step
classical RK4 over ``t in [0, 1]``.  Gradients come from back-propagating
through the solver steps, not from an adjoint solve.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .geometry import NumericError, SurfaceSample

HIDDEN = (64, 64, 64)
LATENT_DIM = 16


class FlowError(NumericError):
    def __init__(self, step: int, msg: str = "non-finite state"):
        super().__init__(f"{msg} at RK4 step {step}")
        self.step = step


@dataclass(frozen=True)
class FlowConfig:
    steps: int = 8
    t_span: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


def layer_shapes(layer_sizes) -> list[tuple[tuple[int, int], tuple[int]]]:
    return [((o, i), (o,)) for i, o in zip(layer_sizes[:-1], layer_sizes[1:])]


def n_weights(layer_sizes) -> int:
    return sum(w[0] * w[1] + b[0] for w, b in layer_shapes(layer_sizes))


def default_layers(latent_dim: int = LATENT_DIM) -> tuple[int, ...]:
    return (4 + latent_dim, *HIDDEN, 3)


@dataclass
class VelocityField:
    """MLP velocity field with inputs ``(x / L, t, z)`` and output scaled by ``L``.

    ``weights`` is the flat concatenation of ``(W, b)`` per layer, row-major.
    ``length_scale`` lets a field defined on unit-scale coordinates act on
    millimetre-scale models.
    """

    layer_sizes: tuple[int, ...] = field(default_factory=default_layers)
    weights: np.ndarray = None
    latent: np.ndarray = None
    length_scale: float = 1.0

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        if self.layer_sizes[-1] != 3 or self.layer_sizes[0] < 4:
            raise ValueError("velocity field maps (x, t, z) -> R^3")
        if self.weights is None:
            self.weights = np.zeros(n_weights(self.layer_sizes))
        if self.latent is None:
            self.latent = np.zeros(self.latent_dim)
        self.weights = np.asarray(self.weights, dtype=float)
        self.latent = np.asarray(self.latent, dtype=float)
        if self.weights.shape != (n_weights(self.layer_sizes),):
            raise ValueError("weight vector does not match layer sizes")
        if self.latent.shape != (self.latent_dim,):
            raise ValueError("latent does not match the input layer")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.latent))):
            raise NumericError("non-finite velocity weights")

    @property
    def latent_dim(self) -> int:
        return self.layer_sizes[0] - 4

    @classmethod
    def random(cls, rng: np.random.Generator, layer_sizes=None, zero_last: bool = True,
               gain: float = 1.0, length_scale: float = 1.0) -> "VelocityField":
        """Uniform ``+-gain/sqrt(fan_in)`` init; last layer zero gives ``v = 0``."""
        layer_sizes = layer_sizes or default_layers()
        parts = []
        shapes = layer_shapes(layer_sizes)
        for k, ((o, i), _) in enumerate(shapes):
            bound = gain / np.sqrt(i)
            if zero_last and k == len(shapes) - 1:
                parts += [np.zeros(o * i), np.zeros(o)]
            else:
                parts += [rng.uniform(-bound, bound, o * i), rng.uniform(-bound, bound, o)]
        return cls(layer_sizes, np.concatenate(parts), None, length_scale)

    def is_zero(self) -> bool:
        return not np.any(self.weights)

    def copy(self) -> "VelocityField":
        return VelocityField(self.layer_sizes, self.weights.copy(), self.latent.copy(), self.length_scale)

    def torch_field(self, weights=None, latent=None, dtype=torch.float64):
        w = torch.as_tensor(self.weights, dtype=dtype) if weights is None else weights
        z = torch.as_tensor(self.latent, dtype=dtype) if latent is None else latent
        return MLPField(self.layer_sizes, w, z, self.length_scale)

    def __call__(self, x, t):
        with torch.no_grad():
            return self.torch_field()(torch.as_tensor(x, dtype=torch.float64), t).numpy()


class MLPField:
    """Callable ``(x, t) -> v`` over torch tensors; differentiable in its weights."""

    def __init__(self, layer_sizes, weights: torch.Tensor, latent: torch.Tensor, length_scale=1.0):
        self.layers = []
        off = 0
        for (o, i), _ in layer_shapes(layer_sizes):
            W = weights[off:off + o * i].reshape(o, i)
            off += o * i
            b = weights[off:off + o]
            off += o
            self.layers.append((W, b))
        self.scale = float(length_scale)
        W0, b0 = self.layers[0]
        # the latent is constant over points and time: fold it into the first bias
        self.W0x, self.w0t = W0[:, :3], W0[:, 3]
        self.b0 = b0 + W0[:, 4:] @ latent if latent.numel() else b0

    def __call__(self, x: torch.Tensor, t) -> torch.Tensor:
        h = torch.tanh((x / self.scale) @ self.W0x.T + (self.b0 + t * self.w0t))
        for W, b in self.layers[1:-1]:
            h = torch.tanh(h @ W.T + b)
        W, b = self.layers[-1]
        return (h @ W.T + b) * self.scale


@dataclass(frozen=True)
class LinearField:
    """``v(x, t) = A x + b``; closed-form reference for integrator tests."""

    A: np.ndarray
    b: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __call__(self, x, t):
        A = torch.as_tensor(self.A, dtype=x.dtype)
        return x @ A.T + torch.as_tensor(self.b, dtype=x.dtype)


def rk4(f, x: torch.Tensor, steps: int, t0: float = 0.0, t1: float = 1.0, check: bool = True,
        direction: float = 1.0) -> torch.Tensor:
    """Classical RK4 of ``dx/dt = direction * f(x, t)`` from ``t0`` to ``t1``."""
    h = (t1 - t0) / steps
    for k in range(steps):
        t = t0 + k * h
        k1 = direction * f(x, t)
        k2 = direction * f(x + 0.5 * h * k1, t + 0.5 * h)
        k3 = direction * f(x + 0.5 * h * k2, t + 0.5 * h)
        k4 = direction * f(x + h * k3, t + h)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if check and not bool(torch.isfinite(x).all()):
            raise FlowError(k + 1)
    return x


def _as_field(vf):
    return vf.torch_field() if isinstance(vf, VelocityField) else vf


def _points(points) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(points, dtype=float), dtype=torch.float64)
    if not bool(torch.isfinite(x).all()):
        raise FlowError(0, "non-finite input")
    return x


def integrate_forward(points, vf, cfg: FlowConfig = FlowConfig()) -> np.ndarray:
    """``D(x, 1)`` from ``D(x, 0) = x``."""
    t0, t1 = cfg.t_span
    with torch.no_grad():
        return rk4(_as_field(vf), _points(points), cfg.steps, t0, t1).numpy()


def integrate_backward(points, vf, cfg: FlowConfig = FlowConfig()) -> np.ndarray:
    """Approximate inverse: integrate the negated field from ``t = 1`` back to ``0``."""
    t0, t1 = cfg.t_span
    f = _as_field(vf)
    with torch.no_grad():
        # reversed time with the variable s = t1 + t0 - t
        g = lambda x, s: f(x, t1 + t0 - s)
        return rk4(g, _points(points), cfg.steps, t0, t1, direction=-1.0).numpy()


def flow_displacement(sample: SurfaceSample, vf, cfg: FlowConfig = FlowConfig()):
    """Deformed sample and its per-point displacement ``q_d = Q' - s_g``."""
    moved = integrate_forward(sample.positions, vf, cfg)
    return sample.with_positions(moved), moved - sample.positions
