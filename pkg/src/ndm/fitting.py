"""Per-instance fitting of the neural deformable model to a labelled point cloud.

The objective is ``L = L_geo + lambda_d L_d + lambda_s L_s`` summed over the
three surfaces, where ``L_geo`` is the symmetric Chamfer distance between
grid samples of the model and the target points of the matching label.
Parameters are unlocked in four stages (pose and scale, aspect functions,
axis offsets, local flow), each optimized with Adam.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from scipy.spatial import cKDTree

from .flow import FlowConfig, VelocityField, n_weights
from .geometry import (LV_ENDO, LV_EPI, RV, SURFACES, U_MIN, DomainConfig, GlobalParams, NumericError,
                       grid_tensors)
from .metrics import LabeledPointCloud
from .model import NdmModel, _matrix, _quat_wxyz, surface_forward
from .template import apply_fold, rv_profile, slave_fold

log = logging.getLogger(__name__)

GLOBAL_BLOCKS = ("c", "quat", "log_a0", "aspect", "rv_a2_alt", "offsets")
STAGE_BLOCKS = {1: ("c", "quat", "log_a0"), 2: ("aspect", "rv_a2_alt"), 3: ("offsets",), 4: ("flow",)}
STAGE_NAMES = {1: "pose+scale", 2: "aspect", 3: "offsets", 4: "flow"}


class FitError(NumericError):
    def __init__(self, stage: int, msg: str):
        super().__init__(f"stage {stage}: {msg}")
        self.stage = stage


@dataclass(frozen=True)
class FitConfig:
    """Optimization schedule.

    ``grids`` gives the ``(grid_u, grid_v)`` material grid sampled per surface
    during fitting; the defaults hold 5000, 5500 and 5000 points.
    """

    iters: tuple[int, ...] = (400, 400, 300, 900)
    stages: int = 4  # run stages 1..stages
    learning_rate: float = 5e-4
    lambda_d: float = 0.1
    lambda_s: float = 0.05
    lambda_k: float = 1.0  # knot curvature prior on parameter-function updates
    flow_weight_decay: float = 3e-3  # L2 decay on velocity weights (Lipschitz control)
    grids: tuple[tuple[int, int], ...] = ((50, 100), (55, 100), (50, 100))
    seed: int = 0
    dtype: str = "float32"
    flow_steps: int = 8
    divergence_factor: float = 1e3
    divergence_patience: int = 100
    # initial twists about the long axis (degrees); stages 1-2 run from each
    # and the lowest stage-2 loss is kept
    twist_starts: tuple[float, ...] = (0.0, -5.0, 5.0, -10.0, 10.0)

    def __post_init__(self):
        if len(self.iters) != 4 or any(int(i) <= 0 for i in self.iters):
            raise ValueError("iters must hold four positive counts")
        if not 1 <= self.stages <= 4:
            raise ValueError("stages must be within 1..4")
        if min(self.lambda_d, self.lambda_s, self.lambda_k, self.flow_weight_decay) < 0:
            raise ValueError("regularizer weights must be non-negative")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if len(self.grids) != 3 or any(g[0] < 2 or g[1] < 3 for g in self.grids):
            raise ValueError("one grid of at least 2x3 per surface")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if not self.twist_starts or not all(math.isfinite(a) for a in self.twist_starts):
            raise ValueError("twist_starts must hold at least one finite angle")

    @property
    def samples(self) -> tuple[int, ...]:
        return tuple(u * v for u, v in self.grids)

    @property
    def torch_dtype(self):
        return torch.float32 if self.dtype == "float32" else torch.float64

    def ablation(self) -> "FitConfig":
        """Same schedule without local-deformation regularizers."""
        return replace(self, lambda_d=0.0, lambda_s=0.0)


# Reduced sampling grids (1250 points per surface) and a shorter flow stage;
# about a minute per fit on one CPU core.
DESK = FitConfig(iters=(400, 400, 300, 300), grids=((25, 50),) * 3)


@dataclass
class LossParts:
    geo: float
    d: float
    s: float
    total: float
    per_surface: tuple[float, ...] = ()


@dataclass
class FitReport:
    traces: dict[int, np.ndarray] = field(default_factory=dict)  # stage -> total loss per iteration
    final: LossParts | None = None
    wall_time: float = 0.0
    stage_times: dict[int, float] = field(default_factory=dict)
    config: FitConfig | None = None
    twist: float = 0.0  # selected initial twist (degrees)

    def best_so_far(self, stage: int) -> np.ndarray:
        return np.minimum.accumulate(self.traces[stage])


# ---------------------------------------------------------------------------
# losses on tensors


def safe_norm(x: torch.Tensor) -> torch.Tensor:
    """Row norms with a zero (sub)gradient at the origin."""
    sq = torch.sum(x * x, dim=-1)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def _as_tensor(x, dtype=torch.float64):
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, float), dtype=dtype)


def nn_assign(pred: np.ndarray, target: np.ndarray, target_tree=None):
    """Nearest-neighbour indices ``pred -> target`` and ``target -> pred``."""
    target_tree = target_tree or cKDTree(target)
    return target_tree.query(pred)[1], cKDTree(pred).query(target)[1]


def chamfer_tensor(pred: torch.Tensor, target: torch.Tensor, assignment=None) -> torch.Tensor:
    """Symmetric unsquared Chamfer with assignments held constant."""
    if pred.shape[0] == 0 or target.shape[0] == 0:
        raise ValueError("empty point set")
    if assignment is None:
        assignment = nn_assign(pred.detach().cpu().numpy().astype(float),
                               target.detach().cpu().numpy().astype(float))
    i_pt, i_tp = (torch.as_tensor(a, dtype=torch.long) for a in assignment)
    return 0.5 * (safe_norm(pred - target[i_pt]).mean() + safe_norm(target - pred[i_tp]).mean())


def magnitude_tensor(qd: torch.Tensor) -> torch.Tensor:
    return torch.sum(qd * qd, dim=-1).mean()


def smoothness_tensor(qd: torch.Tensor, du: float, dv: float) -> torch.Tensor:
    """``mean |dq/du|^2 + mean |dq/dv|^2`` by forward differences; ``qd`` is ``(nu, nv, 3)``."""
    if qd.shape[0] < 2 or qd.shape[1] < 2:
        raise ValueError("smoothness needs a grid of at least 2x2")
    gu = (qd[1:] - qd[:-1]) / du
    gv = (torch.roll(qd, -1, dims=1) - qd) / dv
    return torch.sum(gu * gu, dim=-1).mean() + torch.sum(gv * gv, dim=-1).mean()


KNOT_BLOCKS = ("aspect", "rv_a2_alt", "offsets")


def knot_prior_tensor(t: dict, ref: dict) -> torch.Tensor:
    """Mean squared second difference of the knot updates ``theta - theta_ref``.

    Sparse slices leave parameter functions under-determined between planes;
    without this prior the rings drift onto the nearest plane and the
    latitude map stops being monotone (the mesh folds).
    """
    out = 0.0
    for k in KNOT_BLOCKS:
        d = t[k] - ref[k]
        dd = d[..., 2:] - 2 * d[..., 1:-1] + d[..., :-2]
        out = out + torch.mean(dd * dd)
    return out


def chart_bounds(domain: DomainConfig, w: int):
    """Knot pairs ``(inner, outer, factor)`` for the latitude-monotonicity projection.

    ``z(u) = a0 a3(u) sin u`` is strictly increasing on ``u <= pi/2`` when every
    knot farther from the equator satisfies ``a3_outer >= a3_inner / factor``
    with ``factor = 1 + h cot|u_outer|``.  Rings then sit in distinct planes,
    so the chart cannot fold (the RV's designed fold past the pole is exempt).
    """
    ku = domain.knots(w)
    h = float(ku[1] - ku[0])
    k0 = int(np.argmin(np.abs(ku)))
    pairs = []
    for k in range(k0 - 1, -1, -1):
        pairs.append((k + 1, k, 1.0 + h * abs(math.cos(ku[k])) / abs(math.sin(ku[k]))))
    for k in range(k0 + 1, len(ku)):
        if ku[k] > math.pi / 2 + 1e-9:
            break
        pairs.append((k - 1, k, 1.0 + h * abs(math.cos(ku[k])) / abs(math.sin(ku[k]))))
    return pairs


RV_WALL_MARGIN = math.log(1.05)


def project_chart(t: dict, domain: DomainConfig, bounds=None) -> None:
    """In-place feasibility projection of log-aspect knots (no-grad)."""
    bounds = bounds or [chart_bounds(domain, w) for w in SURFACES]
    with torch.no_grad():
        for w in SURFACES:
            la3 = t["aspect"][w, 2]
            for inner, outer, f in bounds[w]:
                lo = la3[inner] - math.log(f)
                if la3[outer] < lo:
                    la3[outer] = lo
        # septal wall strictly inside the free wall
        t["rv_a2_alt"].copy_(torch.minimum(t["rv_a2_alt"], t["aspect"][RV, 1] - RV_WALL_MARGIN))
        _slave_fold_tensors(t, domain)


def _slave_fold_tensors(t: dict, domain: DomainConfig) -> None:
    ku = domain.knots(RV)
    if not np.any(np.isclose(ku, math.pi / 2)):
        return
    a0 = math.exp(float(t["log_a0"][RV]))
    asp = np.exp(t["aspect"][RV].detach().double().numpy())
    alt = a0 * np.exp(t["rv_a2_alt"].detach().double().numpy())
    off = t["offsets"][RV].detach().double().numpy()
    a1, a2, a3, alt, ex, ey = apply_fold(ku, a0 * asp[0], a0 * asp[1], asp[2], alt, off[0], off[1])
    dt = t["aspect"].dtype
    t["aspect"][RV].copy_(torch.as_tensor(np.log(np.stack([a1 / a0, a2 / a0, a3])), dtype=dt))
    t["rv_a2_alt"].copy_(torch.as_tensor(np.log(alt / a0), dtype=dt))
    t["offsets"][RV].copy_(torch.as_tensor(np.stack([ex, ey]), dtype=dt))


# ---------------------------------------------------------------------------
# public numpy losses


def loss_geo(pred, target, label: int | None = None) -> float:
    """Chamfer between a sample (or point array) and the target points of its label."""
    P = pred.positions if hasattr(pred, "positions") else np.asarray(pred, float)
    if isinstance(target, LabeledPointCloud):
        w = pred.w if label is None and hasattr(pred, "w") else label
        T = target.surface(w) if w is not None else target.points
    else:
        T = np.asarray(target, float)
    with torch.no_grad():
        return float(chamfer_tensor(_as_tensor(P).reshape(-1, 3), _as_tensor(T).reshape(-1, 3)))


def loss_local_magnitude(qd) -> float:
    qd = np.concatenate([np.asarray(q, float).reshape(-1, 3) for q in qd]) if isinstance(qd, (list, tuple)) \
        else np.asarray(qd, float).reshape(-1, 3)
    with torch.no_grad():
        return float(magnitude_tensor(_as_tensor(qd)))


def loss_local_smoothness(qd, sample) -> float:
    nu, nv = sample.shape
    if nu < 2 or nv < 2:
        raise ValueError("smoothness needs a grid of at least 2x2")
    du = float(sample.u[1] - sample.u[0])
    dv = 2 * math.pi / nv
    with torch.no_grad():
        return float(smoothness_tensor(_as_tensor(qd).reshape(nu, nv, 3), du, dv))


# ---------------------------------------------------------------------------
# the fitting problem


class Problem:
    """Fixed sampling grids and target lookups for one fit."""

    def __init__(self, target: LabeledPointCloud, domain: DomainConfig, grids, dtype=torch.float64,
                 steps: int = 8):
        self.domain = domain
        self.dtype = dtype
        self.steps = steps
        self.grids = []
        self.targets = []
        self.trees = []
        self.target_np = []
        for w in SURFACES:
            nu, nv = grids[w]
            B, uu, vv, u, v = grid_tensors(domain, w, nu, nv, dtype)
            self.grids.append((B, uu, vv, nu, nv, float(u[1] - u[0]), 2 * math.pi / nv))
            T = target.surface(w)
            if not len(T):
                raise ValueError(f"target has no points with label {w}")
            self.targets.append(torch.as_tensor(T, dtype=dtype))
            self.target_np.append(T)
            self.trees.append(cKDTree(T))

    def evaluate(self, t: dict, fields, lambda_d: float, lambda_s: float, assignments=None):
        """Total loss tensor, per-part tensors and the NN assignments used."""
        geo = d = s = 0.0
        per, used = [], []
        for w in SURFACES:
            B, uu, vv, nu, nv, du, dv = self.grids[w]
            f = fields[w] if fields is not None else None
            Q, qd = surface_forward(t, w, B, uu, vv, f, self.steps)
            if not bool(torch.isfinite(Q.detach()).all()):
                raise NumericError(f"non-finite surface positions (surface {w})")
            a = assignments[w] if assignments is not None else \
                nn_assign(Q.detach().numpy().astype(float), self.target_np[w], self.trees[w])
            used.append(a)
            g_w = chamfer_tensor(Q, self.targets[w], a)
            per.append(g_w)
            geo = geo + g_w
            if f is not None and (lambda_d or lambda_s):
                d = d + magnitude_tensor(qd)
                s = s + smoothness_tensor(qd.reshape(nu, nv, 3), du, dv)
        total = geo + lambda_d * d + lambda_s * s
        return total, (geo, d, s, per), used


def _fields(model: NdmModel, flow_t, dtype):
    if flow_t is None:
        return None
    return [model.flows[w].torch_field(flow_t[w][0], flow_t[w][1], dtype) for w in SURFACES]


def _tensors(model: NdmModel, dtype, flow: bool):
    t = {k: v.requires_grad_(True) for k, v in model.params.tensors(dtype).items()}
    flow_t = None
    if flow:
        flow_t = [(torch.as_tensor(f.weights, dtype=dtype).requires_grad_(True),
                   torch.as_tensor(f.latent, dtype=dtype).requires_grad_(True)) for f in model.flows]
    return t, flow_t


def total_loss(model: NdmModel, target: LabeledPointCloud, cfg: FitConfig = FitConfig(),
               grids=None, assignments=None) -> tuple[float, LossParts]:
    """Objective value and its decomposition at the model's current parameters."""
    prob = Problem(target, model.domain, grids or cfg.grids, torch.float64, cfg.flow_steps)
    flow = any(model.has_flow(w) for w in SURFACES)
    with torch.no_grad():
        t, flow_t = _tensors(model, torch.float64, flow)
        L, (geo, d, s, per), _ = prob.evaluate(t, _fields(model, flow_t, torch.float64),
                                               cfg.lambda_d, cfg.lambda_s, assignments)
    parts = LossParts(float(geo), float(d), float(s), float(L), tuple(float(p) for p in per))
    return parts.total, parts


# ---------------------------------------------------------------------------
# flat parameter layout


def parameter_layout(model: NdmModel) -> list[tuple[str, int, tuple[int, ...]]]:
    """``(block name, surface or -1, shape)`` in flat-vector order."""
    out = [(k, -1, np.shape(getattr(model.params, k))) for k in GLOBAL_BLOCKS]
    for w in SURFACES:
        out.append(("flow", w, (n_weights(model.flows[w].layer_sizes),)))
        out.append(("latent", w, (model.flows[w].latent_dim,)))
    return out


def pack(model: NdmModel) -> np.ndarray:
    parts = [np.ravel(getattr(model.params, k)) for k in GLOBAL_BLOCKS]
    for f in model.flows:
        parts += [f.weights, f.latent]
    return np.concatenate(parts).astype(float)


def unpack(model: NdmModel, vec) -> NdmModel:
    out = model.copy()
    off = 0
    for name, w, shape in parameter_layout(model):
        n = int(np.prod(shape))
        chunk = np.asarray(vec[off:off + n], float).reshape(shape)
        off += n
        if name == "flow":
            out.flows[w].weights = chunk.copy()
        elif name == "latent":
            out.flows[w].latent = chunk.copy()
        else:
            setattr(out.params, name, chunk.copy())
    return out


def block_mask(model: NdmModel, stage: int) -> np.ndarray:
    """Boolean mask of the coordinates unlocked after ``stage``."""
    unlocked = {b for s in range(1, stage + 1) for b in STAGE_BLOCKS[s]}
    if "flow" in unlocked:
        unlocked.add("latent")
    return np.concatenate([np.full(int(np.prod(shape)), name in unlocked)
                           for name, _, shape in parameter_layout(model)])


def gradient(model: NdmModel, target: LabeledPointCloud, cfg: FitConfig = FitConfig(), stage: int = 4,
             grids=None, assignments=None) -> np.ndarray:
    """Exact gradient of the objective in :func:`pack` layout; locked blocks are zero.

    Nearest-neighbour assignments are held constant (and recomputed when not
    supplied), so the result is the gradient of a smooth function that
    agrees with the objective at the current parameters.
    """
    prob = Problem(target, model.domain, grids or cfg.grids, torch.float64, cfg.flow_steps)
    flow = stage >= 4
    t, flow_t = _tensors(model, torch.float64, flow)
    L, _, _ = prob.evaluate(t, _fields(model, flow_t, torch.float64), cfg.lambda_d, cfg.lambda_s,
                            assignments)
    if not math.isfinite(float(L.detach())):
        raise NumericError("objective is not finite")
    L.backward()
    parts = []
    for k in GLOBAL_BLOCKS:
        g = t[k].grad
        parts.append(np.zeros(t[k].numel()) if g is None else g.numpy().ravel())
    for w in SURFACES:
        for i, name in ((0, "flow"), (1, "latent")):
            if flow_t is None or flow_t[w][i].grad is None:
                n = n_weights(model.flows[w].layer_sizes) if i == 0 else model.flows[w].latent_dim
                parts.append(np.zeros(n))
            else:
                parts.append(flow_t[w][i].grad.numpy().copy())
    vec = np.concatenate(parts)
    mask = block_mask(model, stage)
    vec = np.where(mask, vec, 0.0)
    if not np.all(np.isfinite(vec)):
        off = 0
        for name, w, shape in parameter_layout(model):
            n = int(np.prod(shape))
            if not np.all(np.isfinite(vec[off:off + n])):
                raise NumericError(f"non-finite gradient in block {name}" + (f"[{w}]" if w >= 0 else ""))
            off += n
    return vec


def assignments_at(model: NdmModel, target: LabeledPointCloud, grids) -> list:
    """NN assignments of every surface at the model's current parameters."""
    prob = Problem(target, model.domain, grids, torch.float64)
    out = []
    for w in SURFACES:
        Q = model.sample(w, *grids[w], flow=True).positions
        out.append(nn_assign(Q, prob.target_np[w], prob.trees[w]))
    return out


# ---------------------------------------------------------------------------
# initialization


def _principal_axis(P: np.ndarray) -> np.ndarray:
    c = P.mean(0)
    _, _, Vt = np.linalg.svd(P - c, full_matrices=False)
    return Vt[0]


def initial_model(target: LabeledPointCloud, domain: DomainConfig = DomainConfig()) -> NdmModel:
    """Data-driven starting point: LV long axis by PCA, RV on +y, radii from the equator."""
    endo, epi, rv = (target.surface(w) for w in SURFACES)
    lv = np.concatenate([endo, epi])
    z = _principal_axis(epi if len(epi) > 10 else lv)
    h = (lv - lv.mean(0)) @ z
    lo, hi = np.quantile(h, [0.15, 0.85])
    r_of = lambda sel: np.mean(np.linalg.norm((lv[sel] - lv.mean(0)) - np.outer(h[sel], z), axis=1))
    # the apex is the tapered end
    if r_of(h <= lo) > r_of(h >= hi):
        z = -z
    y = rv.mean(0) - lv.mean(0)
    y = y - (y @ z) * z
    if np.linalg.norm(y) < 1e-12:
        y = np.cross(z, [1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.cross(z, [0.0, 1.0, 0.0])
    y /= np.linalg.norm(y)
    x = np.cross(y, z)
    R = np.column_stack([x, y, z])

    o = lv.mean(0)
    loc = lambda P: (P - o) @ R
    e_epi, e_endo, e_rv = loc(epi), loc(endo), loc(rv)
    s_epi = math.sin(domain.alpha[LV_EPI])
    A = (e_epi[:, 2].max() - e_epi[:, 2].min()) / (1 + s_epi)
    zc = e_epi[:, 2].min() + A
    centre_xy = np.median(e_epi[:, :2], axis=0)
    shift = np.array([centre_xy[0], centre_xy[1], zc])
    e_epi, e_endo, e_rv = e_epi - shift, e_endo - shift, e_rv - shift

    g = GlobalParams.identity(domain.n_knots)
    g.c = o + R @ shift
    g.quat = _quat_wxyz(R)
    K = domain.n_knots
    for w, P, Aw in ((LV_ENDO, e_endo, max(-e_endo[:, 2].min(), 1e-3)), (LV_EPI, e_epi, A)):
        band = np.abs(P[:, 2]) < 0.25 * Aw
        Q = P[band] if band.sum() >= 10 else P
        rx = math.sqrt(2 * np.mean(Q[:, 0] ** 2))
        ry = math.sqrt(2 * np.mean(Q[:, 1] ** 2))
        g.log_a0[w] = math.log(Aw)
        g.aspect[w, 0] = np.full(K, math.log(rx / Aw))
        g.aspect[w, 1] = np.full(K, math.log(ry / Aw))
        g.aspect[w, 2] = np.zeros(K)

    # RV crescent from its extents near the LV equator
    depth = max(-e_rv[:, 2].min(), 0.2 * A)
    top = max(e_rv[:, 2].max(), 0.2 * A)
    band = np.abs(e_rv[:, 2]) < 0.25 * depth
    Q = e_rv[band] if band.sum() >= 10 else e_rv
    ex = 0.5 * (Q[:, 0].max() + Q[:, 0].min())
    A1 = 0.5 * (Q[:, 0].max() - Q[:, 0].min())
    mid = np.abs(Q[:, 0] - ex) < 0.25 * A1
    M = Q[mid] if mid.sum() >= 4 else Q
    r_epi = math.exp(g.log_a0[LV_EPI] + g.aspect[LV_EPI, 1, 0])
    gap = 0.1 * r_epi
    # the template puts the septum apex at r_epi + gap; the free wall then sits A2 - A_alt beyond it
    A_alt = r_epi
    A2 = max(M[:, 1].max() - gap, A_alt + 2 * gap)
    la1, la2, la3, lalt, eyo = rv_profile(g, domain, depth, top, A1, A_alt, A2, gap, ex)
    g.log_a0[RV] = math.log(depth)
    g.aspect[RV] = np.stack([la1, la2, la3])
    g.rv_a2_alt = lalt
    g.offsets[RV, 0] = ex
    g.offsets[RV, 1] = eyo
    slave_fold(g, domain)
    return NdmModel(g, domain=domain)


def init_flows(model: NdmModel, seed: int) -> list[VelocityField]:
    out = []
    for w in SURFACES:
        rng = np.random.default_rng([seed, 4, w])
        out.append(VelocityField.random(rng, model.flows[w].layer_sizes, zero_last=True))
    return out


# ---------------------------------------------------------------------------
# staged optimization


def _run_stage(model: NdmModel, prob: Problem, cfg: FitConfig, stage: int, report: FitReport,
               ref: GlobalParams) -> NdmModel:
    dtype = cfg.torch_dtype
    flow = stage >= 4
    t, flow_t = _tensors(model, dtype, flow)
    ref_t = {k: v for k, v in ref.tensors(dtype).items() if k in KNOT_BLOCKS}
    lam_k = cfg.lambda_k if stage >= 2 else 0.0
    bounds = [chart_bounds(model.domain, w) for w in SURFACES]
    unlocked = [k for s in range(1, stage + 1) for k in STAGE_BLOCKS[s] if k != "flow"]
    for k in GLOBAL_BLOCKS:
        if k not in unlocked:
            t[k].requires_grad_(False)
    groups = [{"params": [t[k] for k in unlocked]}]
    if flow:
        groups.append({"params": [pair[0] for pair in flow_t], "weight_decay": cfg.flow_weight_decay})
        groups.append({"params": [pair[1] for pair in flow_t]})
    opt = torch.optim.Adam(groups, lr=cfg.learning_rate)
    lam_d, lam_s = (cfg.lambda_d, cfg.lambda_s) if flow else (0.0, 0.0)
    n = int(cfg.iters[stage - 1])
    trace = np.empty(n)
    first = None
    bad = 0
    for it in range(n):
        opt.zero_grad(set_to_none=True)
        try:
            L, _, _ = prob.evaluate(t, _fields(model, flow_t, dtype), lam_d, lam_s)
        except NumericError as e:
            raise FitError(stage, f"{e} at iteration {it}") from e
        if lam_k:
            L = L + lam_k * knot_prior_tensor(t, ref_t)
        val = float(L.detach())
        if not math.isfinite(val):
            raise FitError(stage, f"non-finite loss at iteration {it}")
        trace[it] = val
        first = val if first is None else first
        bad = bad + 1 if val > cfg.divergence_factor * first else 0
        if bad >= cfg.divergence_patience:
            raise FitError(stage, f"diverged (loss {val:.3g} vs initial {first:.3g})")
        L.backward()
        opt.step()
        with torch.no_grad():
            t["quat"] /= torch.linalg.norm(t["quat"])
        if stage >= 2:
            project_chart(t, model.domain, bounds)
    report.traces[stage] = trace
    with torch.no_grad():
        g = GlobalParams.from_tensors({k: v.detach().to(torch.float64) for k, v in t.items()})
    out = NdmModel(g, [f.copy() for f in model.flows], model.domain, model.flow_cfg)
    if flow:
        for w in SURFACES:
            out.flows[w].weights = flow_t[w][0].detach().to(torch.float64).numpy().copy()
            out.flows[w].latent = flow_t[w][1].detach().to(torch.float64).numpy().copy()
    return out


def twisted(model: NdmModel, degrees: float) -> NdmModel:
    """Copy of ``model`` rotated by ``degrees`` about its own long (z) axis."""
    out = model.copy()
    if degrees:
        h = math.radians(degrees) / 2
        w, x, y, z = out.params.quat
        c, s = math.cos(h), math.sin(h)
        out.params.quat = np.array([w * c - z * s, x * c + y * s, y * c - x * s, z * c + w * s])
    return out


def _timed_stage(model, prob, cfg, stage, report, ref):
    ts = time.perf_counter()
    model = _run_stage(model, prob, cfg, stage, report, ref)
    report.stage_times[stage] = time.perf_counter() - ts
    log.info("stage %d (%s): loss %.6g -> %.6g in %.1fs", stage, STAGE_NAMES[stage],
             report.traces[stage][0], report.traces[stage][-1], report.stage_times[stage])
    return model


def fit(target: LabeledPointCloud, cfg: FitConfig = FitConfig(), domain: DomainConfig = DomainConfig(),
        init: NdmModel | None = None, start_stage: int = 1) -> tuple[NdmModel, FitReport]:
    """Staged fit of all three surfaces to a normalized labelled cloud.

    ``init`` with ``start_stage > 1`` resumes from a saved intermediate
    model; every stage starts a fresh optimizer, so a resumed run follows
    the same trajectory as an uninterrupted one.
    """
    if target.frame != "normalized":
        raise ValueError("fit expects a normalized target cloud")
    if not target.has_all_labels():
        raise ValueError("target needs LV-endo, LV-epi and RV points")
    torch.manual_seed(cfg.seed)
    t0 = time.perf_counter()
    model = init.copy() if init is not None else initial_model(target, domain)
    ref = model.params if init is None or start_stage == 1 else initial_model(target, model.domain).params
    model.flow_cfg = FlowConfig(cfg.flow_steps)
    prob = Problem(target, model.domain, cfg.grids, cfg.torch_dtype, cfg.flow_steps)
    report = FitReport(config=cfg)
    stage = start_stage
    if start_stage == 1 and len(cfg.twist_starts) > 1:
        # the LV is nearly axisymmetric, so the twist has competing basins
        last = min(cfg.stages, 2)
        best = None
        for deg in cfg.twist_starts:
            cand, rep = twisted(model, deg), FitReport(config=cfg)
            for k in range(1, last + 1):
                cand = _timed_stage(cand, prob, cfg, k, rep, ref)
            val = total_loss(cand, target, cfg)[0]
            log.info("twist %+.1f deg: stage-%d loss %.6g", deg, last, val)
            if best is None or val < best[0]:
                best = (val, cand, rep, deg)
        _, model, report, report.twist = best
        stage = last + 1
    for stage in range(stage, cfg.stages + 1):
        if stage == 4 and not any(model.has_flow(w) for w in SURFACES):
            model.flows = init_flows(model, cfg.seed)
        model = _timed_stage(model, prob, cfg, stage, report, ref)
    _, report.final = total_loss(model, target, cfg)
    report.wall_time = time.perf_counter() - t0
    return model, report


# ---------------------------------------------------------------------------
# parameter curves


CURVE_COLUMNS = ("u", "a1p", "a2p", "a3p", "e1", "e2")


def parameter_curves(model: NdmModel, w: int, n: int = 64) -> np.ndarray:
    """``(u, a1 cos u, a2 cos u, a3 sin u, e_xo, e_yo)`` rows on ``n`` latitudes.

    For the RV an extra column holds ``a2_alt cos u`` of the septal half.
    """
    d = model.domain
    u = np.linspace(U_MIN, d.alpha[w], n)
    g = model.params
    cols = [u,
            g.aspect_function(w, 0, d)(u) * np.cos(u),
            g.aspect_function(w, 1, d)(u) * np.cos(u),
            g.aspect_function(w, 2, d)(u) * np.sin(u),
            g.offset_function(w, 0, d)(u),
            g.offset_function(w, 1, d)(u)]
    if w == RV:
        cols.append(g.aspect_function(w, 1, d, alt=True)(u) * np.cos(u))
    return np.column_stack(cols)
