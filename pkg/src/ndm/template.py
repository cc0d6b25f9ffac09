"""Right-ventricle template shared by the phantom generator and fit initialization.

The RV is a blended crescent: the ``v > 0`` half is the free wall and the
``v < 0`` half the septal wall, joined along a seam at ``y = e_yo(u)``.
"""
from __future__ import annotations

import math

import numpy as np

from .geometry import LV_EPI, RV, U_MIN, DomainConfig, GlobalParams, hat_basis

FOLD_TUBE = 0.12  # tube width as a fraction of the equatorial lumen
FOLD_DROP = 0.9  # height of the tube's first ring as a fraction of the pole height


def _lv_section(g: GlobalParams, d: DomainConfig, z: float):
    """Centre and semi-axes ``(cx, cy, rx, ry)`` of the LV epicardium at height ``z``.

    Heights above the base reuse the base section.
    """
    A = float(np.exp(g.log_a0[LV_EPI]))
    ku = d.knots(LV_EPI)
    uu = np.linspace(U_MIN, d.alpha[LV_EPI], 400)
    B = hat_basis(uu, ku)
    zz = A * np.exp(B @ g.aspect[LV_EPI, 2]) * np.sin(uu)
    u = float(np.interp(z, zz, uu))  # zz is increasing for the small jitter used
    b = hat_basis(np.array([u]), ku)[0]
    c = math.cos(u)
    return (float(b @ g.offsets[LV_EPI, 0]), float(b @ g.offsets[LV_EPI, 1]),
            float(A * np.exp(b @ g.aspect[LV_EPI, 0]) * c), float(A * np.exp(b @ g.aspect[LV_EPI, 1]) * c))


def _seam_offset(sec, gap, x_half, y_half, ex, n=181):
    """Smallest seam ``e`` putting the septal half-ellipse outside the inflated LV section."""
    cx, cy, rx, ry = sec
    rx, ry = rx + gap, ry + gap
    v = np.linspace(0.0, math.pi, n)
    X = x_half * np.cos(v) + ex - cx
    Y = y_half * np.sin(v)
    inside = np.abs(X) < rx
    if not inside.any():
        return cy
    need = cy + ry * np.sqrt(1.0 - (X[inside] / rx) ** 2) - Y[inside]
    return float(need.max())


def rv_profile(g: GlobalParams, d: DomainConfig, depth: float, top: float, A1: float,
               A_alt: float, A2: float, gap: float, ex: float = 0.0, tube: float | None = None,
               drop: float | None = None):
    """RV knot values hugging the LV on its +y side.

    Below the top pole the septal wall keeps ``gap`` from the LV epicardium
    and is flattened where its curvature would cut into it.  Past the pole
    (``u > pi/2``) the chart folds back; the surface continues as a thin tube
    hanging down the middle of the lumen.  Returns log-aspects
    ``(a1, a2, a3)``, log ``a2_alt`` and the ``e_yo`` knots.
    """
    ku = d.knots(RV)
    half = math.pi / 2
    a0 = depth
    a3_top = top / a0
    a3k = np.where(ku < 0, 1.0, a3_top)
    a1k = np.full(len(ku), A1)
    a2k = np.full(len(ku), A2)
    altk = np.full(len(ku), A_alt)
    eyo = np.zeros(len(ku))
    z_base = float(np.exp(g.log_a0[LV_EPI])) * math.sin(d.alpha[LV_EPI])
    below = ku <= half + 1e-9
    for k in np.flatnonzero(below):
        c = max(math.cos(ku[k]), 0.0)
        z = a0 * a3k[k] * math.sin(ku[k])
        sec = _lv_section(g, d, min(z, z_base))
        # flatten the septum where it would curve more tightly than the LV wall
        altk[k] = min(A_alt, A1 * A1 * max(c, 0.05) / (1.3 * (sec[3] + gap)))
        if z <= z_base or k == 0:
            eyo[k] = _seam_offset(sec, gap, A1 * c, altk[k] * c, ex)
        else:
            eyo[k] = eyo[k - 1]  # the LV is open above its base
    exk = np.full(len(ku), ex)
    a1k, a2k, a3k, altk, exk, eyo = apply_fold(ku, a1k, a2k, a3k, altk, exk, eyo, tube, drop)
    lg = lambda x: np.log(x / a0)
    return lg(a1k), lg(a2k), np.log(a3k), lg(altk), eyo


def apply_fold(ku, a1, a2, a3, alt, ex, ey, tube: float | None = None, drop: float | None = None):
    """Pole and fold knots of the RV derived from the knots below the pole.

    Widths ``a1, a2, alt`` are absolute (``a0`` times the aspect), ``a3`` is
    the plain aspect.  The pole knot tilts the dome so the fold leaves it
    into the lumen; knots past the pole describe a thin tube of width
    ``tube`` times the equatorial lumen, hanging at ``drop`` of the pole
    height along the lumen mid-line.  Knots without a pole are returned
    unchanged.  All inputs are copied.
    """
    tube = FOLD_TUBE if tube is None else tube
    drop = FOLD_DROP if drop is None else drop
    ku = np.asarray(ku, float)
    a1, a2, a3, alt, ex, ey = (np.array(x, dtype=float) for x in (a1, a2, a3, alt, ex, ey))
    half = math.pi / 2
    poles = np.flatnonzero(np.isclose(ku, half))
    if not len(poles):
        return a1, a2, a3, alt, ex, ey
    pole = int(poles[0])
    below = np.arange(pole)
    k0 = int(np.argmin(np.abs(ku)))
    alt[pole] = 0.05 * alt[below].max()
    ex[pole] = ex[pole - 1]
    ey[pole] = ey[pole - 1] + 0.5 * (ku[pole] - ku[pole - 1]) * (a2[pole - 1] + alt[pole])
    fold = np.arange(pole + 1, len(ku))
    if not len(fold):
        return a1, a2, a3, alt, ex, ey
    tube_a = tube * (a2[k0] - alt[k0])
    a1[fold] = tube_a
    a2[fold] = tube_a
    alt[fold] = 0.5 * tube_a  # distinct halves keep the tube from collapsing to a sheet
    a3[fold] = drop * a3[pole]
    ub = ku[:pole + 1]
    for k in fold:
        cu = abs(math.cos(ku[k]))
        uo = math.asin(min(1.0, drop * math.sin(ku[k])))
        co = math.cos(uo)
        ex[k] = np.interp(uo, ub, ex[:pole + 1])
        mid = 0.5 * (np.interp(uo, ub, a2[:pole + 1]) + np.interp(uo, ub, alt[:pole + 1]))
        ey[k] = np.interp(uo, ub, ey[:pole + 1]) + mid * co + 0.75 * tube_a * cu
    return a1, a2, a3, alt, ex, ey


def slave_fold(g: GlobalParams, d: DomainConfig, tube: float | None = None, drop: float | None = None) -> None:
    """Recompute the RV pole and fold knots of ``g`` in place."""
    ku = d.knots(RV)
    a0 = float(np.exp(g.log_a0[RV]))
    a1, a2, a3 = np.exp(g.aspect[RV]) * np.array([[a0], [a0], [1.0]])
    out = apply_fold(ku, a1, a2, a3, a0 * np.exp(g.rv_a2_alt), g.offsets[RV, 0], g.offsets[RV, 1], tube, drop)
    a1, a2, a3, alt, ex, ey = out
    g.aspect[RV] = np.log(np.stack([a1 / a0, a2 / a0, a3]))
    g.rv_a2_alt = np.log(alt / a0)
    g.offsets[RV, 0] = ex
    g.offsets[RV, 1] = ey
