"""Axis-aligned bounding-volume hierarchy over triangles, with numba kernels
for nearest-triangle queries and non-adjacent triangle-pair intersection."""
from __future__ import annotations

import numpy as np
from numba import njit

LEAF_SIZE = 8


class BVH:
    """Median-split AABB tree; ``order[start:start+count]`` lists a leaf's faces."""

    def __init__(self, vertices: np.ndarray, faces: np.ndarray, leaf_size: int = LEAF_SIZE):
        self.V = np.ascontiguousarray(vertices, dtype=np.float64)
        self.F = np.ascontiguousarray(faces, dtype=np.int64)
        tri = self.V[self.F]
        tmin, tmax = tri.min(axis=1), tri.max(axis=1)
        cent = tri.mean(axis=1)
        order = np.arange(len(self.F))
        lo, hi, left, right, start, count = [], [], [], [], [], []

        def new_node(s, n):
            idx = order[s:s + n]
            lo.append(tmin[idx].min(axis=0))
            hi.append(tmax[idx].max(axis=0))
            left.append(-1)
            right.append(-1)
            start.append(s)
            count.append(n)
            return len(lo) - 1

        stack = [new_node(0, len(order))] if len(order) else []
        while stack:
            k = stack.pop()
            s, n = start[k], count[k]
            if n <= leaf_size:
                continue
            idx = order[s:s + n]
            c = cent[idx]
            axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
            half = n // 2
            part = np.argpartition(c[:, axis], half)
            order[s:s + n] = idx[part]
            left[k] = new_node(s, half)
            right[k] = new_node(s + half, n - half)
            count[k] = 0
            stack += [left[k], right[k]]
        self.lo = np.array(lo, dtype=np.float64).reshape(-1, 3)
        self.hi = np.array(hi, dtype=np.float64).reshape(-1, 3)
        self.left = np.array(left, dtype=np.int64)
        self.right = np.array(right, dtype=np.int64)
        self.start = np.array(start, dtype=np.int64)
        self.count = np.array(count, dtype=np.int64)
        self.order = order.astype(np.int64)

    def nearest(self, points: np.ndarray):
        """Squared distance, face index and closest point for each query point."""
        P = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        return _nearest(P, self.V, self.F, self.lo, self.hi, self.left, self.right,
                        self.start, self.count, self.order)

    def intersecting_faces(self, eps: float) -> np.ndarray:
        """Boolean mask of faces that properly intersect a vertex-disjoint face."""
        return _self_intersect(self.V, self.F, self.lo, self.hi, self.left, self.right,
                               self.start, self.count, self.order, eps)


# ---------------------------------------------------------------------------
# point-triangle


@njit(cache=True)
def _closest_on_segment(p, a, b):
    ab = b - a
    L = ab @ ab
    if L <= 0.0:
        return a
    t = min(max((p - a) @ ab / L, 0.0), 1.0)
    return a + t * ab


@njit(cache=True)
def closest_point_triangle(p, a, b, c):
    """Closest point on triangle ``abc`` to ``p`` (Voronoi-region case analysis)."""
    ab = b - a
    ac = c - a
    bc = c - b
    n = _cross(ab, ac)
    if n @ n <= 0.0 or ab @ ab <= 0.0 or ac @ ac <= 0.0 or bc @ bc <= 0.0:
        # degenerate (collinear or repeated vertices): nearest of the three edges
        best = _closest_on_segment(p, a, b)
        db = ((p - best) ** 2).sum()
        for q in (_closest_on_segment(p, b, c), _closest_on_segment(p, c, a)):
            dq = ((p - q) ** 2).sum()
            if dq < db:
                best = q
                db = dq
        return best
    ap = p - a
    d1 = ab @ ap
    d2 = ac @ ap
    if d1 <= 0.0 and d2 <= 0.0:
        return a
    bp = p - b
    d3 = ab @ bp
    d4 = ac @ bp
    if d3 >= 0.0 and d4 <= d3:
        return b
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        return a + (d1 / (d1 - d3)) * ab
    cp = p - c
    d5 = ab @ cp
    d6 = ac @ cp
    if d6 >= 0.0 and d5 <= d6:
        return c
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        return a + (d2 / (d2 - d6)) * ac
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return b + w * (c - b)
    denom = va + vb + vc
    if denom <= 0.0:
        return _closest_on_segment(p, a, b)
    v = vb / denom
    w = vc / denom
    return a + ab * v + ac * w


@njit(cache=True)
def _box_d2(p, lo, hi):
    d = 0.0
    for k in range(3):
        if p[k] < lo[k]:
            d += (lo[k] - p[k]) ** 2
        elif p[k] > hi[k]:
            d += (p[k] - hi[k]) ** 2
    return d


@njit(cache=True)
def _nearest(P, V, F, lo, hi, left, right, start, count, order):
    n = P.shape[0]
    best_d2 = np.full(n, np.inf)
    best_f = np.full(n, -1, dtype=np.int64)
    best_p = np.zeros((n, 3))
    stack = np.empty(128, dtype=np.int64)
    for q in range(n):
        p = P[q]
        top = 0
        stack[0] = 0
        top = 1
        while top > 0:
            top -= 1
            k = stack[top]
            if _box_d2(p, lo[k], hi[k]) >= best_d2[q]:
                continue
            if count[k] > 0:
                for s in range(start[k], start[k] + count[k]):
                    f = order[s]
                    cp = closest_point_triangle(p, V[F[f, 0]], V[F[f, 1]], V[F[f, 2]])
                    d2 = ((p - cp) ** 2).sum()
                    if d2 < best_d2[q]:
                        best_d2[q] = d2
                        best_f[q] = f
                        best_p[q] = cp
            else:
                l, r = left[k], right[k]
                dl = _box_d2(p, lo[l], hi[l])
                dr = _box_d2(p, lo[r], hi[r])
                # push the farther child first so the nearer one is popped next
                if dl < dr:
                    stack[top] = r
                    stack[top + 1] = l
                else:
                    stack[top] = l
                    stack[top + 1] = r
                top += 2
    return best_d2, best_f, best_p


# ---------------------------------------------------------------------------
# triangle-triangle


@njit(cache=True)
def _cross(a, b):
    return np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]])


@njit(cache=True)
def _orient2(a0, a1, b0, b1, c0, c1):
    return (b0 - a0) * (c1 - a1) - (b1 - a1) * (c0 - a0)


@njit(cache=True)
def _inside2(p0, p1, t, i, j, eps):
    s0 = _orient2(t[0, i], t[0, j], t[1, i], t[1, j], p0, p1)
    s1 = _orient2(t[1, i], t[1, j], t[2, i], t[2, j], p0, p1)
    s2 = _orient2(t[2, i], t[2, j], t[0, i], t[0, j], p0, p1)
    return (s0 > eps and s1 > eps and s2 > eps) or (s0 < -eps and s1 < -eps and s2 < -eps)


@njit(cache=True)
def _coplanar_overlap(T1, T2, n, eps2):
    ax = np.argmax(np.abs(n))
    i, j = (1, 2) if ax == 0 else ((0, 2) if ax == 1 else (0, 1))
    for a in range(3):
        p0, p1 = T1[a], T1[(a + 1) % 3]
        for b in range(3):
            q0, q1 = T2[b], T2[(b + 1) % 3]
            o1 = _orient2(p0[i], p0[j], p1[i], p1[j], q0[i], q0[j])
            o2 = _orient2(p0[i], p0[j], p1[i], p1[j], q1[i], q1[j])
            o3 = _orient2(q0[i], q0[j], q1[i], q1[j], p0[i], p0[j])
            o4 = _orient2(q0[i], q0[j], q1[i], q1[j], p1[i], p1[j])
            if ((o1 > eps2 and o2 < -eps2) or (o1 < -eps2 and o2 > eps2)) and \
               ((o3 > eps2 and o4 < -eps2) or (o3 < -eps2 and o4 > eps2)):
                return True
    c1 = (T1[0] + T1[1] + T1[2]) / 3.0
    c2 = (T2[0] + T2[1] + T2[2]) / 3.0
    return _inside2(c1[i], c1[j], T2, i, j, eps2) or _inside2(c2[i], c2[j], T1, i, j, eps2)


@njit(cache=True)
def _edges_cross(T1, d1, T2, n2, eps):
    """Does some edge of ``T1`` pass strictly through the interior of ``T2``?"""
    for a in range(3):
        b = (a + 1) % 3
        da, db = d1[a], d1[b]
        if (da > eps and db < -eps) or (da < -eps and db > eps):
            p = T1[a] + (da / (da - db)) * (T1[b] - T1[a])
            # barycentric sign test against the plane normal
            e0 = _cross(T2[1] - T2[0], p - T2[0]) @ n2
            e1 = _cross(T2[2] - T2[1], p - T2[1]) @ n2
            e2 = _cross(T2[0] - T2[2], p - T2[2]) @ n2
            if e0 > eps * eps and e1 > eps * eps and e2 > eps * eps:
                return True
    return False


@njit(cache=True)
def tri_tri_proper(T1, T2, eps):
    """True when two triangles share interior points (touching contact excluded)."""
    n1 = _cross(T1[1] - T1[0], T1[2] - T1[0])
    n2 = _cross(T2[1] - T2[0], T2[2] - T2[0])
    l1 = np.sqrt(n1 @ n1)
    l2 = np.sqrt(n2 @ n2)
    if l1 <= eps * eps or l2 <= eps * eps:
        return False
    n1 = n1 / l1
    n2 = n2 / l2
    d1 = np.empty(3)
    d2 = np.empty(3)
    for k in range(3):
        d1[k] = (T1[k] - T2[0]) @ n2
        d2[k] = (T2[k] - T1[0]) @ n1
    if (d1 > eps).all() or (d1 < -eps).all() or (d2 > eps).all() or (d2 < -eps).all():
        return False
    if (np.abs(d1) <= eps).all():
        return _coplanar_overlap(T1, T2, n2, eps * eps)
    return _edges_cross(T1, d1, T2, n2, eps) or _edges_cross(T2, d2, T1, n1, eps)


@njit(cache=True)
def _share_vertex(F, f, g):
    for a in range(3):
        for b in range(3):
            if F[f, a] == F[g, b]:
                return True
    return False


@njit(cache=True)
def _boxes_overlap(lo1, hi1, lo2, hi2):
    for k in range(3):
        if lo1[k] > hi2[k] or lo2[k] > hi1[k]:
            return False
    return True


@njit(cache=True)
def _test_pair(V, F, f, g, flags, eps):
    if f == g or _share_vertex(F, f, g):
        return
    if flags[f] and flags[g]:
        return
    T1 = np.empty((3, 3))
    T2 = np.empty((3, 3))
    for k in range(3):
        T1[k] = V[F[f, k]]
        T2[k] = V[F[g, k]]
    lo1 = np.minimum(np.minimum(T1[0], T1[1]), T1[2])
    hi1 = np.maximum(np.maximum(T1[0], T1[1]), T1[2])
    lo2 = np.minimum(np.minimum(T2[0], T2[1]), T2[2])
    hi2 = np.maximum(np.maximum(T2[0], T2[1]), T2[2])
    if not _boxes_overlap(lo1, hi1, lo2, hi2):
        return
    if tri_tri_proper(T1, T2, eps):
        flags[f] = True
        flags[g] = True


@njit(cache=True)
def _self_intersect(V, F, lo, hi, left, right, start, count, order, eps):
    flags = np.zeros(F.shape[0], dtype=np.bool_)
    if F.shape[0] == 0:
        return flags
    stack = np.empty((4096, 2), dtype=np.int64)
    stack[0, 0] = 0
    stack[0, 1] = 0
    top = 1
    while top > 0:
        top -= 1
        a, b = stack[top, 0], stack[top, 1]
        if a == b:
            if count[a] > 0:
                for s in range(start[a], start[a] + count[a]):
                    for t in range(s + 1, start[a] + count[a]):
                        _test_pair(V, F, order[s], order[t], flags, eps)
            else:
                l, r = left[a], right[a]
                stack[top, 0] = l
                stack[top, 1] = l
                stack[top + 1, 0] = r
                stack[top + 1, 1] = r
                stack[top + 2, 0] = l
                stack[top + 2, 1] = r
                top += 3
            continue
        if not _boxes_overlap(lo[a], hi[a], lo[b], hi[b]):
            continue
        if count[a] > 0 and count[b] > 0:
            for s in range(start[a], start[a] + count[a]):
                for t in range(start[b], start[b] + count[b]):
                    _test_pair(V, F, order[s], order[t], flags, eps)
        elif count[a] > 0:
            stack[top, 0] = a
            stack[top, 1] = left[b]
            stack[top + 1, 0] = a
            stack[top + 1, 1] = right[b]
            top += 2
        else:
            stack[top, 0] = left[a]
            stack[top, 1] = b
            stack[top + 1, 0] = right[a]
            stack[top + 1, 1] = b
            top += 2
        if top > stack.shape[0] - 4:
            grown = np.empty((stack.shape[0] * 2, 2), dtype=np.int64)
            grown[:top] = stack[:top]
            stack = grown
    return flags


@njit(cache=True)
def brute_force_intersecting(V, F, eps):
    hits = np.zeros(F.shape[0], dtype=np.bool_)
    T1 = np.empty((3, 3))
    T2 = np.empty((3, 3))
    for f in range(F.shape[0]):
        for g in range(f + 1, F.shape[0]):
            if _share_vertex(F, f, g):
                continue
            for k in range(3):
                T1[k] = V[F[f, k]]
                T2[k] = V[F[g, k]]
            if tri_tri_proper(T1, T2, eps):
                hits[f] = True
                hits[g] = True
    return hits
