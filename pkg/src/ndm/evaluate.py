"""Per-surface evaluation of predicted meshes against ground truth, in mm."""
from __future__ import annotations

import numpy as np

from .geometry import SURFACE_NAMES, SURFACES
from .mesh import TriMesh, enf_ratio, normal_consistency, sample_points, self_intersection_ratio
from .metrics import LabeledPointCloud, chamfer, emd, point_to_surface

EVAL_POINTS = 3000


def evaluate_surfaces(pred: list[TriMesh], gt: LabeledPointCloud, gt_meshes: list[TriMesh] | None = None,
                      n: int = EVAL_POINTS, seed: int = 0) -> list[dict]:
    """Metric rows for each surface plus their average (last row).

    ``n`` area-uniform samples of each predicted mesh are compared with the
    ground-truth points of the same label.  P2F measures the samples against
    the ground-truth mesh when one is given, otherwise the ground-truth points
    against the predicted mesh (recorded in ``P2F_to``).
    """
    if gt.frame != "mm":
        raise ValueError("evaluation runs in the original mm frame")
    rng = np.random.default_rng(seed)
    rows = []
    for w in SURFACES:
        T = gt.surface(w)
        if not len(T):
            raise ValueError(f"ground truth has no {SURFACE_NAMES[w]} points")
        P, _ = sample_points(pred[w], n, rng)
        if len(T) != n:
            Ts = T[np.sort(np.random.default_rng([seed, w]).choice(len(T), n, replace=len(T) < n))]
        else:
            Ts = T
        e = emd(P, Ts, seed=seed)
        if gt_meshes is not None:
            p2f, to = point_to_surface(P, gt_meshes[w]), "gt-mesh"
            nc = normal_consistency(pred[w], gt_meshes[w], seed=seed)
        else:
            p2f, to = point_to_surface(T, pred[w]), "pred-mesh"
            nc = float("nan")
        enf = enf_ratio(pred[w])
        rows.append({"surface": SURFACE_NAMES[w], "CD_mm": chamfer(P, T), "EMD_mm": e.value,
                     "EMD_approx": e.approximate, "P2F_mm": p2f, "P2F_to": to, "NC": nc,
                     "ENF": enf.mean, "ENF_irregular": enf.irregular, "ENF_nonmanifold": enf.nonmanifold,
                     "SI": self_intersection_ratio(pred[w])})
    avg = {"surface": "average", "EMD_approx": any(r["EMD_approx"] for r in rows),
           "P2F_to": rows[0]["P2F_to"], "ENF_irregular": sum(r["ENF_irregular"] for r in rows),
           "ENF_nonmanifold": sum(r["ENF_nonmanifold"] for r in rows)}
    for k in ("CD_mm", "EMD_mm", "P2F_mm", "NC", "ENF", "SI"):
        avg[k] = float(np.mean([r[k] for r in rows]))
    rows.append(avg)
    return rows


def registration_rows(registered: LabeledPointCloud, target: LabeledPointCloud, source: LabeledPointCloud,
                      target_meshes: list[TriMesh] | None = None, seed: int = 0) -> list[dict]:
    """CD / EMD / P2F of registered-vs-target next to the unregistered baseline."""
    rows = []
    for w in SURFACES:
        R, T, S = registered.surface(w), target.surface(w), source.surface(w)
        row = {"surface": SURFACE_NAMES[w]}
        for tag, X in (("reg", R), ("base", S)):
            row[f"CD_{tag}"] = chamfer(X, T)
            if len(X) == len(T):
                e = emd(X, T, seed=seed)
                row[f"EMD_{tag}"], row["EMD_approx"] = e.value, e.approximate
            else:
                row[f"EMD_{tag}"], row["EMD_approx"] = float("nan"), True
            row[f"P2F_{tag}"] = point_to_surface(X, target_meshes[w]) if target_meshes else float("nan")
        rows.append(row)
    return rows


REGISTRATION_COLUMNS = ("surface", "CD_reg", "CD_base", "EMD_reg", "EMD_base", "EMD_approx", "P2F_reg", "P2F_base")
