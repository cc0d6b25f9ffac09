"""Register an ED phantom onto its warped ES counterpart through two independent fits.

    python demos/registration.py [seed]
"""
import sys

import numpy as np

from ndm import DESK, fit
from ndm.registration import build_correspondence, grid_spacing, register
from ndm.synth import (PhantomSpec, SliceConfig, generate_phantom, make_sparse, normalize, phantom_axis,
                       slice_to_sparse, warp_phantom)


def fit_mm(sparse):
    norm, tr = normalize(sparse)
    model, _ = fit(norm, DESK)
    return tr.denormalize_model(model)


def main(seed: int = 0) -> None:
    ed = generate_phantom(PhantomSpec(seed=seed))
    _, es_meshes, es_dense = warp_phantom(ed, seed + 1000, contraction=0.12)
    es_sparse = slice_to_sparse(es_meshes, SliceConfig(), phantom_axis(ed), 0)

    m1 = fit_mm(make_sparse(ed))
    m2 = fit_mm(es_sparse)
    cmap = build_correspondence(m1, m2, (64, 128))
    moved, snap = register(ed.dense, cmap)

    err = np.linalg.norm(moved.points - es_dense.points, axis=1)
    base = np.linalg.norm(ed.dense.points - es_dense.points, axis=1)
    print(f"true ED->ES displacement {base.mean():.2f} mm on average")
    print(f"registration error {err.mean():.2f} mm (grid spacing {grid_spacing(m1):.2f} mm, "
          f"mean snap {snap.mean():.2f} mm)")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 0)
