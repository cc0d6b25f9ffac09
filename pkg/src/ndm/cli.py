"""``ndm`` command line: synth, fit, eval, register, report.

Exit codes: 0 success, 2 usage error, 3 numeric failure or divergence,
4 I/O or file-format error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .evaluate import REGISTRATION_COLUMNS, evaluate_surfaces, registration_rows
from .fitting import CURVE_COLUMNS, FitConfig, fit, parameter_curves
from .geometry import SURFACE_NAMES, SURFACES, NumericError
from .registration import DIRECTION, build_correspondence, register
from .synth import generate_phantom, make_sparse, normalize, phantom_axis, slice_to_sparse, warp_phantom

log = logging.getLogger("ndm")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class UsageError(ValueError):
    pass


def set_threads() -> None:
    """Honour ``NDM_THREADS`` for torch and numba."""
    raw = os.environ.get("NDM_THREADS")
    if not raw:
        return
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"NDM_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("NDM_THREADS must be >= 1")
    import numba
    import torch
    torch.set_num_threads(n)
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _configs(args) -> dict:
    return io.load_config(args.config) if args.config else io.config_from_dict({})


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _grid(args) -> tuple[int, int] | None:
    if (args.grid_u is None) != (args.grid_v is None):
        raise UsageError("--grid-u and --grid-v go together")
    if args.grid_u is None:
        return None
    if args.grid_u < 2 or args.grid_v < 3:
        raise UsageError("grid must be at least 2x3")
    return args.grid_u, args.grid_v


def _save_meshes(meshes, out: Path, prefix: str, written: list) -> None:
    for m in meshes:
        stem = out / f"{prefix}{SURFACE_NAMES[m.surface]}"
        io.save_obj(m, stem.with_suffix(".obj"))
        written.append(stem.with_suffix(".obj"))
        if m.vertex_material is not None:
            io.save_material(m, stem.with_suffix(".material.txt"))
            written.append(stem.with_suffix(".material.txt"))


def _model_mm(path, transform_path=None):
    """Load a model file and bring it to the mm frame."""
    model, prov = io.load_model_file(path)
    if prov.get("frame", "mm") == "mm":
        return model
    if transform_path is None:
        sibling = Path(path).with_name("transform.json")
        if not sibling.exists():
            raise UsageError(f"{path} is in the normalized frame; pass its transform record")
        transform_path = sibling
    return io.load_transform(transform_path).denormalize_model(model)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfgs = _configs(args)
    spec, slices = cfgs["phantom"], cfgs["slice"]
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
        slices = dataclasses.replace(slices, seed=args.seed)
    if args.sax is not None:
        slices = dataclasses.replace(slices, sax_count=args.sax)
    out = _out(args)
    ph = generate_phantom(spec)
    sparse = make_sparse(ph, slices)
    norm, tr = normalize(sparse)
    written = []
    prov = {"frame": "mm", "seed": spec.seed, "config_hash": io.config_hash(phantom=spec, slice=slices)}
    for name, fn in (("model.json", lambda p: io.save_model(ph.model, p, prov)),
                     ("dense.txt", lambda p: io.save_points(ph.dense, p)),
                     ("sparse.txt", lambda p: io.save_points(sparse, p)),
                     ("sparse_normalized.txt", lambda p: io.save_points(norm, p)),
                     ("transform.json", lambda p: io.save_transform(tr, p)),
                     ("config.json", lambda p: io.save_config(p, phantom=spec, slice=slices))):
        fn(out / name)
        written.append(out / name)
    _save_meshes(ph.meshes, out, "mesh_", written)
    if args.es:
        _, meshes2, dense2 = warp_phantom(ph, spec.seed + 1000, contraction=args.contraction)
        sparse2 = slice_to_sparse(meshes2, slices, phantom_axis(ph), spec.noise)
        io.save_points(dense2, out / "es_dense.txt")
        io.save_points(sparse2, out / "es_sparse.txt")
        written += [out / "es_dense.txt", out / "es_sparse.txt"]
        _save_meshes(meshes2, out, "es_mesh_", written)
    io.write_manifest(out / "manifest.json", "synth", {"seed": spec.seed, "sax": slices.sax_count,
                                                      "es": bool(args.es)}, written)
    log.info("wrote phantom %d (%d sparse points) to %s", spec.seed, len(sparse), out)
    return EXIT_OK


def cmd_fit(args) -> int:
    cfgs = _configs(args)
    cfg: FitConfig = cfgs["fit"]
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.stages is not None:
        over["stages"] = args.stages
    if args.lambda_d is not None:
        over["lambda_d"] = args.lambda_d
    if args.lambda_s is not None:
        over["lambda_s"] = args.lambda_s
    try:
        cfg = dataclasses.replace(cfg, **over)
    except ValueError as e:
        raise UsageError(str(e)) from e
    grid = _grid(args)
    cloud = io.load_points(args.cloud)
    if not cloud.has_all_labels():
        raise UsageError("point cloud needs LV-endo, LV-epi and RV labels")
    if cloud.frame == "mm":
        norm, tr = normalize(cloud)
    else:
        if args.transform is None:
            raise UsageError("normalized cloud needs --transform")
        norm, tr = cloud, io.load_transform(args.transform)
    init, start = None, 1
    if args.init:
        init, prov = io.load_model_file(args.init)
        if prov.get("frame") != "normalized":
            raise UsageError("--init expects a normalized-frame model written by 'ndm fit'")
        start = args.start_stage
    out = _out(args)
    model, report = fit(norm, cfg, init=init, start_stage=start)
    mm = tr.denormalize_model(model)
    written = []
    prov = {"frame": "normalized", "seed": cfg.seed, "config_hash": io.config_hash(fit=cfg),
            "stages": cfg.stages, "lambda_d": cfg.lambda_d, "lambda_s": cfg.lambda_s}
    io.save_model(model, out / "model.json", prov)
    io.save_transform(tr, out / "transform.json")
    io.save_config(out / "config.json", fit=cfg)
    io.write_fit_report(report, out / "fit_report.json",
                        {"lambda_d": cfg.lambda_d, "lambda_s": cfg.lambda_s, "stages": cfg.stages})
    io.write_curves(model, out / "curves.txt")
    written += [out / n for n in ("model.json", "transform.json", "config.json", "fit_report.json", "curves.txt")]
    meshes = mm.meshes(*(grid or ()))
    _save_meshes(meshes, out, "mesh_", written)
    if args.dense_gt:
        gt = io.load_points(args.dense_gt)
        rows = evaluate_surfaces(meshes, gt, seed=cfg.seed)
        io.write_metric_report(out / "metrics.txt", rows,
                               [f"lambda_d {cfg.lambda_d!r} lambda_s {cfg.lambda_s!r} stages {cfg.stages}"])
        written.append(out / "metrics.txt")
        log.info("held-out CD (mm): %s", " ".join(f"{r['CD_mm']:.4g}" for r in rows))
    io.write_manifest(out / "manifest.json", "fit", {"cloud": io.sha256(args.cloud), **prov}, written)
    return EXIT_OK


def cmd_eval(args) -> int:
    grid = _grid(args)
    if args.pred_mesh:
        if len(args.pred_mesh) != 3:
            raise UsageError("--pred-mesh takes three OBJ files (LV-endo LV-epi RV)")
        meshes = [io.load_obj(p) for p in args.pred_mesh]
        for w, m in zip(SURFACES, meshes):
            m.surface = w
    else:
        if not args.model:
            raise UsageError("give a model file or --pred-mesh")
        meshes = _model_mm(args.model, args.transform).meshes(*(grid or ()))
    gt = io.load_points(args.dense_gt)
    if gt.frame != "mm":
        raise UsageError("ground truth must be in the mm frame")
    gt_meshes = None
    if args.gt_mesh:
        if len(args.gt_mesh) != 3:
            raise UsageError("--gt-mesh takes three OBJ files (LV-endo LV-epi RV)")
        gt_meshes = [io.load_obj(p) for p in args.gt_mesh]
    rows = evaluate_surfaces(meshes, gt, gt_meshes, n=args.samples, seed=args.seed or 0)
    out = _out(args)
    io.write_metric_report(out / "metrics.txt", rows, [f"samples per surface {args.samples}"])
    io.write_manifest(out / "manifest.json", "eval", {"samples": args.samples, "seed": args.seed or 0},
                      [out / "metrics.txt"])
    for r in rows:
        log.info("%-8s CD %.4g EMD %.4g P2F %.4g SI %.3g", r["surface"], r["CD_mm"], r["EMD_mm"],
                 r["P2F_mm"], r["SI"])
    return EXIT_OK


def cmd_register(args) -> int:
    grid = _grid(args) or (64, 128)
    m1 = _model_mm(args.model1, args.transform1)
    m2 = _model_mm(args.model2, args.transform2)
    if m1.domain.alpha != m2.domain.alpha or m1.domain.n_knots != m2.domain.n_knots:
        raise UsageError("models are defined on different material domains")
    cmap = build_correspondence(m1, m2, grid)
    cloud = io.load_points(args.cloud)
    if cloud.frame != "mm":
        raise UsageError("cloud on shape 1 must be in the mm frame")
    reg, snap = register(cloud, cmap, residual=args.residual)
    out = _out(args)
    io.save_points(reg, out / "registered.txt")
    written = [out / "registered.txt"]
    header = [f"direction {DIRECTION} (model1 -> model2)", f"grid {grid[0]}x{grid[1]}",
              f"residual {'on' if args.residual else 'off'}", f"mean snap distance mm {float(snap.mean())!r}"]
    if args.target:
        target = io.load_points(args.target)
        tmeshes = [io.load_obj(p) for p in args.target_mesh] if args.target_mesh else None
        rows = registration_rows(reg, target, cloud, tmeshes)
        io.write_table(out / "registration.txt", REGISTRATION_COLUMNS,
                       [[r[c] for c in REGISTRATION_COLUMNS] for r in rows], header)
    else:
        io.write_table(out / "registration.txt", ("surface", "snap_mm"),
                       [[SURFACE_NAMES[w], float(snap[cloud.labels == w].mean())] for w in SURFACES
                        if np.any(cloud.labels == w)], header)
    written.append(out / "registration.txt")
    io.write_manifest(out / "manifest.json", "register", {"grid": list(grid), "residual": args.residual}, written)
    return EXIT_OK


def cmd_report(args) -> int:
    model, _ = io.load_model_file(args.model)
    out = _out(args)
    io.write_curves(model, out / "curves.txt", args.n)
    written = [out / "curves.txt"]
    if args.compare:
        other, _ = io.load_model_file(args.compare)
        lines = ["# curve differences (compare - model); negative a'p means contraction",
                 " ".join(["surface"] + list(CURVE_COLUMNS))]
        for w in SURFACES:
            a = parameter_curves(model, w, args.n)[:, :len(CURVE_COLUMNS)]
            b = parameter_curves(other, w, args.n)[:, :len(CURVE_COLUMNS)]
            d = b - a
            d[:, 0] = a[:, 0]
            lines += [" ".join([SURFACE_NAMES[w]] + [io.fmt(x) for x in row]) for row in d]
        (out / "curve_diff.txt").write_text("\n".join(lines) + "\n")
        written.append(out / "curve_diff.txt")
    io.write_manifest(out / "manifest.json", "report", {"n": args.n}, written)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ndm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True, grid=True):
        sp.add_argument("--config", help="JSON config with fit / phantom / slice sections")
        sp.add_argument("--out", required=True, help="output directory")
        if seed:
            sp.add_argument("--seed", type=int)
        if grid:
            sp.add_argument("--grid-u", type=int, help="material grid rows for meshes and correspondences")
            sp.add_argument("--grid-v", type=int)

    s = sub.add_parser("synth", help="generate a phantom with dense and sparse clouds")
    common(s, grid=False)
    s.add_argument("--sax", type=int, help="number of short-axis planes")
    s.add_argument("--es", action="store_true", help="also write a warped ES shape for registration")
    s.add_argument("--contraction", type=float, default=0.12)
    s.set_defaults(func=cmd_synth)

    f = sub.add_parser("fit", help="fit a model to a labelled sparse cloud")
    f.add_argument("cloud")
    common(f)
    f.add_argument("--stages", type=int, choices=range(1, 5))
    f.add_argument("--lambda-d", type=float)
    f.add_argument("--lambda-s", type=float)
    f.add_argument("--dense-gt", help="held-out dense cloud (mm) for a metric report")
    f.add_argument("--transform", help="transform record of a normalized cloud")
    f.add_argument("--init", help="resume from a normalized model written by 'ndm fit'")
    f.add_argument("--start-stage", type=int, default=4, choices=range(1, 5))
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("eval", help="metric table against ground truth")
    e.add_argument("model", nargs="?")
    common(e)
    e.add_argument("--dense-gt", required=True)
    e.add_argument("--gt-mesh", nargs="+")
    e.add_argument("--pred-mesh", nargs="+")
    e.add_argument("--transform")
    e.add_argument("--samples", type=int, default=3000)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("register", help="map a cloud on shape 1 onto shape 2 (ED -> ES)")
    r.add_argument("model1")
    r.add_argument("model2")
    r.add_argument("cloud")
    common(r, seed=False)
    r.add_argument("--transform1")
    r.add_argument("--transform2")
    r.add_argument("--target", help="target cloud on shape 2 for the accuracy table")
    r.add_argument("--target-mesh", nargs="+")
    r.add_argument("--residual", action="store_true", help="carry the tangent-frame residual offset")
    r.set_defaults(func=cmd_register)

    c = sub.add_parser("report", help="parameter-curve tables")
    c.add_argument("model")
    c.add_argument("--out", required=True)
    c.add_argument("--n", type=int, default=64)
    c.add_argument("--compare", help="second model; writes curve differences")
    c.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        set_threads()
        return args.func(args)
    except (io.FormatError, OSError) as e:
        print(f"ndm: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except NumericError as e:
        print(f"ndm: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, io.ConfigError, ValueError) as e:
        print(f"ndm: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
