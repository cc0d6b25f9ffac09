"""Text serialization: model files, configs, point tables, meshes, reports.

Structured files are JSON with a ``format`` / ``version`` header.  Floats
are written with Python's shortest round-trip representation (at most 17
significant digits), so a read-back reproduces every value bitwise.
Tables and meshes are whitespace-separated ASCII.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from pathlib import Path

import numpy as np

from .fitting import CURVE_COLUMNS, FitConfig, FitReport, parameter_curves
from .flow import FlowConfig, VelocityField
from .geometry import SURFACE_NAMES, SURFACES, DomainConfig, GlobalParams
from .mesh import TriMesh
from .metrics import LABEL_CODES, METRIC_CONVENTIONS, LabeledPointCloud
from .model import NdmModel
from .synth import NormTransform, PhantomSpec, SliceConfig

MODEL_FORMAT = "ndm-model"
MODEL_VERSION = 1


class FormatError(ValueError):
    """Malformed or incompatible file."""


class ConfigError(ValueError):
    def __init__(self, field: str, msg: str):
        super().__init__(f"{field}: {msg}")
        self.field = field


def fmt(x: float) -> str:
    return repr(float(x))


def _dump(obj, path):
    Path(path).write_text(json.dumps(obj, indent=1, allow_nan=False) + "\n")


def _load(path, fmt_name: str):
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(obj, dict) or obj.get("format") != fmt_name:
        raise FormatError(f"{path}: expected format {fmt_name!r}")
    return obj


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _list(a):
    return np.asarray(a, dtype=float).tolist()


# ---------------------------------------------------------------------------
# model files


def model_to_dict(model: NdmModel, provenance: dict | None = None) -> dict:
    d = model.domain
    g = model.params
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "domain": {"alpha": list(d.alpha), "grid_u": d.grid_u, "grid_v": d.grid_v, "n_knots": d.n_knots},
        "flow_steps": model.flow_cfg.steps,
        "global": {k: _list(v) for k, v in g.as_dict().items()},
        "flows": [{"layer_sizes": list(f.layer_sizes), "length_scale": f.length_scale,
                   "weights": _list(f.weights), "latent": _list(f.latent)} for f in model.flows],
        "provenance": provenance or {},
    }


def model_from_dict(obj: dict) -> NdmModel:
    if obj.get("version") != MODEL_VERSION:
        raise FormatError(f"unsupported model version {obj.get('version')!r}")
    try:
        dd = obj["domain"]
        domain = DomainConfig(tuple(dd["alpha"]), dd["grid_u"], dd["grid_v"], dd["n_knots"])
        g = GlobalParams(**{k: np.asarray(v, dtype=float) for k, v in obj["global"].items()})
        flows = [VelocityField(tuple(f["layer_sizes"]), np.asarray(f["weights"], float),
                               np.asarray(f["latent"], float), float(f["length_scale"])) for f in obj["flows"]]
        return NdmModel(g, flows, domain, FlowConfig(int(obj.get("flow_steps", 8))))
    except (KeyError, TypeError) as e:
        raise FormatError(f"model file missing or malformed field: {e}") from e


def save_model(model: NdmModel, path, provenance: dict | None = None) -> None:
    _dump(model_to_dict(model, provenance), path)


def load_model(path) -> NdmModel:
    return model_from_dict(_load(path, MODEL_FORMAT))


def load_model_file(path) -> tuple[NdmModel, dict]:
    """Model plus its provenance record (``frame``, seeds, config hash)."""
    obj = _load(path, MODEL_FORMAT)
    return model_from_dict(obj), dict(obj.get("provenance", {}))


# ---------------------------------------------------------------------------
# configs


def _coerce(cls, data: dict, section: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kw = {}
    for k, v in data.items():
        if k not in fields:
            raise ConfigError(f"{section}.{k}", "unknown field")
        default = getattr(cls(), k)
        try:
            if isinstance(default, tuple):
                v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
            elif isinstance(default, bool):
                v = bool(v)
            elif isinstance(default, int) and not isinstance(default, bool):
                if isinstance(v, float) and not v.is_integer():
                    raise ValueError("expected an integer")
                v = int(v)
            elif isinstance(default, float):
                v = float(v)
            elif isinstance(default, DomainConfig):
                v = DomainConfig(**{kk: tuple(vv) if isinstance(vv, list) else vv for kk, vv in v.items()})
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{section}.{k}", str(e)) from e
        kw[k] = v
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(section, str(e)) from e


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_plain(x) for x in obj]
    return obj


CONFIG_FORMAT = "ndm-config"
CONFIG_SECTIONS = {"fit": FitConfig, "phantom": PhantomSpec, "slice": SliceConfig}


def config_to_dict(**sections) -> dict:
    out = {"format": CONFIG_FORMAT, "version": 1}
    for name, obj in sections.items():
        if name not in CONFIG_SECTIONS:
            raise ConfigError(name, "unknown section")
        out[name] = _plain(obj)
    return out


def config_from_dict(obj: dict) -> dict:
    """Section name -> config object; absent sections take defaults."""
    if obj.get("format", CONFIG_FORMAT) != CONFIG_FORMAT:
        raise ConfigError("format", f"expected {CONFIG_FORMAT!r}")
    for k in obj:
        if k not in CONFIG_SECTIONS and k not in ("format", "version"):
            raise ConfigError(k, "unknown section")
    out = {}
    for name, cls in CONFIG_SECTIONS.items():
        data = obj.get(name, {})
        if not isinstance(data, dict):
            raise ConfigError(name, "section must be a mapping")
        out[name] = _coerce(cls, data, name)
    return out


def save_config(path, **sections) -> None:
    _dump(config_to_dict(**sections), path)


def load_config(path) -> dict:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError("file", f"not valid JSON ({e})") from e
    if not isinstance(obj, dict):
        raise ConfigError("file", "top level must be a mapping")
    return config_from_dict(obj)


def config_hash(**sections) -> str:
    return hashlib.sha256(json.dumps(config_to_dict(**sections), sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# point clouds and transforms


POINTS_HEADER = "# x y z label"


def save_points(cloud: LabeledPointCloud, path) -> None:
    lines = [f"# frame {cloud.frame}", POINTS_HEADER]
    names = np.asarray(SURFACE_NAMES)[cloud.labels]
    for p, n in zip(cloud.points, names):
        lines.append(f"{fmt(p[0])} {fmt(p[1])} {fmt(p[2])} {n}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_points(path) -> LabeledPointCloud:
    frame = "mm"
    pts, labels = [], []
    for i, line in enumerate(Path(path).read_text().splitlines(), 1):
        s = line.strip()
        if not s:
            continue
        if s.startswith("#"):
            if s.startswith("# frame "):
                frame = s.split()[2]
            continue
        parts = s.split()
        if len(parts) != 4:
            raise FormatError(f"{path}:{i}: expected 'x y z label'")
        if parts[3] in LABEL_CODES:
            lab = LABEL_CODES[parts[3]]
        elif parts[3] in ("0", "1", "2"):
            lab = int(parts[3])
        else:
            raise FormatError(f"{path}:{i}: unknown label {parts[3]!r}")
        try:
            pts.append([float(x) for x in parts[:3]])
        except ValueError as e:
            raise FormatError(f"{path}:{i}: {e}") from e
        labels.append(lab)
    try:
        return LabeledPointCloud(np.array(pts).reshape(-1, 3), np.array(labels, dtype=np.int64), frame)
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from e


TRANSFORM_FORMAT = "ndm-transform"


def save_transform(tr: NormTransform, path) -> None:
    _dump({"format": TRANSFORM_FORMAT, "version": 1, "convention": "x_n = scale * R(quat) (x - centroid)",
           "centroid": _list(tr.centroid), "quat": _list(tr.quat), "scale": float(tr.scale)}, path)


def load_transform(path) -> NormTransform:
    obj = _load(path, TRANSFORM_FORMAT)
    try:
        return NormTransform(np.asarray(obj["centroid"], float), np.asarray(obj["quat"], float),
                             float(obj["scale"]))
    except KeyError as e:
        raise FormatError(f"{path}: missing {e}") from e


# ---------------------------------------------------------------------------
# meshes


def save_obj(mesh: TriMesh, path) -> None:
    lines = [f"# {SURFACE_NAMES[mesh.surface] if mesh.surface >= 0 else 'mesh'}"]
    lines += [f"v {fmt(x)} {fmt(y)} {fmt(z)}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path) -> TriMesh:
    V, F = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            V.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            F.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    return TriMesh(np.array(V).reshape(-1, 3), np.array(F, dtype=np.int64).reshape(-1, 3))


def save_ply(mesh: TriMesh, path) -> None:
    head = ["ply", "format ascii 1.0", f"element vertex {len(mesh.vertices)}",
            "property double x", "property double y", "property double z",
            f"element face {mesh.n_faces}", "property list uchar int vertex_indices", "end_header"]
    body = [f"{fmt(x)} {fmt(y)} {fmt(z)}" for x, y, z in mesh.vertices]
    body += [f"3 {a} {b} {c}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(head + body) + "\n")


def save_material(mesh: TriMesh, path) -> None:
    """Per-vertex material coordinates ``u v w`` aligned with the mesh vertices."""
    if mesh.vertex_material is None:
        raise FormatError("mesh has no material coordinates")
    lines = ["# vertex u v w"]
    lines += [f"{i} {fmt(u)} {fmt(v)} {int(w)}" for i, (u, v, w) in enumerate(mesh.vertex_material)]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# reports


METRIC_COLUMNS = ("surface", "CD_mm", "EMD_mm", "EMD_approx", "P2F_mm", "P2F_to", "NC", "ENF",
                  "ENF_irregular", "ENF_nonmanifold", "SI")


def _cell(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return "yes" if v else "no"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return fmt(v) if math.isfinite(v) else "nan"


def write_table(path, columns, rows, header_lines=()) -> None:
    lines = [f"# {h}" for h in header_lines] + [" ".join(columns)]
    lines += [" ".join(_cell(v) for v in r) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def read_table(path) -> tuple[list[str], list[list[str]]]:
    rows = [l.split() for l in Path(path).read_text().splitlines() if l.strip() and not l.startswith("#")]
    return rows[0], rows[1:]


def write_metric_report(path, rows: list[dict], header_lines=()) -> None:
    header = [f"metrics in mm; {METRIC_CONVENTIONS}",
              "ENF = mean faces per edge (operational definition), ENF_irregular = edges not used by exactly 2 faces, "
              "ENF_nonmanifold = edges used by more than 2 faces; EMD_approx = yes marks subsampled EMD",
              *header_lines]
    write_table(path, METRIC_COLUMNS, [[r[c] for c in METRIC_COLUMNS] for r in rows], header)


def write_curves(model: NdmModel, path, n: int = 64) -> None:
    """Parameter-curve tables of all surfaces, one block per surface."""
    lines = ["# a1p = a1(u) cos u, a2p = a2(u) cos u, a3p = a3(u) sin u (dimensionless);",
             "# e1, e2 = long-axis offsets e_xo(u), e_yo(u) (model units); u in radians"]
    for w in SURFACES:
        cols = list(CURVE_COLUMNS) + (["a2p_alt"] if w == 2 else [])
        lines.append(f"# surface {SURFACE_NAMES[w]}")
        lines.append(" ".join(["surface"] + cols))
        for row in parameter_curves(model, w, n):
            lines.append(" ".join([SURFACE_NAMES[w]] + [fmt(x) for x in row]))
    Path(path).write_text("\n".join(lines) + "\n")


def write_fit_report(report: FitReport, path, extra: dict | None = None) -> None:
    cfg = report.config
    obj = {
        "format": "ndm-fit-report", "version": 1,
        "config": _plain(cfg) if cfg is not None else None,
        "final": dataclasses.asdict(report.final) if report.final is not None else None,
        "traces": {str(k): _list(v) for k, v in report.traces.items()},
        "extra": extra or {},
    }
    _dump(obj, path)


def write_manifest(path, command: str, args: dict, outputs: list) -> None:
    outs = {Path(p).name: sha256(p) for p in sorted(outputs, key=lambda p: Path(p).name)}
    _dump({"format": "ndm-manifest", "version": 1, "command": command, "args": args, "outputs": outs}, path)
