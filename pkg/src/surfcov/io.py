"""Point cloud, covariance and configuration files."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields

import numpy as np

from .augment import AugmentSpec
from .estimators import TrainConfig
from .experiments import scene_train_config
from .geometry import PointCloud, check_points
from .scenes import SceneSpec, planar_scene_spec

FORMATS = ("xyz_text", "ply_ascii", "kitti_bin")
CONFIG_VERSION = 1
COV_HEADER = ["c11", "c12", "c13", "c22", "c23", "c33"]
NORMAL_HEADER = ["nx", "ny", "nz"]
UPPER_ROWS = [0, 0, 0, 1, 1, 2]
UPPER_COLS = [0, 1, 2, 1, 2, 2]


class DataFormatError(ValueError):
    """Malformed file content; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None, path=None):
        where = f" at byte {offset}" if offset is not None else ""
        src = f"{path}: " if path else ""
        super().__init__(f"{src}{message}{where}")
        self.offset = offset
        self.path = path


def guess_format(path):
    ext = os.path.splitext(str(path))[1].lower()
    return {".xyz": "xyz_text", ".txt": "xyz_text", ".ply": "ply_ascii", ".bin": "kitti_bin"}.get(ext)


def _lines_with_offsets(data):
    pos = 0
    for line in data.splitlines(keepends=True):
        yield pos, line
        pos += len(line)


def _parse_floats(line, offset, count, path):
    parts = line.split()
    if len(parts) < count:
        raise DataFormatError(f"expected {count} numbers, found {len(parts)}", offset, path)
    try:
        vals = [float(p) for p in parts]
    except ValueError:
        raise DataFormatError("non-numeric value", offset, path) from None
    if not np.all(np.isfinite(vals)):
        raise DataFormatError("non-finite value", offset, path)
    return vals


def _load_xyz(data, path):
    rows = []
    for off, raw in _lines_with_offsets(data):
        line = raw.decode("ascii", errors="replace").strip()
        if not line or line.startswith("#"):
            continue
        vals = _parse_floats(line, off, 3, path)
        if len(vals) != 3:
            raise DataFormatError(f"expected 3 numbers, found {len(vals)}", off, path)
        rows.append(vals)
    return np.array(rows, dtype=float).reshape(-1, 3)


def _load_ply(data, path):
    lines = list(_lines_with_offsets(data))
    if not lines or lines[0][1].strip() != b"ply":
        raise DataFormatError("missing 'ply' magic", 0, path)
    n_vertex = None
    props = []
    body = None
    in_vertex = False
    for i, (off, raw) in enumerate(lines[1:], 1):
        tok = raw.decode("ascii", errors="replace").split()
        if not tok:
            continue
        if tok[0] == "format":
            if tok[1:2] != ["ascii"]:
                raise DataFormatError("only ascii PLY is supported", off, path)
        elif tok[0] in ("comment", "obj_info"):
            continue
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise DataFormatError("malformed element line", off, path)
            if tok[1] != "vertex":
                raise DataFormatError(f"unsupported element '{tok[1]}'", off, path)
            n_vertex = int(tok[2])
            in_vertex = True
        elif tok[0] == "property":
            if not in_vertex or len(tok) != 3:
                raise DataFormatError("malformed property line", off, path)
            props.append(tok[2])
        elif tok[0] == "end_header":
            body = i + 1
            break
        else:
            raise DataFormatError(f"unexpected header keyword '{tok[0]}'", off, path)
    if body is None:
        raise DataFormatError("missing end_header", len(data), path)
    if n_vertex is None:
        raise DataFormatError("missing vertex element", lines[body - 1][0], path)
    try:
        cols = [props.index(c) for c in "xyz"]
    except ValueError:
        raise DataFormatError("vertex element lacks x, y or z", lines[body - 1][0], path) from None
    rows = []
    for off, raw in lines[body:]:
        line = raw.decode("ascii", errors="replace").strip()
        if not line:
            continue
        if len(rows) == n_vertex:
            raise DataFormatError("more vertex records than declared", off, path)
        vals = _parse_floats(line, off, len(props), path)
        if len(vals) != len(props):
            raise DataFormatError(f"expected {len(props)} values, found {len(vals)}", off, path)
        rows.append([vals[c] for c in cols])
    if len(rows) != n_vertex:
        raise DataFormatError(f"declared {n_vertex} vertices, found {len(rows)}", len(data), path)
    return np.array(rows, dtype=float).reshape(-1, 3)


def _load_kitti(data, path):
    if len(data) % 16:
        raise DataFormatError(
            f"size {len(data)} is not a multiple of 16-byte records", len(data) - len(data) % 16, path
        )
    rec = np.frombuffer(data, dtype="<f4").reshape(-1, 4)
    bad = np.flatnonzero(~np.all(np.isfinite(rec[:, :3]), axis=1))
    if bad.size:
        raise DataFormatError("non-finite coordinate", int(bad[0]) * 16, path)
    return rec[:, :3].astype(np.float64)


def load_cloud(path, fmt=None):
    fmt = fmt or guess_format(path)
    if fmt not in FORMATS:
        raise ValueError(f"unknown cloud format {fmt!r}; expected one of {FORMATS}")
    with open(path, "rb") as fh:
        data = fh.read()
    loader = {"xyz_text": _load_xyz, "ply_ascii": _load_ply, "kitti_bin": _load_kitti}[fmt]
    return PointCloud(loader(data, str(path)))


def _fmt(v):
    return repr(float(v))


def save_cloud(path, cloud, fmt=None):
    fmt = fmt or guess_format(path)
    if fmt not in FORMATS:
        raise ValueError(f"unknown cloud format {fmt!r}; expected one of {FORMATS}")
    X = cloud.points if isinstance(cloud, PointCloud) else check_points(cloud)
    if fmt == "kitti_bin":
        rec = np.zeros((len(X), 4), dtype="<f4")
        rec[:, :3] = X
        with open(path, "wb") as fh:
            fh.write(rec.tobytes())
        return
    lines = [" ".join(_fmt(v) for v in row) for row in X]
    if fmt == "ply_ascii":
        header = [
            "ply",
            "format ascii 1.0",
            f"element vertex {len(X)}",
            "property double x",
            "property double y",
            "property double z",
            "end_header",
        ]
        lines = header + lines
    with open(path, "w") as fh:
        fh.write("".join(line + "\n" for line in lines))


# ---------------------------------------------------------------- covariance CSV


def save_covariances(path, covs, normals=None):
    """CSV with header ``c11,c12,c13,c22,c23,c33`` (plus ``nx,ny,nz``)."""
    C = np.asarray(covs, dtype=float).reshape(-1, 3, 3)
    U = C[:, UPPER_ROWS, UPPER_COLS]
    header = list(COV_HEADER)
    if normals is not None:
        U = np.hstack([U, np.asarray(normals, dtype=float).reshape(-1, 3)])
        header += NORMAL_HEADER
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in U:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def load_covariances(path):
    """Covariances ``(N, 3, 3)`` and normals (or ``None``) from a covariance CSV."""
    with open(path, "rb") as fh:
        data = fh.read()
    lines = list(_lines_with_offsets(data))
    if not lines:
        raise DataFormatError("missing header", 0, str(path))
    header = lines[0][1].decode("ascii", errors="replace").strip().split(",")
    if header not in (COV_HEADER, COV_HEADER + NORMAL_HEADER):
        raise DataFormatError("header must be c11,c12,c13,c22,c23,c33[,nx,ny,nz]", 0, str(path))
    rows = []
    for off, raw in lines[1:]:
        line = raw.decode("ascii", errors="replace").strip()
        if not line:
            continue
        vals = _parse_floats(line.replace(",", " "), off, len(header), str(path))
        if len(vals) != len(header):
            raise DataFormatError(f"expected {len(header)} values", off, str(path))
        rows.append(vals)
    U = np.array(rows, dtype=float).reshape(-1, len(header))
    C = np.zeros((len(U), 3, 3))
    C[:, UPPER_ROWS, UPPER_COLS] = U[:, :6]
    C[:, UPPER_COLS, UPPER_ROWS] = U[:, :6]
    normals = U[:, 6:] if len(header) == 9 else None
    return C, normals


def write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(v if isinstance(v, str) else _fmt(v) if isinstance(v, float) else str(v) for v in row) + "\n")


# ---------------------------------------------------------------- experiment config


MATCHERS = ("point2point", "point2plane", "gicp")
BACKENDS = ("direct", "mlp", "pca")


@dataclass
class ExperimentConfig:
    scene: SceneSpec = field(default_factory=planar_scene_spec)
    backend: str = "direct"
    train: TrainConfig = field(default_factory=scene_train_config)
    matcher: str = "gicp"
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    rpe_delta: int = 5
    pca_k: int = 24
    outputs: dict = field(default_factory=dict)
    format_version: int = CONFIG_VERSION

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ValueError(f"backend must be one of {BACKENDS}")
        if self.matcher not in MATCHERS:
            raise ValueError(f"matcher must be one of {MATCHERS}")
        if self.rpe_delta < 1 or self.pca_k < 1:
            raise ValueError("rpe_delta and pca_k must be positive")
        if self.format_version != CONFIG_VERSION:
            raise ValueError(f"unsupported config format_version {self.format_version}")
        if not all(isinstance(k, str) and isinstance(v, str) for k, v in self.outputs.items()):
            raise ValueError("outputs must map names to file names")

    def to_dict(self):
        return {
            "scene": self.scene.to_dict(),
            "backend": self.backend,
            "train": self.train.to_dict(),
            "matcher": self.matcher,
            "augment": dict(self.augment.__dict__),
            "rpe_delta": self.rpe_delta,
            "pca_k": self.pca_k,
            "outputs": dict(self.outputs),
            "format_version": self.format_version,
        }

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ValueError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        if "scene" in kw:
            kw["scene"] = SceneSpec.from_dict(kw["scene"])
        if "train" in kw:
            kw["train"] = TrainConfig.from_dict(kw["train"])
        if "augment" in kw:
            aug = kw["augment"]
            extra = set(aug) - {f.name for f in fields(AugmentSpec)}
            if extra:
                raise ValueError(f"unknown augment options: {sorted(extra)}")
            kw["augment"] = AugmentSpec(**aug)
        return cls(**kw)


def dumps_config(cfg):
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"


def loads_config(text):
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"invalid JSON: {exc.msg}", exc.pos) from None
    try:
        return ExperimentConfig.from_dict(d)
    except TypeError as exc:
        raise ValueError(str(exc)) from None


def load_config(path):
    with open(path) as fh:
        return loads_config(fh.read())


def save_config(path, cfg):
    with open(path, "w") as fh:
        fh.write(dumps_config(cfg))
