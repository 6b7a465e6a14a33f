"""Point-cloud and trajectory file I/O.

Supported cloud formats: ASCII and binary little-endian PLY, ASCII PCD, and
whitespace ``x y z [label]`` text (``xyz``).  Labels travel as a ``label``
vertex property (PLY) or field (PCD); the sensor origin travels as a
``comment origin x y z`` header line (PLY), the PCD ``VIEWPOINT`` or an
``# origin`` comment line (xyz).
"""

from __future__ import annotations

import io
import os
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .geometry import PointCloud, RigidTransform

FORMATS = ("ply", "pcd", "xyz")

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


class CloudFormatError(ValueError):
    """Raised for unreadable or malformed cloud files."""


def _infer_format(path, fmt: Optional[str]) -> str:
    if fmt is None:
        fmt = Path(path).suffix.lstrip(".").lower()
        if fmt == "txt":
            fmt = "xyz"
    if fmt not in FORMATS:
        raise CloudFormatError(f"unsupported cloud format {fmt!r} for {path}")
    return fmt


def _parse_ascii_rows(lines: Sequence[str], first_lineno: int, path) -> np.ndarray:
    if not lines:
        return np.zeros((0, 0))
    try:
        arr = np.loadtxt(io.StringIO("".join(lines)), ndmin=2, dtype=np.float64)
        if arr.shape[0] != len(lines):
            raise ValueError
    except ValueError:
        width = None
        for i, line in enumerate(lines):
            lineno = first_lineno + i
            try:
                vals = [float(v) for v in line.split()]
            except ValueError:
                raise CloudFormatError(f"{path}: malformed record at line {lineno}: {line.strip()!r}")
            if width is None:
                width = len(vals)
            if len(vals) != width or not vals:
                raise CloudFormatError(
                    f"{path}: line {lineno} has {len(vals)} values, expected {width}"
                )
        raise CloudFormatError(f"{path}: unparseable data block")
    return arr


def _check_finite(xyz: np.ndarray, first_lineno: int, path, binary=False):
    bad = ~np.all(np.isfinite(xyz), axis=1)
    if np.any(bad):
        row = int(np.flatnonzero(bad)[0])
        where = f"record {row}" if binary else f"line {first_lineno + row}"
        raise CloudFormatError(f"{path}: non-finite coordinate at {where}")


def load_cloud(path, fmt: Optional[str] = None) -> PointCloud:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"cloud file not found: {path}")
    fmt = _infer_format(path, fmt)
    if fmt == "ply":
        return _load_ply(path)
    if fmt == "pcd":
        return _load_pcd(path)
    return _load_xyz(path)


def save_cloud(cloud: PointCloud, path, fmt: Optional[str] = None, binary: bool = False) -> None:
    path = Path(path)
    fmt = _infer_format(path, fmt)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "ply":
        _save_ply(cloud, path, binary)
    elif fmt == "pcd":
        _save_pcd(cloud, path)
    else:
        _save_xyz(cloud, path)


# -- PLY ------------------------------------------------------------------

def _load_ply(path: Path) -> PointCloud:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"ply":
            raise CloudFormatError(f"{path}: missing 'ply' magic")
        encoding = None
        origin = None
        elements: List[Tuple[str, int, list]] = []
        n_header = 1
        while True:
            raw = fh.readline()
            if not raw:
                raise CloudFormatError(f"{path}: header not terminated")
            n_header += 1
            tok = raw.decode("ascii", "replace").split()
            if not tok:
                continue
            if tok[0] == "end_header":
                break
            if tok[0] == "format":
                encoding = tok[1]
            elif tok[0] == "comment" and len(tok) == 5 and tok[1] == "origin":
                origin = np.array([float(v) for v in tok[2:5]])
            elif tok[0] == "element":
                elements.append((tok[1], int(tok[2]), []))
            elif tok[0] == "property":
                if not elements:
                    raise CloudFormatError(f"{path}: property before element")
                if tok[1] == "list":
                    elements[-1][2].append((tok[-1], None))
                else:
                    if tok[1] not in _PLY_TYPES:
                        raise CloudFormatError(f"{path}: unknown property type {tok[1]!r}")
                    elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
        body = fh.read()
    if not elements or elements[0][0] != "vertex":
        raise CloudFormatError(f"{path}: first element must be 'vertex'")
    _, n, props = elements[0]
    names = [p[0] for p in props]
    if any(p[1] is None for p in props) or not {"x", "y", "z"} <= set(names):
        raise CloudFormatError(f"{path}: vertex needs scalar x, y, z properties")

    if encoding == "ascii":
        lines = body.decode("ascii", "replace").splitlines(keepends=True)
        if len(lines) < n:
            raise CloudFormatError(f"{path}: expected {n} vertices, found {len(lines)} lines")
        data = _parse_ascii_rows(lines[:n], n_header + 1, path)
        if n and data.shape[1] != len(names):
            raise CloudFormatError(f"{path}: vertex rows have {data.shape[1]} values, header declares {len(names)}")
        cols = {name: data[:, i] if n else np.zeros(0) for i, name in enumerate(names)}
        binary = False
    elif encoding == "binary_little_endian":
        dtype = np.dtype([(name, "<" + t) for name, t in props])
        if len(body) < n * dtype.itemsize:
            raise CloudFormatError(f"{path}: truncated binary body")
        rec = np.frombuffer(body, dtype=dtype, count=n)
        cols = {name: rec[name] for name in names}
        binary = True
    else:
        raise CloudFormatError(f"{path}: unsupported PLY encoding {encoding!r}")

    xyz = np.stack([cols["x"], cols["y"], cols["z"]], axis=1).astype(np.float64)
    _check_finite(xyz, n_header + 1, path, binary)
    labels = cols["label"].astype(np.int64) if "label" in cols else None
    return PointCloud(xyz, labels, origin)


def _save_ply(cloud: PointCloud, path: Path, binary: bool) -> None:
    n = len(cloud)
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0"]
    if cloud.origin is not None:
        header.append("comment origin %.17g %.17g %.17g" % tuple(cloud.origin))
    header += [f"element vertex {n}", "property double x", "property double y", "property double z"]
    if cloud.labels is not None:
        header.append("property int label")
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
            if cloud.labels is not None:
                fields.append(("label", "<i4"))
            rec = np.empty(n, dtype=fields)
            rec["x"], rec["y"], rec["z"] = cloud.points.T
            if cloud.labels is not None:
                rec["label"] = cloud.labels
            fh.write(rec.tobytes())
        else:
            _write_rows(fh, cloud)


def _write_rows(fh, cloud: PointCloud) -> None:
    if len(cloud) == 0:
        return
    if cloud.labels is not None:
        table = np.column_stack([cloud.points, cloud.labels])
        fmt = "%.12g %.12g %.12g %d"
    else:
        table = cloud.points
        fmt = "%.12g %.12g %.12g"
    np.savetxt(fh, table, fmt=fmt)


# -- PCD ------------------------------------------------------------------

def _load_pcd(path: Path) -> PointCloud:
    lines = path.read_text().splitlines(keepends=True)
    meta = {}
    data_start = None
    for i, line in enumerate(lines):
        tok = line.split()
        if not tok or tok[0].startswith("#"):
            continue
        meta[tok[0].upper()] = tok[1:]
        if tok[0].upper() == "DATA":
            data_start = i + 1
            break
    if data_start is None:
        raise CloudFormatError(f"{path}: missing DATA line")
    if meta["DATA"][0].lower() != "ascii":
        raise CloudFormatError(f"{path}: only ASCII PCD is supported")
    fields = meta.get("FIELDS")
    if not fields or not {"x", "y", "z"} <= set(fields):
        raise CloudFormatError(f"{path}: FIELDS must include x y z")
    n = int(meta.get("POINTS", ["0"])[0])
    rows = [l for l in lines[data_start:data_start + n]]
    if len(rows) < n:
        raise CloudFormatError(f"{path}: expected {n} points, found {len(rows)}")
    data = _parse_ascii_rows(rows, data_start + 1, path)
    if n and data.shape[1] != len(fields):
        raise CloudFormatError(f"{path}: rows have {data.shape[1]} values, FIELDS declares {len(fields)}")
    idx = {f: i for i, f in enumerate(fields)}
    xyz = data[:, [idx["x"], idx["y"], idx["z"]]] if n else np.zeros((0, 3))
    _check_finite(xyz, data_start + 1, path)
    labels = data[:, idx["label"]].astype(np.int64) if "label" in idx and n else (
        np.zeros(0, np.int64) if "label" in idx else None)
    origin = None
    vp = meta.get("VIEWPOINT")
    if vp and len(vp) == 7:
        t = np.array([float(v) for v in vp[:3]])
        if np.any(t != 0.0):
            origin = t
    return PointCloud(xyz, labels, origin)


def _save_pcd(cloud: PointCloud, path: Path) -> None:
    n = len(cloud)
    has_label = cloud.labels is not None
    o = cloud.origin if cloud.origin is not None else np.zeros(3)
    header = [
        "# .PCD v0.7 - Point Cloud Data file format",
        "VERSION 0.7",
        "FIELDS x y z" + (" label" if has_label else ""),
        "SIZE 8 8 8" + (" 4" if has_label else ""),
        "TYPE F F F" + (" U" if has_label else ""),
        "COUNT 1 1 1" + (" 1" if has_label else ""),
        f"WIDTH {n}",
        "HEIGHT 1",
        "VIEWPOINT %.17g %.17g %.17g 1 0 0 0" % tuple(o),
        f"POINTS {n}",
        "DATA ascii",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        _write_rows(fh, cloud)


# -- xyz ------------------------------------------------------------------

def _load_xyz(path: Path) -> PointCloud:
    lines = path.read_text().splitlines(keepends=True)
    origin = None
    rows, first = [], None
    for i, line in enumerate(lines):
        s = line.strip()
        if not s:
            continue
        if s.startswith("#"):
            tok = s[1:].split()
            if len(tok) == 4 and tok[0] == "origin":
                origin = np.array([float(v) for v in tok[1:]])
            continue
        if first is None:
            first = i + 1
        rows.append((i + 1, line))
    if not rows:
        return PointCloud(np.zeros((0, 3)), None, origin)
    # comment lines may be interleaved, so keep explicit line numbers
    contiguous = rows[-1][0] - rows[0][0] + 1 == len(rows)
    if contiguous:
        data = _parse_ascii_rows([r[1] for r in rows], first, path)
        linenos = None
    else:
        data = np.vstack([_parse_ascii_rows([l], no, path) for no, l in rows])
        linenos = [no for no, _ in rows]
    if data.shape[1] not in (3, 4):
        raise CloudFormatError(f"{path}: expected 3 or 4 columns, got {data.shape[1]}")
    xyz = data[:, :3]
    bad = ~np.all(np.isfinite(xyz), axis=1)
    if np.any(bad):
        r = int(np.flatnonzero(bad)[0])
        lineno = linenos[r] if linenos else first + r
        raise CloudFormatError(f"{path}: non-finite coordinate at line {lineno}")
    labels = data[:, 3].astype(np.int64) if data.shape[1] == 4 else None
    return PointCloud(xyz, labels, origin)


def _save_xyz(cloud: PointCloud, path: Path) -> None:
    with open(path, "wb") as fh:
        if cloud.origin is not None:
            fh.write(("# origin %.17g %.17g %.17g\n" % tuple(cloud.origin)).encode())
        _write_rows(fh, cloud)


# -- trajectories -----------------------------------------------------------

def save_trajectory(path, timestamps, poses: Sequence[RigidTransform]) -> None:
    """Write ``timestamp tx ty tz qx qy qz qw`` rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for ts, T in zip(timestamps, poses):
            vals = [ts, *T.translation, *T.as_quat()]
            fh.write(" ".join("%.17g" % v for v in vals) + "\n")


def load_trajectory(path) -> Tuple[np.ndarray, List[RigidTransform]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"trajectory file not found: {path}")
    stamps, poses = [], []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        try:
            vals = [float(v) for v in s.split()]
        except ValueError:
            raise CloudFormatError(f"{path}: malformed pose at line {lineno}")
        if len(vals) != 8 or not np.all(np.isfinite(vals)):
            raise CloudFormatError(f"{path}: line {lineno} must hold 8 finite values")
        q = np.array(vals[4:8])
        norm = np.linalg.norm(q)
        if norm < 1e-12:
            raise CloudFormatError(f"{path}: zero quaternion at line {lineno}")
        stamps.append(vals[0])
        poses.append(RigidTransform.from_quat(q / norm, vals[1:4]))
    return np.array(stamps), poses


def save_manifest(path, scan_files: Sequence[str]) -> None:
    Path(path).write_text("".join(f"{os.fspath(f)}\n" for f in scan_files))


def load_manifest(path) -> List[Path]:
    path = Path(path)
    entries = [l.strip() for l in path.read_text().splitlines() if l.strip()]
    return [path.parent / e for e in entries]
