"""OBJ / PLY mesh loading and PLY point-cloud export."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .geometry import PointCloud, TriangleMesh


class MeshFormatError(ValueError):
    pass


def _fan(poly):
    return [(poly[0], poly[i], poly[i + 1]) for i in range(1, len(poly) - 1)]


def load_obj(path) -> TriangleMesh:
    vertices, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                vertices.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    i = int(tok.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(vertices) + i)
                if len(idx) < 3:
                    raise MeshFormatError(f"face with {len(idx)} vertices")
                faces.extend(_fan(idx))
    if not faces:
        raise MeshFormatError(f"{path}: no faces")
    return TriangleMesh(np.array(vertices), np.array(faces))


def save_obj(mesh: TriangleMesh, path) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


_PLY_TYPES = {
    "char": "b", "int8": "b", "uchar": "B", "uint8": "B",
    "short": "h", "int16": "h", "ushort": "H", "uint16": "H",
    "int": "i", "int32": "i", "uint": "I", "uint32": "I",
    "float": "f", "float32": "f", "double": "d", "float64": "d",
}


def _parse_ply_header(fh):
    if fh.readline().strip() != b"ply":
        raise MeshFormatError("not a PLY file")
    fmt = None
    elements = []
    while True:
        line = fh.readline()
        if not line:
            raise MeshFormatError("truncated PLY header")
        parts = line.decode("ascii").split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if parts[1] == "list":
                elements[-1][2].append((parts[4], ("list", parts[2], parts[3])))
            else:
                elements[-1][2].append((parts[2], parts[1]))
        elif parts[0] == "end_header":
            return fmt, elements


def load_ply(path) -> TriangleMesh:
    """Triangle mesh from an ASCII or binary PLY file; polygons are fan-triangulated."""
    with open(path, "rb") as fh:
        fmt, elements = _parse_ply_header(fh)
        if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
            raise MeshFormatError(f"unsupported PLY format {fmt}")
        endian = "<" if fmt == "binary_little_endian" else ">"
        tokens = iter(fh.read().split()) if fmt == "ascii" else None
        raw = None if tokens is not None else fh
        vertices, faces = None, []

        def read(t):
            if tokens is not None:
                tok = next(tokens)
                return float(tok) if _PLY_TYPES[t] in "fd" else int(tok)
            code = endian + _PLY_TYPES[t]
            return struct.unpack(code, raw.read(struct.calcsize(code)))[0]

        for name, count, props in elements:
            if name == "vertex":
                cols = [p[0] for p in props]
                data = np.empty((count, len(props)))
                for i in range(count):
                    for j, (_, t) in enumerate(props):
                        data[i, j] = read(t)
                vertices = data[:, [cols.index(c) for c in ("x", "y", "z")]]
            else:
                for _ in range(count):
                    for pname, t in props:
                        if isinstance(t, tuple):
                            n = read(t[1])
                            vals = [read(t[2]) for _ in range(n)]
                            if name == "face" and pname in ("vertex_indices", "vertex_index"):
                                faces.extend(_fan(vals))
                        else:
                            read(t)
    if vertices is None or not faces:
        raise MeshFormatError(f"{path}: missing vertices or faces")
    return TriangleMesh(vertices, np.array(faces))


def load_mesh(path) -> TriangleMesh:
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        return load_obj(path)
    if suffix == ".ply":
        return load_ply(path)
    raise MeshFormatError(f"unsupported mesh extension {suffix}")


def save_ply_points(cloud: PointCloud, path, scalars: dict | None = None) -> None:
    """Binary little-endian PLY with optional normals and per-point float scalars."""
    scalars = scalars or {}
    n = len(cloud)
    cols = [cloud.points]
    names = ["x", "y", "z"]
    if cloud.normals is not None:
        cols.append(cloud.normals)
        names += ["nx", "ny", "nz"]
    for key, val in scalars.items():
        val = np.asarray(val, dtype=float).reshape(n, 1)
        cols.append(val)
        names.append(key)
    data = np.hstack(cols).astype("<f4")
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {nm}" for nm in names]
    header.append("end_header\n")
    with open(path, "wb") as fh:
        fh.write("\n".join(header).encode("ascii"))
        fh.write(data.tobytes())
