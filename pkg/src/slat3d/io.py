"""Binary and text file formats.

SLAT sparse grid::

    b"SLAT" | version u32 | N u32 | C u32 | L u64
    L records of x, y, z as u16 little-endian
    L*C f32 little-endian features (row-major)

DNSE dense tensor::

    b"DNSE" | version u32 | ndim u32 | dims u32[ndim] | f32 data, row-major

Weight archive: a directory holding ``manifest.json`` plus one ``<name>.dnse``
per tensor.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .sparse import SparseGrid

FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


def _read_magic(buf: bytes, magic: bytes) -> None:
    if buf[:4] != magic:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {magic!r}")


def write_sparse(path, grid: SparseGrid) -> None:
    header = b"SLAT" + struct.pack("<IIIQ", FORMAT_VERSION, grid.resolution, grid.channels, grid.num_active)
    coords = grid.coords.astype("<u2").tobytes()
    feats = grid.features.astype("<f4").tobytes()
    Path(path).write_bytes(header + coords + feats)


def read_sparse(path) -> SparseGrid:
    buf = Path(path).read_bytes()
    _read_magic(buf, b"SLAT")
    try:
        version, n, c, L = struct.unpack_from("<IIIQ", buf, 4)
    except struct.error as exc:
        raise FormatError(f"truncated SLAT header in {path}") from exc
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported SLAT version {version}")
    off = 4 + 20
    need = off + 6 * L + 4 * L * c
    if len(buf) != need:
        raise FormatError(f"SLAT size mismatch: {len(buf)} bytes, expected {need}")
    coords = np.frombuffer(buf, "<u2", count=3 * L, offset=off).reshape(L, 3).astype(np.int64)
    feats = np.frombuffer(buf, "<f4", count=L * c, offset=off + 6 * L).reshape(L, c).astype(np.float64)
    return SparseGrid(n, coords, feats)


def write_dense(path, array) -> None:
    a = np.asarray(array)
    header = b"DNSE" + struct.pack("<II", FORMAT_VERSION, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_dense(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    _read_magic(buf, b"DNSE")
    version, ndim = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported DNSE version {version}")
    dims = struct.unpack_from(f"<{ndim}I", buf, 12)
    off = 12 + 4 * ndim
    count = int(np.prod(dims)) if ndim else 1
    if len(buf) != off + 4 * count:
        raise FormatError(f"DNSE size mismatch in {path}")
    return np.frombuffer(buf, "<f4", count=count, offset=off).reshape(dims).astype(np.float64)


def save_archive(directory, tensors: dict, meta: dict) -> None:
    """Write named tensors plus a JSON manifest; ``meta`` must be JSON-serializable."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        write_dense(d / f"{name}.dnse", arr)
        entries[name] = list(arr.shape)
    manifest = {"meta": meta, "tensors": entries}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_archive(directory) -> tuple[dict, dict]:
    d = Path(directory)
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise FormatError(f"no manifest.json in {d}")
    manifest = json.loads(mpath.read_text())
    tensors = {}
    for name, shape in manifest["tensors"].items():
        arr = read_dense(d / f"{name}.dnse")
        if list(arr.shape) != list(shape):
            raise FormatError(f"tensor {name}: shape {arr.shape} != manifest {shape}")
        tensors[name] = arr
    return tensors, manifest["meta"]


# -- images ---------------------------------------------------------------


def write_ppm(path, rgb) -> None:
    """Binary P6, 8-bit, rows top to bottom."""
    a = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
    h, w = a.shape[:2]
    data = np.round(a * 255.0).astype(np.uint8).tobytes()
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + data)


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    parts = buf.split(maxsplit=4)
    if parts[0] != b"P6":
        raise FormatError("not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    data = parts[4]
    return np.frombuffer(data, np.uint8, count=w * h * 3).reshape(h, w, 3) / float(maxval)


def write_pfm(path, image) -> None:
    """Little-endian PFM ('Pf' grey or 'PF' colour); stored bottom row first."""
    a = np.asarray(image, dtype="<f4")
    kind = b"PF" if a.ndim == 3 else b"Pf"
    h, w = a.shape[:2]
    body = np.ascontiguousarray(a[::-1]).tobytes()
    Path(path).write_bytes(kind + f"\n{w} {h}\n-1.0\n".encode() + body)


def read_pfm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    parts = buf.split(maxsplit=4)
    kind, w, h, scale = parts[0], int(parts[1]), int(parts[2]), float(parts[3])
    ch = 3 if kind == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    a = np.frombuffer(parts[4], dtype, count=w * h * ch)
    a = a.reshape((h, w, 3) if ch == 3 else (h, w))[::-1]
    return a.astype(np.float64)


# -- meshes ------------------------------------------------------------------


def read_obj(path) -> tuple[np.ndarray, np.ndarray]:
    """Vertices and triangles of a Wavefront OBJ; polygons are fan-triangulated."""
    verts, faces = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = []
            for tok in parts[1:]:
                i = int(tok.split("/")[0])
                idx.append(i - 1 if i > 0 else len(verts) + i)
            if len(idx) < 3:
                raise FormatError(f"{path}:{lineno}: face with fewer than 3 vertices")
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
    v = np.array(verts, dtype=np.float64).reshape(-1, 3)
    f = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if f.size and (f.min() < 0 or f.max() >= len(v)):
        raise FormatError(f"{path}: face index out of range")
    return v, f


def write_obj(path, vertices, faces, normals=None) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in np.asarray(vertices)]
    if normals is not None:
        lines += [f"vn {x:.9g} {y:.9g} {z:.9g}" for x, y, z in np.asarray(normals)]
        lines += [f"f {a+1}//{a+1} {b+1}//{b+1} {c+1}//{c+1}" for a, b, c in np.asarray(faces)]
    else:
        lines += [f"f {a+1} {b+1} {c+1}" for a, b, c in np.asarray(faces)]
    Path(path).write_text("\n".join(lines) + "\n")


# -- PLY ---------------------------------------------------------------------

_PLY_TYPES = {
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
    "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
    "short": "<i2", "ushort": "<u2",
}


def write_ply(path, vertex: dict, faces=None) -> None:
    """Binary little-endian PLY. ``vertex`` maps property name -> (V,) array;
    uint8 arrays are written as uchar, everything else as float."""
    names = list(vertex)
    n = len(next(iter(vertex.values()))) if names else 0
    dtype = []
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    for name in names:
        arr = np.asarray(vertex[name])
        if arr.dtype == np.uint8:
            dtype.append((name, "u1"))
            lines.append(f"property uchar {name}")
        else:
            dtype.append((name, "<f4"))
            lines.append(f"property float {name}")
    if faces is not None:
        lines.append(f"element face {len(faces)}")
        lines.append("property list uchar int vertex_indices")
    lines.append("end_header")
    rec = np.empty(n, dtype=dtype)
    for name in names:
        rec[name] = vertex[name]
    body = rec.tobytes()
    if faces is not None:
        f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        frec = np.empty(len(f), dtype=[("n", "u1"), ("i", "<i4", (3,))])
        frec["n"] = 3
        frec["i"] = f
        body += frec.tobytes()
    Path(path).write_bytes(("\n".join(lines) + "\n").encode() + body)


def read_ply(path) -> tuple[dict, np.ndarray | None]:
    buf = Path(path).read_bytes()
    end = buf.find(b"end_header\n")
    if not buf.startswith(b"ply") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    header = buf[:end].decode().splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise FormatError(f"{path}: only binary little-endian PLY is supported")
    elements = []
    for line in header:
        parts = line.split()
        if parts[0] == "element":
            elements.append([parts[1], int(parts[2]), []])
        elif parts[0] == "property":
            elements[-1][2].append(parts[1:])
    off = end + len(b"end_header\n")
    vertex, faces = {}, None
    for name, count, props in elements:
        if name == "vertex":
            dtype = [(p[1], _PLY_TYPES[p[0]]) for p in props]
            rec = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
            off += rec.nbytes
            vertex = {k: np.array(rec[k]) for k, _ in dtype}
        elif name == "face":
            p = props[0]
            if p[0] != "list":
                raise FormatError("face element must be a list property")
            dtype = [("n", _PLY_TYPES[p[1]]), ("i", _PLY_TYPES[p[2]], (3,))]
            rec = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
            if count and np.any(rec["n"] != 3):
                raise FormatError("only triangle faces are supported")
            off += rec.nbytes
            faces = np.array(rec["i"], dtype=np.int64)
        else:
            raise FormatError(f"unsupported PLY element {name}")
    return vertex, faces


def write_points_ply(path, points, normals=None) -> None:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    vertex = {"x": p[:, 0], "y": p[:, 1], "z": p[:, 2]}
    if normals is not None:
        nrm = np.asarray(normals).reshape(-1, 3)
        vertex.update(nx=nrm[:, 0], ny=nrm[:, 1], nz=nrm[:, 2])
    write_ply(path, vertex)


def read_points_ply(path) -> np.ndarray:
    vertex, _ = read_ply(path)
    try:
        return np.stack([vertex["x"], vertex["y"], vertex["z"]], axis=1).astype(np.float64)
    except KeyError as exc:
        raise FormatError(f"{path}: missing coordinate property {exc}") from exc
