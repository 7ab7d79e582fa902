"""Latent -> FlexiCubes parameters at 256^3, vertex averaging, and isosurface extraction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..config import FLEXI_WEIGHT_DIMS, INACTIVE_SDF, MESH_RESOLUTION
from ..nn.layers import Linear, silu
from ..sparse import SparseGrid, coord_keys, neighbor_table, sparse_conv3, subdivide
from .gaussians import softplus

# corner c sits at offset ((c >> 2) & 1, (c >> 1) & 1, c & 1), the same order subdivide uses
CORNERS = np.array([((c >> 2) & 1, (c >> 1) & 1, c & 1) for c in range(8)], dtype=np.int64)
# 12 cube edges as (lower corner, upper corner), grouped by axis x, y, z
EDGES = np.array([(0, 4), (1, 5), (2, 6), (3, 7),
                  (0, 2), (1, 3), (4, 6), (5, 7),
                  (0, 1), (2, 3), (4, 5), (6, 7)], dtype=np.int64)
EDGE_AXIS = np.repeat(np.arange(3), 4)
# raw head layout
HEAD_SPLITS = {"alpha": 8, "beta": 12, "gamma": 1, "delta": 24, "sdf": 8, "color": 24, "normal": 24}
HEAD_CHANNELS = sum(HEAD_SPLITS.values())
DELTA_LIMIT = 0.5  # corner deformation bound, in cells
NORMAL_EPS = 1e-12


class EmptyMeshError(ValueError):
    """The SDF has no sign change, so there is no isosurface to extract."""


@dataclass(frozen=True)
class FlexiGrid:
    """Per active voxel: weights (alpha 8, beta 12, gamma, delta 8x3) and corner values (sdf, color, normal)."""

    resolution: int
    coords: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    delta: np.ndarray
    sdf: np.ndarray
    color: np.ndarray
    normal: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.coords).reshape(-1, 3).shape[0]
        shapes = {"alpha": (n, 8), "beta": (n, 12), "gamma": (n,), "delta": (n, 8, 3),
                  "sdf": (n, 8), "color": (n, 8, 3), "normal": (n, 8, 3)}
        for name, shape in shapes.items():
            if np.shape(getattr(self, name)) != shape:
                raise ValueError(f"{name} has shape {np.shape(getattr(self, name))}, expected {shape}")

    @property
    def num_active(self) -> int:
        return self.coords.shape[0]

    def weight_dims(self) -> int:
        return self.alpha.shape[1] + self.beta.shape[1] + 1 + self.delta.shape[1] * 3

    def check_invariants(self) -> list[str]:
        bad = []
        if self.weight_dims() != FLEXI_WEIGHT_DIMS:
            bad.append("weight count")
        if np.any(self.alpha <= 0) or np.any(self.beta <= 0) or np.any(self.gamma <= 0):
            bad.append("non-positive interpolation/splitting weight")
        if np.any(np.abs(self.delta) > DELTA_LIMIT):
            bad.append("deformation beyond half a cell")
        if np.any((self.color < 0) | (self.color > 1)):
            bad.append("color outside [0, 1]")
        nn = np.linalg.norm(self.normal, axis=-1)
        if np.any((nn > 1e-9) & (np.abs(nn - 1) > 1e-9)):
            bad.append("normal neither unit nor zero")
        if not all(np.all(np.isfinite(getattr(self, k))) for k in ("alpha", "beta", "gamma", "delta", "sdf")):
            bad.append("non-finite value")
        return bad

    def permuted(self, perm) -> "FlexiGrid":
        return FlexiGrid(self.resolution, self.coords[perm], self.alpha[perm], self.beta[perm], self.gamma[perm],
                         self.delta[perm], self.sdf[perm], self.color[perm], self.normal[perm])


def flexi_from_raw(raw, coords, resolution: int) -> FlexiGrid:
    raw = np.asarray(raw, dtype=np.float64)
    n = np.asarray(coords).reshape(-1, 3).shape[0]
    if raw.shape != (n, HEAD_CHANNELS):
        raise ValueError(f"raw output {raw.shape} != ({n}, {HEAD_CHANNELS})")
    parts, o = {}, 0
    for k, w in HEAD_SPLITS.items():
        parts[k] = raw[:, o:o + w]
        o += w
    nrm = parts["normal"].reshape(n, 8, 3)
    length = np.linalg.norm(nrm, axis=-1, keepdims=True)
    nrm = np.where(length > NORMAL_EPS, nrm / np.maximum(length, NORMAL_EPS), 0.0)
    return FlexiGrid(
        resolution, np.asarray(coords, dtype=np.int64).reshape(-1, 3),
        softplus(parts["alpha"]), softplus(parts["beta"]), softplus(parts["gamma"][:, 0]),
        DELTA_LIMIT * np.tanh(parts["delta"]).reshape(n, 8, 3), parts["sdf"].copy(),
        (1.0 / (1.0 + np.exp(-parts["color"]))).reshape(n, 8, 3), nrm)


@dataclass
class MeshUpsampler:
    """Two (subdivide -> submanifold conv -> silu) stages, then a per-voxel linear head."""

    conv1_w: np.ndarray
    conv1_b: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    head: Linear

    @classmethod
    def init(cls, seed: int, channels: int, hidden: int = 16, head_scale: float = 1.0) -> "MeshUpsampler":
        rng = np.random.default_rng(seed)
        w1 = rng.normal(0.0, 1.0 / np.sqrt(27 * channels), (3, 3, 3, channels, hidden))
        w2 = rng.normal(0.0, 1.0 / np.sqrt(27 * hidden), (3, 3, 3, hidden, hidden))
        wh = rng.normal(0.0, head_scale / np.sqrt(hidden), (hidden, HEAD_CHANNELS))
        return cls(w1, np.zeros(hidden), w2, np.zeros(hidden), Linear(wh, np.zeros(HEAD_CHANNELS)))

    @property
    def in_channels(self) -> int:
        return self.conv1_w.shape[3]

    def tensors(self) -> dict:
        return {"up1": self.conv1_w, "up1_b": self.conv1_b, "up2": self.conv2_w, "up2_b": self.conv2_b,
                **self.head.tensors("head")}

    def config(self) -> dict:
        return {"kind": "mesh_upsampler", "in_channels": self.in_channels, "hidden": self.conv1_w.shape[4]}

    @classmethod
    def load(cls, t: dict, cfg: dict | None = None) -> "MeshUpsampler":
        return cls(t["up1"], t["up1_b"], t["up2"], t["up2_b"], Linear.load(t, "head"))


def decode_mesh_params(latents: SparseGrid, up: MeshUpsampler) -> FlexiGrid:
    if latents.channels != up.in_channels:
        raise ValueError(f"latent channels {latents.channels} do not match upsampler input {up.in_channels}")
    g = latents
    for w, b in ((up.conv1_w, up.conv1_b), (up.conv2_w, up.conv2_b)):
        g = subdivide(g)
        g = sparse_conv3(g, w, b, neighbor_table(g))
        g = g.with_features(silu(g.features))
    return flexi_from_raw(up.head(g.features), g.coords, g.resolution)


# -- densified accessor -------------------------------------------------------------


def _vkeys(v, resolution: int) -> np.ndarray:
    m = resolution + 1
    v = np.asarray(v, dtype=np.int64)
    return (v[..., 0] * m + v[..., 1]) * m + v[..., 2]


def group_mean(keys, values):
    """Mean of ``values`` rows grouped by ``keys``; summation order is fixed by sorting, so any
    permutation of the inputs produces bit-identical output. Returns (unique keys, means, counts, order, starts)."""
    keys = np.asarray(keys)
    values = np.asarray(values, dtype=np.float64)
    cols = tuple(values.reshape(len(keys), -1).T[::-1])
    order = np.lexsort(cols + (keys,)) if len(keys) else np.zeros(0, np.int64)
    k = keys[order]
    starts = np.flatnonzero(np.r_[True, k[1:] != k[:-1]]) if k.size else np.zeros(0, np.int64)
    counts = np.diff(np.r_[starts, k.size])
    v = values[order]
    sums = np.add.reduceat(v, starts, axis=0) if k.size else v[:0]
    shape = (-1,) + (1,) * (values.ndim - 1)
    return k[starts], sums / counts.reshape(shape), counts, order, starts


class VertexField:
    """Virtual dense (R+1)^3 vertex grid: stored vertices, INACTIVE_SDF and zero attributes elsewhere."""

    def __init__(self, resolution: int, vkeys, sdf, color=None, normal=None, delta=None,
                 cell_keys=None, alpha=None, beta=None, gamma=None):
        self.resolution = int(resolution)
        self.vkeys = np.asarray(vkeys, dtype=np.int64)
        nv = self.vkeys.size
        if nv > 1 and np.any(np.diff(self.vkeys) <= 0):
            raise ValueError("vertex keys must be strictly increasing")
        self.sdf = np.asarray(sdf, dtype=np.float64).reshape(nv)
        self.color = np.zeros((nv, 3)) if color is None else np.asarray(color, dtype=np.float64).reshape(nv, 3)
        self.normal = np.zeros((nv, 3)) if normal is None else np.asarray(normal, dtype=np.float64).reshape(nv, 3)
        self.delta = np.zeros((nv, 3)) if delta is None else np.asarray(delta, dtype=np.float64).reshape(nv, 3)
        self.cell_keys = np.zeros(0, np.int64) if cell_keys is None else np.asarray(cell_keys, dtype=np.int64)
        nc = self.cell_keys.size
        self.alpha = np.ones((nc, 8)) if alpha is None else np.asarray(alpha, dtype=np.float64)
        self.beta = np.ones((nc, 12)) if beta is None else np.asarray(beta, dtype=np.float64)
        self.gamma = np.ones(nc) if gamma is None else np.asarray(gamma, dtype=np.float64)

    @classmethod
    def from_dense(cls, sdf, color=None, normal=None, delta=None) -> "VertexField":
        """Wrap an (R+1)^3 array of vertex SDF values (optional (R+1)^3x3 attributes); weights are neutral."""
        sdf = np.asarray(sdf, dtype=np.float64)
        if sdf.ndim != 3 or len(set(sdf.shape)) != 1 or sdf.shape[0] < 2:
            raise ValueError("dense SDF must be a cube of (R+1)^3 vertex samples")
        r = sdf.shape[0] - 1
        keys = np.arange(sdf.size, dtype=np.int64)
        flat = (lambda a: None if a is None else np.asarray(a, dtype=np.float64).reshape(-1, 3))
        return cls(r, keys, sdf.ravel(), flat(color), flat(normal), flat(delta))

    def _rows(self, keys, table):
        pos = np.searchsorted(table, keys)
        pos_c = np.minimum(pos, max(table.size - 1, 0))
        hit = (table[pos_c] == keys) if table.size else np.zeros(keys.shape, bool)
        return np.where(hit, pos_c, -1)

    def vertex_rows(self, v) -> np.ndarray:
        return self._rows(_vkeys(v, self.resolution), self.vkeys)

    def sdf_at(self, v) -> np.ndarray:
        rows = self.vertex_rows(v)
        return np.where(rows >= 0, self.sdf[np.maximum(rows, 0)] if self.sdf.size else 0.0, INACTIVE_SDF)

    def _attr(self, v, arr):
        rows = self.vertex_rows(v)
        out = np.zeros(rows.shape + (3,))
        ok = rows >= 0
        out[ok] = arr[rows[ok]]
        return out

    def color_at(self, v):
        return self._attr(v, self.color)

    def normal_at(self, v):
        return self._attr(v, self.normal)

    def delta_at(self, v):
        return self._attr(v, self.delta)

    def weights_at(self, cells):
        """(alpha, beta, gamma) for cells, neutral (1) where the cell carries no weights."""
        cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
        rows = self._rows(coord_keys(cells, self.resolution), self.cell_keys)
        ok = rows >= 0
        a, b, g = np.ones((len(cells), 8)), np.ones((len(cells), 12)), np.ones(len(cells))
        a[ok], b[ok], g[ok] = self.alpha[rows[ok]], self.beta[rows[ok]], self.gamma[rows[ok]]
        return a, b, g

    def negative_vertices(self) -> np.ndarray:
        keys = self.vkeys[self.sdf < 0]
        m = self.resolution + 1
        return np.stack([keys // (m * m), (keys // m) % m, keys % m], axis=1)

    def dense_sdf(self) -> np.ndarray:
        """Materialize the (R+1)^3 SDF (small resolutions only)."""
        m = self.resolution + 1
        out = np.full(m ** 3, INACTIVE_SDF)
        out[self.vkeys] = self.sdf
        return out.reshape(m, m, m)


def densify(grid: FlexiGrid) -> VertexField:
    """Average per-voxel corner predictions onto shared grid vertices."""
    r = grid.resolution
    n = grid.num_active
    if n == 0:
        return VertexField(r, np.zeros(0, np.int64), np.zeros(0))
    corners = grid.coords[:, None, :] + CORNERS[None]
    vk = _vkeys(corners, r).ravel()
    packed = np.concatenate([grid.sdf.reshape(-1, 1), grid.color.reshape(-1, 3), grid.normal.reshape(-1, 3),
                             grid.delta.reshape(-1, 3)], axis=1)
    keys, mean, _, _, _ = group_mean(vk, packed)
    ck = coord_keys(grid.coords, r)
    order = np.argsort(ck, kind="stable")
    if ck.size > 1 and np.any(np.diff(ck[order]) == 0):
        raise ValueError("duplicate voxel in FlexiGrid")
    return VertexField(r, keys, mean[:, 0], mean[:, 1:4], mean[:, 4:7], mean[:, 7:10],
                       ck[order], grid.alpha[order], grid.beta[order], grid.gamma[order])


def vertex_spread(grid: FlexiGrid) -> float:
    """Mean over shared vertices of the variance of the per-voxel predictions (sdf, color, normal)."""
    if grid.num_active == 0:
        return 0.0
    vk = _vkeys(grid.coords[:, None, :] + CORNERS[None], grid.resolution).ravel()
    packed = np.concatenate([grid.sdf.reshape(-1, 1), grid.color.reshape(-1, 3), grid.normal.reshape(-1, 3)], 1)
    keys, mean, counts, order, starts = group_mean(vk, packed)
    dev = packed[order] - np.repeat(mean, counts, axis=0)
    var = np.add.reduceat((dev ** 2).sum(1), starts) / counts
    return float(var.mean())


# -- extraction ---------------------------------------------------------------------


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    colors: np.ndarray | None = None
    normals: np.ndarray | None = None

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_faces(self) -> int:
        return self.faces.shape[0]

    def face_cross(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_cross(), axis=1)

    def face_normals(self) -> np.ndarray:
        c = self.face_cross()
        return c / np.maximum(np.linalg.norm(c, axis=1, keepdims=True), 1e-300)

    def vertex_normals(self) -> np.ndarray:
        """Area-weighted geometric normals."""
        acc = np.zeros_like(self.vertices)
        c = self.face_cross()
        for k in range(3):
            np.add.at(acc, self.faces[:, k], c)
        return acc / np.maximum(np.linalg.norm(acc, axis=1, keepdims=True), 1e-300)

    def edge_counts(self) -> tuple[np.ndarray, np.ndarray]:
        e = np.sort(self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        return np.unique(e, axis=0, return_counts=True)

    def is_watertight(self) -> bool:
        _, counts = self.edge_counts()
        return bool(counts.size) and bool(np.all(counts == 2))

    def euler_characteristic(self) -> int:
        edges, _ = self.edge_counts()
        return int(self.num_vertices - len(edges) + self.num_faces)

    def check_invariants(self) -> list[str]:
        bad = []
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= self.num_vertices):
            bad.append("face index out of range")
        if self.faces.size and np.any(self.face_areas() <= 0):
            bad.append("degenerate triangle")
        return bad


@dataclass(frozen=True)
class ExtractionInfo:
    """Per surface cell: coordinates, dual vertex and the unweighted centroid of its edge crossings."""

    cells: np.ndarray
    dual: np.ndarray
    centroid: np.ndarray


def _cleanup(verts, faces, colors, normals):
    v = verts[faces]
    area2 = np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)
    faces = faces[area2 > 0]
    used, inv = np.unique(faces, return_inverse=True)
    faces = inv.reshape(-1, 3)
    return verts[used], faces, colors[used], normals[used], used


def flexicubes_extract(acc: VertexField, resolution: int | None = None, return_info: bool = False):
    """Dual isosurface of the zero level set (inside means sdf < 0)."""
    r = acc.resolution
    if resolution is not None and resolution != r:
        raise ValueError(f"accessor resolution {r} != requested {resolution}")
    neg = acc.negative_vertices()
    if neg.shape[0] == 0:
        raise EmptyMeshError("SDF never becomes negative; nothing to extract")
    cand = (neg[:, None, :] - CORNERS[None]).reshape(-1, 3)
    cand = cand[np.all((cand >= 0) & (cand < r), axis=1)]
    cand = np.unique(cand, axis=0)
    cv = cand[:, None, :] + CORNERS[None]
    d = acc.sdf_at(cv.reshape(-1, 3)).reshape(-1, 8)
    inside = d < 0
    surf = inside.any(1) & ~inside.all(1)
    if not surf.any():
        raise EmptyMeshError("SDF has no sign change inside the grid")
    cells, cv, d, inside = cand[surf], cv[surf], d[surf], inside[surf]
    nc = cells.shape[0]
    alpha, beta, gamma = acc.weights_at(cells)
    flat_cv = cv.reshape(-1, 3)
    pos = ((flat_cv + acc.delta_at(flat_cv)) / r - 0.5).reshape(nc, 8, 3)
    col = acc.color_at(flat_cv).reshape(nc, 8, 3)
    nrm = acc.normal_at(flat_cv).reshape(nc, 8, 3)

    ea, eb = EDGES[:, 0], EDGES[:, 1]
    crossing = inside[:, ea] != inside[:, eb]
    wa, wb = alpha[:, ea] * d[:, ea], alpha[:, eb] * d[:, eb]
    denom = np.where(crossing, wb - wa, 1.0)
    ta = np.where(crossing, wb / denom, 0.0)[..., None]
    tb = np.where(crossing, -wa / denom, 0.0)[..., None]

    def lerp(a):
        return ta * a[:, ea] + tb * a[:, eb]

    bw = (beta * crossing)[..., None]
    bsum = bw.sum(1)
    dual = (bw * lerp(pos)).sum(1) / bsum
    vcol = (bw * lerp(col)).sum(1) / bsum
    vnrm = (bw * lerp(nrm)).sum(1) / bsum
    centroid = (crossing[..., None] * lerp(pos)).sum(1) / crossing.sum(1, keepdims=True)

    # quads: every grid edge with a sign change is shared by (up to) four surface cells
    ci, ei = np.nonzero(crossing)
    axis = EDGE_AXIS[ei]
    lower = cells[ci] + CORNERS[ea[ei]]
    m = r + 1
    ekey = axis * m ** 3 + _vkeys(lower, r)
    off = CORNERS[ea[ei]]
    ob = off[np.arange(len(ei)), (axis + 1) % 3]
    oc = off[np.arange(len(ei)), (axis + 2) % 3]
    slot = np.select([(ob == 0) & (oc == 0), (ob == 1) & (oc == 0), (ob == 1) & (oc == 1)], [0, 1, 2], 3)
    order = np.lexsort((slot, ekey))
    ekey, ci, slot = ekey[order], ci[order], slot[order]
    lower_inside = inside[ci, ea[ei[order]]]
    starts = np.flatnonzero(np.r_[True, ekey[1:] != ekey[:-1]])
    counts = np.diff(np.r_[starts, ekey.size])
    full = starts[counts == 4]
    quads = np.stack([ci[full + k] for k in range(4)], axis=1)
    flip = ~lower_inside[full]
    quads[flip] = quads[flip][:, ::-1]
    g = gamma[quads]
    diag02 = g[:, 0] * g[:, 2] > g[:, 1] * g[:, 3]
    tri = np.where(diag02[:, None, None],
                   np.stack([quads[:, [0, 1, 2]], quads[:, [0, 2, 3]]], 1),
                   np.stack([quads[:, [0, 1, 3]], quads[:, [1, 2, 3]]], 1)).reshape(-1, 3)
    verts, faces, vcol, vnrm, used = _cleanup(dual, tri, vcol, vnrm)
    if faces.shape[0] == 0:
        raise EmptyMeshError("sign change only along the grid boundary; no closed quads")
    mesh = TriMesh(verts, faces, vcol, vnrm)
    if return_info:
        return mesh, ExtractionInfo(cells, dual, centroid)
    return mesh


def extract_mesh(grid: FlexiGrid) -> TriMesh:
    return flexicubes_extract(densify(grid), grid.resolution)


def sphere_sdf_grid(resolution: int, radius: float, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    """(R+1)^3 vertex samples of a sphere's signed distance in world units."""
    x = np.arange(resolution + 1) / resolution - 0.5
    gx, gy, gz = np.meshgrid(x, x, x, indexing="ij")
    c = np.asarray(center, dtype=np.float64)
    return np.sqrt((gx - c[0]) ** 2 + (gy - c[1]) ** 2 + (gz - c[2]) ** 2) - radius


__all__ = [
    "CORNERS", "EDGES", "HEAD_CHANNELS", "EmptyMeshError", "FlexiGrid", "MeshUpsampler", "TriMesh", "VertexField",
    "ExtractionInfo", "flexi_from_raw", "decode_mesh_params", "densify", "vertex_spread", "flexicubes_extract",
    "extract_mesh", "sphere_sdf_grid", "MESH_RESOLUTION",
]
