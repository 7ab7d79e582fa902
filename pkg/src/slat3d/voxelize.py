"""Surface voxelization of triangle meshes by separating-axis triangle/box tests."""

from __future__ import annotations

import numpy as np

from .config import GRID_RESOLUTION
from .sparse import SparseGrid, coord_keys, keys_to_coords

PAIR_BATCH = 1 << 20
BOX_SLACK = 1e-9  # widen each box a hair so touching counts as overlap under rounding


def _axis_test(axis, t0, t1, t2, half):
    """True where the projections of the triangle and the box onto ``axis`` overlap."""
    p0, p1, p2 = (np.sum(axis * t, axis=-1) for t in (t0, t1, t2))
    r = half * np.sum(np.abs(axis), axis=-1)
    lo = np.minimum(np.minimum(p0, p1), p2)
    hi = np.maximum(np.maximum(p0, p1), p2)
    return (lo <= r) & (hi >= -r)


def triangle_box_overlap(tri, centers, half: float = 0.5) -> np.ndarray:
    """Closed-box overlap test for pairs of triangles (P, 3, 3) and box centres (P, 3)."""
    t0, t1, t2 = (tri[:, k] - centers for k in range(3))
    h = half + BOX_SLACK
    ok = np.ones(len(centers), bool)
    for a in range(3):
        lo = np.minimum(np.minimum(t0[:, a], t1[:, a]), t2[:, a])
        hi = np.maximum(np.maximum(t0[:, a], t1[:, a]), t2[:, a])
        ok &= (lo <= h) & (hi >= -h)
    e = (t1 - t0, t2 - t1, t0 - t2)
    ok &= _axis_test(np.cross(e[0], e[1]), t0, t1, t2, h)
    eye = np.eye(3)
    for edge in e:
        for a in range(3):
            ok &= _axis_test(np.cross(eye[a], edge), t0, t1, t2, h)
    return ok


def voxelize_mesh(vertices, faces, resolution: int = GRID_RESOLUTION, fill: float = 1.0) -> SparseGrid:
    """Voxels of the (-0.5, 0.5)^3 cube whose closed box meets any triangle.

    Surfaces lying exactly on a voxel boundary activate the voxels on both
    sides. Geometry outside the cube is ignored.
    """
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if f.shape[0] == 0:
        raise ValueError("mesh has no faces")
    n = resolution
    tri = (v[f] + 0.5) * n  # voxel units
    lo = np.clip(np.ceil(tri.min(1)) - 1, 0, n - 1).astype(np.int64)
    hi = np.clip(np.floor(tri.max(1)), 0, n - 1).astype(np.int64)
    inside = np.all(tri.max(1) >= 0, 1) & np.all(tri.min(1) <= n, 1)
    ids = np.flatnonzero(inside)
    ext = hi[ids] - lo[ids] + 1
    counts = np.prod(ext, axis=1)
    csum = np.cumsum(counts)
    found = []
    start = 0
    while start < len(ids):
        done = csum[start - 1] if start else 0
        stop = max(start + 1, int(np.searchsorted(csum, done + PAIR_BATCH, side="right")))
        sel = ids[start:stop]
        cnt, ex = counts[start:stop], ext[start:stop]
        owner = np.repeat(np.arange(len(sel)), cnt)
        local = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        ey, ez = ex[owner, 1], ex[owner, 2]
        cell = lo[sel][owner] + np.stack([local // (ey * ez), (local // ez) % ey, local % ez], 1)
        hit = triangle_box_overlap(tri[sel][owner], cell + 0.5)
        found.append(coord_keys(cell[hit], n))
        start = stop
    keys = np.unique(np.concatenate(found)) if found else np.zeros(0, np.int64)
    return SparseGrid(n, keys_to_coords(keys, n), np.full((len(keys), 1), float(fill)))
