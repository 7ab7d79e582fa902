"""Z-buffered software triangle rasterizer with perspective-correct attributes."""

from __future__ import annotations

import numpy as np

from ..decoders.mesh import TriMesh
from ..multiview import Camera
from .image import WHITE, RenderedImage

NEAR = 1e-3
EDGE_EPS = 1e-10  # barycentric slack so pixel centres on shared edges never fall through
DEFAULT_COLOR = (0.8, 0.8, 0.8)
FRAGMENT_BATCH = 1 << 21


def rasterize_mesh(mesh: TriMesh, camera: Camera, bg=WHITE) -> RenderedImage:
    """Planes: ``mask``, ``normal_geo`` (face normals), ``normal`` (interpolated vertex normals), ``color``.

    A pixel is covered when its centre lies inside or on a triangle edge.
    Triangles with any vertex behind the near plane are skipped.
    """
    if mesh.num_faces == 0:
        raise ValueError("cannot rasterize an empty mesh")
    h, w = camera.height, camera.width
    f = camera.focal
    pc = camera.to_camera(mesh.vertices)
    z = pc[:, 2]
    zs = np.where(z > NEAR, z, 1.0)
    u = 0.5 * w + f * pc[:, 0] / zs
    v = 0.5 * h - f * pc[:, 1] / zs
    colors = mesh.colors if mesh.colors is not None else np.tile(DEFAULT_COLOR, (mesh.num_vertices, 1))
    vnorm = mesh.normals if mesh.normals is not None else mesh.vertex_normals()
    fnorm = mesh.face_normals()

    zbuf = np.full(h * w, np.inf)
    tri_id = np.full(h * w, -1, dtype=np.int64)
    bary = np.zeros((h * w, 3))
    fz = z[mesh.faces]
    fu, fv = u[mesh.faces], v[mesh.faces]
    j0 = np.clip(np.floor(fu.min(1) - 0.5), 0, w).astype(np.int64)
    j1 = np.clip(np.ceil(fu.max(1) + 0.5), 0, w).astype(np.int64)
    i0 = np.clip(np.floor(fv.min(1) - 0.5), 0, h).astype(np.int64)
    i1 = np.clip(np.ceil(fv.max(1) + 0.5), 0, h).astype(np.int64)
    area = (fu[:, 1] - fu[:, 0]) * (fv[:, 2] - fv[:, 0]) - (fu[:, 2] - fu[:, 0]) * (fv[:, 1] - fv[:, 0])
    bw_, bh_ = j1 - j0, i1 - i0
    ok = (fz.min(1) > NEAR) & (area != 0) & (bw_ > 0) & (bh_ > 0)
    tris = np.flatnonzero(ok)
    sizes = (bw_ * bh_)[tris]
    # triangles in index order, batched so each batch holds at most FRAGMENT_BATCH candidate pixels
    bounds = np.searchsorted(np.cumsum(sizes), np.arange(FRAGMENT_BATCH, sizes.sum() + FRAGMENT_BATCH, FRAGMENT_BATCH))
    start = 0
    for stop in np.unique(np.r_[bounds, len(tris)]):
        stop = max(int(stop), start + 1)
        if start >= len(tris):
            break
        t = tris[start:stop]
        start = stop
        cnt = (bw_ * bh_)[t]
        owner = np.repeat(np.arange(len(t)), cnt)
        local = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        tt = t[owner]
        pj = j0[tt] + local % bw_[tt]
        pi = i0[tt] + local // bw_[tt]
        px, py = pj + 0.5, pi + 0.5
        xs, ys, ar = fu[tt], fv[tt], area[tt]
        w0 = ((xs[:, 1] - px) * (ys[:, 2] - py) - (xs[:, 2] - px) * (ys[:, 1] - py)) / ar
        w1 = ((xs[:, 2] - px) * (ys[:, 0] - py) - (xs[:, 0] - px) * (ys[:, 2] - py)) / ar
        w2 = 1.0 - w0 - w1
        inside = (w0 >= -EDGE_EPS) & (w1 >= -EDGE_EPS) & (w2 >= -EDGE_EPS)
        if not inside.any():
            continue
        wts = np.stack([w0, w1, w2], 1)[inside]
        tt, pix = tt[inside], (pi * w + pj)[inside]
        zz = fz[tt]
        depth = 1.0 / np.sum(wts / zz, axis=1)
        # nearest fragment per pixel, lowest triangle index on ties
        order = np.lexsort((tt, depth, pix))
        first = order[np.r_[True, pix[order][1:] != pix[order][:-1]]]
        pix, depth, tt = pix[first], depth[first], tt[first]
        win = depth < zbuf[pix]
        pix, depth, tt = pix[win], depth[win], tt[win]
        zbuf[pix] = depth
        tri_id[pix] = tt
        bary[pix] = wts[first][win] / zz[first][win] * depth[:, None]
    zbuf, tri_id, bary = zbuf.reshape(h, w), tri_id.reshape(h, w), bary.reshape(h, w, 3)

    mask = tri_id >= 0
    col = np.zeros((h, w, 3))
    nrm = np.zeros((h, w, 3))
    geo = np.zeros((h, w, 3))
    if mask.any():
        tri = mesh.faces[tri_id[mask]]
        bw = bary[mask]
        col[mask] = np.einsum("pk,pkc->pc", bw, colors[tri])
        n = np.einsum("pk,pkc->pc", bw, vnorm[tri])
        nrm[mask] = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
        geo[mask] = fnorm[tri_id[mask]]
    alpha = mask.astype(np.float64)
    rgb = np.where(mask[..., None], np.clip(col, 0.0, 1.0), np.asarray(bg, dtype=np.float64))
    planes = {"mask": alpha, "normal_geo": geo, "normal": nrm, "color": col}
    return RenderedImage(rgb, alpha, zbuf, planes)
