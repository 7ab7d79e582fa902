"""Decoder training objectives: Gaussian and mesh reconstruction losses with their regularizers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import expit

from ..config import (COLOR_WEIGHT, DEPTH_HUBER_DELTA, DEPTH_HUBER_WEIGHT, GAUSSIAN_PARAMS, LPIPS_WEIGHT,
                      MIN_GAUSSIAN_SCALE, SSIM_WEIGHT, TSDF_WEIGHT)
from ..decoders.gaussians import SCALE, GaussianSet, softplus
from ..decoders.mesh import ExtractionInfo, FlexiGrid, TriMesh, VertexField, vertex_spread
from ..render.image import RenderedImage, image_l1, image_ssim

TSDF_NEIGHBOURS = 16


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    parts: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.parts[key]


def no_perceptual(a, b) -> float:
    """Stand-in for a learned perceptual distance; plug a real one in through ``perceptual=``."""
    return 0.0


def recon_loss(pred, ref, perceptual=no_perceptual) -> float:
    """L1 + 0.2 (1 - SSIM) + 0.2 perceptual on one image pair."""
    return image_l1(pred, ref) + SSIM_WEIGHT * (1.0 - image_ssim(pred, ref)) + LPIPS_WEIGHT * perceptual(pred, ref)


def _pairs(preds, refs):
    preds = [preds] if isinstance(preds, (RenderedImage, np.ndarray)) else list(preds)
    refs = [refs] if isinstance(refs, (RenderedImage, np.ndarray)) else list(refs)
    if len(preds) != len(refs):
        raise ValueError(f"{len(preds)} renders but {len(refs)} references")
    return list(zip(preds, refs))


# -- Gaussians ----------------------------------------------------------------------


def volume_loss(scales) -> float:
    s = np.asarray(scales, dtype=np.float64).reshape(-1, 3)
    return float(np.mean(np.prod(s, axis=1))) if s.size else 0.0


def opacity_loss(opacities) -> float:
    a = np.asarray(opacities, dtype=np.float64).ravel()
    return float(np.mean((1.0 - a) ** 2)) if a.size else 0.0


def gs_regularizer(raw):
    """L_vol + L_alpha as a function of raw head output (any shape ending in multiples of 14), with gradient."""
    raw = np.asarray(raw, dtype=np.float64)
    r = raw.reshape(-1, GAUSSIAN_PARAMS)
    m = r.shape[0]
    s = MIN_GAUSSIAN_SCALE + softplus(r[:, SCALE])
    a = expit(r[:, 6])
    prod = np.prod(s, axis=1)
    value = float(prod.mean() + np.mean((1.0 - a) ** 2))
    g = np.zeros_like(r)
    g[:, SCALE] = prod[:, None] / s * expit(r[:, SCALE]) / m
    g[:, 6] = -2.0 * (1.0 - a) * a * (1.0 - a) / m
    return value, g.reshape(raw.shape)


def loss_gs(renders, refs, gaussians: GaussianSet, perceptual=no_perceptual) -> LossBreakdown:
    pairs = _pairs(renders, refs)
    recon = float(np.mean([recon_loss(p, r, perceptual) for p, r in pairs])) if pairs else 0.0
    vol = volume_loss(gaussians.scales)
    alpha = opacity_loss(gaussians.opacities)
    return LossBreakdown(recon + vol + alpha, {"recon": recon, "vol": vol, "alpha": alpha})


# -- mesh ---------------------------------------------------------------------------


def huber(err, delta: float = DEPTH_HUBER_DELTA) -> np.ndarray:
    e = np.abs(np.asarray(err, dtype=np.float64))
    return np.where(e <= delta, 0.5 * e * e, delta * (e - 0.5 * delta))


def huber_loss(pred, ref, mask=None, delta: float = DEPTH_HUBER_DELTA) -> float:
    pred, ref = np.asarray(pred, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if mask is not None:
        m = np.asarray(mask, bool)
        pred, ref = pred[m], ref[m]
    err = pred - ref
    return float(huber(err, delta).mean()) if err.size else 0.0


def huber_loss_grad(pred, ref, mask=None, delta: float = DEPTH_HUBER_DELTA) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    err = pred - np.asarray(ref, dtype=np.float64)
    m = np.ones(pred.shape, bool) if mask is None else np.asarray(mask, bool)
    n = max(int(m.sum()), 1)
    return np.where(m, np.clip(err, -delta, delta), 0.0) / n


def dual_deviation(info: ExtractionInfo) -> float:
    """Mean squared distance between each dual vertex and the centroid of its edge crossings."""
    if info.dual.shape[0] == 0:
        return 0.0
    return float(np.mean(np.sum((info.dual - info.centroid) ** 2, axis=1)))


def point_triangle_distance(p, a, b, c) -> np.ndarray:
    """Euclidean distance from points p to triangles (a, b, c), all (..., 3); closest-feature case analysis."""
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = np.sum(ab * ap, -1), np.sum(ac * ap, -1)
    bp = p - b
    d3, d4 = np.sum(ab * bp, -1), np.sum(ac * bp, -1)
    cp = p - c
    d5, d6 = np.sum(ab * cp, -1), np.sum(ac * cp, -1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v_face, w_face = vb / denom, vc / denom
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
    closest = a + v_face[..., None] * ab + w_face[..., None] * ac
    conds = [
        (d1 <= 0) & (d2 <= 0),
        (d3 >= 0) & (d4 <= d3),
        (d6 >= 0) & (d5 <= d6),
        (vc <= 0) & (d1 >= 0) & (d3 <= 0),
        (vb <= 0) & (d2 >= 0) & (d6 <= 0),
        (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0),
    ]
    choices = [a, b, c, a + t_ab[..., None] * ab, a + t_ac[..., None] * ac, b + t_bc[..., None] * (c - b)]
    for cond, ch in zip(conds[::-1], choices[::-1]):
        closest = np.where(cond[..., None], ch, closest)
    return np.linalg.norm(p - closest, axis=-1)


def mesh_distance(points, mesh: TriMesh, k: int = TSDF_NEIGHBOURS) -> np.ndarray:
    """Distance from points to the mesh, searching the k triangles with the nearest centroids."""
    tri = mesh.vertices[mesh.faces]
    k = min(k, len(tri))
    _, idx = cKDTree(tri.mean(1)).query(points, k=k)
    idx = np.asarray(idx).reshape(len(points), k)
    t = tri[idx]
    return point_triangle_distance(np.asarray(points)[:, None, :], t[..., 0, :], t[..., 1, :], t[..., 2, :]).min(1)


def tsdf_loss(acc: VertexField, mesh: TriMesh, clamp: float | None = None) -> float:
    """MSE over stored vertices between clamped predicted SDF and the clamped signed distance to ``mesh``.

    The sign of the target follows the prediction; ``clamp`` defaults to one grid cell.
    """
    r = acc.resolution
    clamp = 1.0 / r if clamp is None else clamp
    if acc.vkeys.size == 0:
        return 0.0
    m = r + 1
    k = acc.vkeys
    coords = np.stack([k // (m * m), (k // m) % m, k % m], 1)
    pos = (coords + acc.delta) / r - 0.5
    d = np.clip(acc.sdf, -clamp, clamp)
    target = np.sign(acc.sdf) * clamp
    edge = np.linalg.norm(mesh.vertices[mesh.faces] - np.roll(mesh.vertices[mesh.faces], 1, axis=1), axis=-1).max()
    near_vertex, _ = cKDTree(mesh.vertices).query(pos)
    close = near_vertex - edge < clamp
    if close.any():
        dist = mesh_distance(pos[close], mesh)
        target[close] = np.sign(acc.sdf[close]) * np.minimum(dist, clamp)
    return float(np.mean((d - target) ** 2))


def _normal_image(n):
    return 0.5 * (np.asarray(n, dtype=np.float64) + 1.0)


def loss_mesh(pred: RenderedImage, ref: RenderedImage, flexi: FlexiGrid | None = None, acc: VertexField | None = None,
              mesh: TriMesh | None = None, info: ExtractionInfo | None = None,
              perceptual=no_perceptual) -> LossBreakdown:
    """Geometry + 0.1 color + regularizers for one rendered view against its reference planes."""
    if pred.rgb.shape != ref.rgb.shape:
        raise ValueError(f"image shapes differ: {pred.rgb.shape} vs {ref.rgb.shape}")
    pm, rm = pred.planes["mask"], ref.planes["mask"]
    fg = (pm > 0) & (rm > 0)
    parts = {
        "mask": image_l1(pm, rm),
        "depth": huber_loss(pred.depth, ref.depth, fg),
        "normal_geo": recon_loss(_normal_image(pred.planes["normal_geo"]), _normal_image(ref.planes["normal_geo"]),
                                 perceptual),
        "color": recon_loss(pred.planes["color"], ref.planes["color"], perceptual),
        "normal": recon_loss(_normal_image(pred.planes["normal"]), _normal_image(ref.planes["normal"]), perceptual),
        "consist": vertex_spread(flexi) if flexi is not None else 0.0,
        "dev": dual_deviation(info) if info is not None else 0.0,
        "tsdf": tsdf_loss(acc, mesh) if acc is not None and mesh is not None else 0.0,
    }
    geo = parts["mask"] + DEPTH_HUBER_WEIGHT * parts["depth"] + parts["normal_geo"]
    color = parts["color"] + parts["normal"]
    reg = parts["consist"] + parts["dev"] + TSDF_WEIGHT * parts["tsdf"]
    parts.update(geo=geo, color_total=color, reg=reg)
    return LossBreakdown(geo + COLOR_WEIGHT * color + reg, parts)
