"""Fixed-step emission-absorption ray marching through the unit cube."""

from __future__ import annotations

import numpy as np

from ..config import TRANSMITTANCE_CUTOFF
from ..multiview import Camera, pixel_rays
from .image import WHITE, RenderedImage

DEFAULT_STEP = 0.5 / 512  # half a fine texel


def ray_box(origin, dirs, lo=-0.5, hi=0.5):
    """Entry/exit ray parameters against an axis-aligned box; exit <= entry means a miss."""
    d = np.where(np.abs(dirs) < 1e-300, 1e-300, dirs)
    t0 = (lo - origin) / d
    t1 = (hi - origin) / d
    near = np.max(np.minimum(t0, t1), axis=-1)
    far = np.min(np.maximum(t0, t1), axis=-1)
    return np.maximum(near, 0.0), far


def raymarch_field(sampler, camera: Camera, step: float = DEFAULT_STEP, bg=WHITE) -> RenderedImage:
    """Midpoint quadrature: sample k sits at entry + (k + 1/2) step.

    Densities are clamped at zero and colors to [0, 1]. Depth is the
    weight-averaged camera-space z of the samples.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    origin, dirs = pixel_rays(camera)
    dirs = dirs.reshape(-1, 3)
    norm = np.linalg.norm(dirs, axis=1)
    unit = dirs / norm[:, None]
    near, far = ray_box(np.asarray(origin), unit)
    npx = dirs.shape[0]
    count = np.where(far > near, np.ceil((far - near) / step), 0).astype(np.int64)
    trans = np.ones(npx)
    color = np.zeros((npx, 3))
    depth_acc = np.zeros(npx)
    for k in range(int(count.max(initial=0))):
        live = np.flatnonzero((k < count) & (trans >= TRANSMITTANCE_CUTOFF))
        if live.size == 0:
            break
        s = near[live] + (k + 0.5) * step
        rgb, sigma = sampler(origin + unit[live] * s[:, None])
        a = 1.0 - np.exp(-np.maximum(sigma, 0.0) * step)
        wgt = trans[live] * a
        color[live] += wgt[:, None] * np.clip(rgb, 0.0, 1.0)
        depth_acc[live] += wgt * s / norm[live]
        trans[live] *= 1.0 - a
    alpha = 1.0 - trans
    rgb = np.clip(color + trans[:, None] * np.asarray(bg, dtype=np.float64), 0.0, 1.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        depth = np.where(alpha > 0, depth_acc / alpha, np.inf)
    h, w = camera.height, camera.width
    return RenderedImage(rgb.reshape(h, w, 3), alpha.reshape(h, w), depth.reshape(h, w))
