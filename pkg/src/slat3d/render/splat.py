"""Depth-sorted EWA splatting of 3D Gaussians on the CPU."""

from __future__ import annotations

import numpy as np

from ..config import SCREEN_FILTER_VARIANCE, TRANSMITTANCE_CUTOFF
from ..decoders.gaussians import GaussianSet, covariances
from ..multiview import Camera
from .image import WHITE, RenderedImage

NEAR = 0.01
EXTENT_SIGMAS = 3.0


def project_gaussians(gs: GaussianSet, camera: Camera):
    """Screen means (M, 2), screen covariances (M, 2, 2) including the filter, view depths (M,)."""
    basis = camera.basis()
    pc = camera.to_camera(gs.centers).reshape(-1, 3)
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    f = camera.focal
    zs = np.where(z > NEAR, z, 1.0)
    mean = np.stack([0.5 * camera.width + f * x / zs, 0.5 * camera.height - f * y / zs], 1)
    jac = np.zeros((len(z), 2, 3))
    jac[:, 0, 0] = f / zs
    jac[:, 0, 2] = -f * x / zs ** 2
    jac[:, 1, 1] = -f / zs
    jac[:, 1, 2] = f * y / zs ** 2
    cov_cam = basis @ covariances(gs) @ basis.T
    cov2 = jac @ cov_cam @ np.swapaxes(jac, 1, 2) + SCREEN_FILTER_VARIANCE * np.eye(2)
    return mean, cov2, z


def depth_order(gs: GaussianSet, depth) -> np.ndarray:
    """Front-to-back order; equal depths fall back to the Gaussians' own parameters, never list position."""
    keys = [gs.colors[:, 2], gs.colors[:, 1], gs.colors[:, 0], gs.opacities]
    keys += [gs.rotations[:, i] for i in range(3, -1, -1)]
    keys += [gs.scales[:, i] for i in range(2, -1, -1)]
    keys += [gs.centers[:, i] for i in range(2, -1, -1)]
    return np.lexsort(keys + [depth])


def splat_gaussians(gs: GaussianSet, camera: Camera, bg=WHITE) -> RenderedImage:
    """Front-to-back alpha compositing per pixel.

    A pixel stops accepting contributions once its transmittance drops
    below the cutoff. Each Gaussian touches pixels within 3 sigma of its
    screen-space footprint.
    """
    h, w = camera.height, camera.width
    color = np.zeros((h, w, 3))
    depth_acc = np.zeros((h, w))
    trans = np.ones((h, w))
    if len(gs):
        mean, cov, z = project_gaussians(gs, camera)
        order = depth_order(gs, z)
        det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2
        inv = np.stack([cov[:, 1, 1], -cov[:, 0, 1], cov[:, 0, 0]], 1) / det[:, None]
        lam = 0.5 * (cov[:, 0, 0] + cov[:, 1, 1]) + np.sqrt(0.25 * (cov[:, 0, 0] - cov[:, 1, 1]) ** 2 + cov[:, 0, 1] ** 2)
        radius = EXTENT_SIGMAS * np.sqrt(lam)
        for i in order:
            if z[i] <= NEAR:
                continue
            mx, my = mean[i]
            j0, j1 = max(int(np.floor(mx - radius[i])), 0), min(int(np.ceil(mx + radius[i])), w)
            i0, i1 = max(int(np.floor(my - radius[i])), 0), min(int(np.ceil(my + radius[i])), h)
            if j0 >= j1 or i0 >= i1:
                continue
            dx = (np.arange(j0, j1) + 0.5 - mx)[None, :]
            dy = (np.arange(i0, i1) + 0.5 - my)[:, None]
            q = inv[i, 0] * dx * dx + 2 * inv[i, 1] * dx * dy + inv[i, 2] * dy * dy
            t = trans[i0:i1, j0:j1]
            live = t >= TRANSMITTANCE_CUTOFF
            a = np.where(live, gs.opacities[i] * np.exp(-0.5 * q), 0.0)
            wgt = t * a
            color[i0:i1, j0:j1] += wgt[..., None] * gs.colors[i]
            depth_acc[i0:i1, j0:j1] += wgt * z[i]
            trans[i0:i1, j0:j1] = t * (1.0 - a)
    alpha = 1.0 - trans
    rgb = np.clip(color + trans[..., None] * np.asarray(bg, dtype=np.float64), 0.0, 1.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        depth = np.where(alpha > 0, depth_acc / alpha, np.inf)
    return RenderedImage(rgb, alpha, depth)
