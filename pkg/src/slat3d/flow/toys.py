"""Toy box-world used to exercise the two-stage pipeline end to end."""

from __future__ import annotations

import itertools

import numpy as np
from scipy import ndimage

from ..nn.unet3d import UNetConfig, decoder_shapes, encoder_shapes


def box_family(n: int = 4, min_side: int = 2) -> np.ndarray:
    """Every axis-aligned box in an n^3 grid with sides >= min_side, as +-1 vectors (x-major)."""
    out = []
    for lo in itertools.product(range(n), repeat=3):
        for hi in itertools.product(range(n), repeat=3):
            if all(h - l + 1 >= min_side for l, h in zip(lo, hi)):
                g = -np.ones((n, n, n))
                g[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1] = 1.0
                out.append(g.ravel())
    return np.array(out)


def sign_decoder_config(levels: int = 2) -> UNetConfig:
    return UNetConfig(channels=(2,) * levels, latent_channels=1, num_res_blocks=0, mid_blocks=0)


def sign_decoder_params(levels: int = 2) -> dict:
    """Hand-set U-Net weights whose decoder nearest-upsamples a 1-channel latent, keeping its sign.

    The latent a becomes the channel pair (a, -a); layer norm over that pair
    gives +-1, and silu(s) - silu(-s) = s turns it back into a signed logit.
    """
    cfg = sign_decoder_config(levels)
    p = {k: np.zeros(s) for k, s in {**encoder_shapes(cfg), **decoder_shapes(cfg)}.items()}
    for k in p:
        if k.endswith(".norm"):
            p[k][:] = 1.0
    p["dec.in"][1, 1, 1, 0] = [1.0, -1.0]
    for lvl in range(1, levels):
        w = p[f"dec.l{lvl}.up"]
        for c in range(2):
            w[1, 1, 1, c, c * 8:(c + 1) * 8] = 1.0
    p["dec.out"][1, 1, 1, :, 0] = [1.0, -1.0]
    return p


def box_score(occ) -> float:
    """Fill ratio of the bounding box when ``occ`` is one connected component, else 0."""
    occ = np.asarray(occ, bool)
    if not occ.any():
        return 0.0
    _, n_comp = ndimage.label(occ)
    if n_comp != 1:
        return 0.0
    idx = np.argwhere(occ)
    return float(occ.sum() / np.prod(idx.max(0) - idx.min(0) + 1))
