"""Rendered image container, file output, and image-space comparisons."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import correlate2d

from ..io import write_dense, write_pfm, write_ppm

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
WHITE = (1.0, 1.0, 1.0)


@dataclass
class RenderedImage:
    """rgb already blended over the background; depth is +inf where nothing was hit."""

    rgb: np.ndarray
    alpha: np.ndarray
    depth: np.ndarray | None = None
    planes: dict = field(default_factory=dict)

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    def check_invariants(self) -> list[str]:
        bad = []
        if np.any((self.rgb < 0) | (self.rgb > 1)):
            bad.append("rgb outside [0, 1]")
        if np.any((self.alpha < 0) | (self.alpha > 1)):
            bad.append("alpha outside [0, 1]")
        if self.depth is not None and np.any(~(self.depth > 0)):
            bad.append("non-positive depth")
        return bad

    def save(self, stem) -> list[Path]:
        """``stem``.ppm (rgb), ``stem``.alpha.pfm, ``stem``.depth.pfm and ``stem``.planes.dnse when present."""
        stem = Path(stem)
        out = [stem.with_suffix(".ppm"), stem.with_suffix(".alpha.pfm")]
        write_ppm(out[0], self.rgb)
        write_pfm(out[1], self.alpha)
        if self.depth is not None:
            out.append(stem.with_suffix(".depth.pfm"))
            write_pfm(out[-1], self.depth)
        if self.planes:
            out.append(stem.with_suffix(".planes.dnse"))
            write_dense(out[-1], self.stacked_planes())
        return out

    def stacked_planes(self) -> np.ndarray:
        """All planes as one (H, W, C) array, channels in sorted plane-name order."""
        cols = []
        for name in sorted(self.planes):
            p = np.asarray(self.planes[name], dtype=np.float64)
            cols.append(p[..., None] if p.ndim == 2 else p)
        return np.concatenate(cols, axis=-1)


def _pixels(img) -> np.ndarray:
    return np.asarray(img.rgb if isinstance(img, RenderedImage) else img, dtype=np.float64)


def _pair(a, b):
    a, b = _pixels(a), _pixels(b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def image_l1(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def image_psnr(a, b) -> float:
    """-10 log10(MSE) on [0, 1] intensities; +inf for identical images."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    return float("inf") if mse == 0.0 else float(-10.0 * np.log10(mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def image_ssim(a, b) -> float:
    """Mean SSIM over all fully-contained 11x11 windows, averaged over channels."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    w = gaussian_window()
    vals = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        filt = lambda img: correlate2d(img, w, mode="valid")
        mx, my = filt(x), filt(y)
        sxx = filt(x * x) - mx * mx
        syy = filt(y * y) - my * my
        sxy = filt(x * y) - mx * my
        s = ((2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)) / ((mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2))
        vals.append(s.mean())
    return float(np.mean(vals))
