"""Dense 3D convolutional VAE for the 64^3 occupancy grid.

Tensors are channels-last ``(X, Y, Z, C)`` arrays. Parameters live in a flat
``{name: array}`` dict so they map one-to-one onto a weight archive.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..config import STRUCTURE_LATENT_CHANNELS, UNET_CHANNELS
from .layers import fan_in_init, layer_norm, silu


@dataclass(frozen=True)
class UNetConfig:
    channels: tuple = UNET_CHANNELS
    latent_channels: int = STRUCTURE_LATENT_CHANNELS
    in_channels: int = 1
    num_res_blocks: int = 2
    mid_blocks: int = 2

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not self.channels or min(self.channels) < 1:
            raise ValueError("channels must be a non-empty tuple of positive widths")

    @property
    def factor(self) -> int:
        return 2 ** (len(self.channels) - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


def conv3d(x, w, b=None, stride: int = 1):
    """Zero-padded 3x3x3 cross-correlation; tap [i,j,k] reads offset (i-1, j-1, k-1)."""
    x = np.asarray(x, dtype=np.float64)
    if w.shape[:3] != (3, 3, 3) or w.shape[3] != x.shape[3]:
        raise ValueError(f"conv weight {w.shape} does not fit input {x.shape}")
    n0, n1, n2, _ = x.shape
    xp = np.pad(x, ((1, 1), (1, 1), (1, 1), (0, 0)))
    o0, o1, o2 = -(-n0 // stride), -(-n1 // stride), -(-n2 // stride)
    out = np.zeros((o0, o1, o2, w.shape[4]))
    for i in range(3):
        for j in range(3):
            for k in range(3):
                sl = xp[i:i + n0:stride, j:j + n1:stride, k:k + n2:stride]
                out += sl @ w[i, j, k]
    if b is not None:
        out += b
    return out


def pixel_shuffle3d(x, factor: int = 2):
    """(X, Y, Z, C*f^3) -> (fX, fY, fZ, C); sub-voxel (dx, dy, dz) reads channel c*f^3 + (dz*f + dy)*f + dx."""
    n0, n1, n2, c = x.shape
    f3 = factor**3
    if c % f3:
        raise ValueError(f"{c} channels not divisible by {f3}")
    y = x.reshape(n0, n1, n2, c // f3, factor, factor, factor)  # ..., C, dz, dy, dx
    y = y.transpose(0, 6, 1, 5, 2, 4, 3)
    return y.reshape(n0 * factor, n1 * factor, n2 * factor, c // f3)


def _norm(p, name, x):
    return layer_norm(x, p[f"{name}.norm"], p[f"{name}.norm_b"])


def _res_block(p, name, x):
    h = conv3d(silu(_norm(p, f"{name}.n1", x)), p[f"{name}.conv1"], p[f"{name}.conv1_b"])
    h = conv3d(silu(_norm(p, f"{name}.n2", h)), p[f"{name}.conv2"], p[f"{name}.conv2_b"])
    skip = x @ p[f"{name}.skip"] + p[f"{name}.skip_b"] if f"{name}.skip" in p else x
    return skip + h


def _shapes_res(name, cin, cout):
    s = {
        f"{name}.n1.norm": (cin,), f"{name}.n1.norm_b": (cin,),
        f"{name}.conv1": (3, 3, 3, cin, cout), f"{name}.conv1_b": (cout,),
        f"{name}.n2.norm": (cout,), f"{name}.n2.norm_b": (cout,),
        f"{name}.conv2": (3, 3, 3, cout, cout), f"{name}.conv2_b": (cout,),
    }
    if cin != cout:
        s[f"{name}.skip"], s[f"{name}.skip_b"] = (cin, cout), (cout,)
    return s


def encoder_shapes(cfg: UNetConfig) -> dict:
    ch = cfg.channels
    s = {"enc.in": (3, 3, 3, cfg.in_channels, ch[0]), "enc.in_b": (ch[0],)}
    for lvl, c in enumerate(ch):
        for r in range(cfg.num_res_blocks):
            s.update(_shapes_res(f"enc.l{lvl}.res{r}", c, c))
        if lvl + 1 < len(ch):
            s[f"enc.l{lvl}.down"], s[f"enc.l{lvl}.down_b"] = (3, 3, 3, c, ch[lvl + 1]), (ch[lvl + 1],)
    for r in range(cfg.mid_blocks):
        s.update(_shapes_res(f"enc.mid{r}", ch[-1], ch[-1]))
    s["enc.out.norm"], s["enc.out.norm_b"] = (ch[-1],), (ch[-1],)
    s["enc.out"], s["enc.out_b"] = (3, 3, 3, ch[-1], 2 * cfg.latent_channels), (2 * cfg.latent_channels,)
    return s


def decoder_shapes(cfg: UNetConfig) -> dict:
    ch = cfg.channels
    s = {"dec.in": (3, 3, 3, cfg.latent_channels, ch[-1]), "dec.in_b": (ch[-1],)}
    for r in range(cfg.mid_blocks):
        s.update(_shapes_res(f"dec.mid{r}", ch[-1], ch[-1]))
    for lvl in range(len(ch) - 1, -1, -1):
        c = ch[lvl]
        for r in range(cfg.num_res_blocks):
            s.update(_shapes_res(f"dec.l{lvl}.res{r}", c, c))
        if lvl > 0:
            s[f"dec.l{lvl}.up"], s[f"dec.l{lvl}.up_b"] = (3, 3, 3, c, 8 * ch[lvl - 1]), (8 * ch[lvl - 1],)
    s["dec.out.norm"], s["dec.out.norm_b"] = (ch[0],), (ch[0],)
    s["dec.out"], s["dec.out_b"] = (3, 3, 3, ch[0], 1), (1,)
    return s


def init_unet(cfg: UNetConfig, seed: int) -> dict:
    """Seeded parameters for encoder and decoder: fan-in normal weights, unit norms, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in {**encoder_shapes(cfg), **decoder_shapes(cfg)}.items():
        if name.endswith(".norm"):
            params[name] = np.ones(shape)
        elif name.endswith("_b"):
            params[name] = np.zeros(shape)
        else:
            params[name] = fan_in_init(rng, shape)
    return params


def _check(params: dict, shapes: dict):
    for name, shape in shapes.items():
        if name not in params:
            raise ValueError(f"missing U-Net weight {name}")
        if tuple(params[name].shape) != tuple(shape):
            raise ValueError(f"U-Net weight {name}: shape {params[name].shape} != {shape}")


def unet_encode(x, params: dict, cfg: UNetConfig):
    """Occupancy grid (N^3 or N^3 x C) -> (mean, logvar), each (N/f)^3 x latent."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[..., None]
    if x.ndim != 4 or x.shape[3] != cfg.in_channels:
        raise ValueError(f"input {x.shape} does not match {cfg.in_channels} input channels")
    if any(n % cfg.factor for n in x.shape[:3]):
        raise ValueError(f"spatial size {x.shape[:3]} not divisible by {cfg.factor}")
    _check(params, encoder_shapes(cfg))
    p = params
    h = conv3d(x, p["enc.in"], p["enc.in_b"])
    for lvl in range(len(cfg.channels)):
        for r in range(cfg.num_res_blocks):
            h = _res_block(p, f"enc.l{lvl}.res{r}", h)
        if lvl + 1 < len(cfg.channels):
            h = conv3d(h, p[f"enc.l{lvl}.down"], p[f"enc.l{lvl}.down_b"], stride=2)
    for r in range(cfg.mid_blocks):
        h = _res_block(p, f"enc.mid{r}", h)
    h = conv3d(silu(_norm(p, "enc.out", h)), p["enc.out"], p["enc.out_b"])
    c = cfg.latent_channels
    return h[..., :c], h[..., c:]


def unet_decode(z, params: dict, cfg: UNetConfig):
    """Latent (n^3 x latent) -> occupancy logits (f*n)^3."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 4 or z.shape[3] != cfg.latent_channels:
        raise ValueError(f"latent {z.shape} does not have {cfg.latent_channels} channels")
    _check(params, decoder_shapes(cfg))
    p = params
    h = conv3d(z, p["dec.in"], p["dec.in_b"])
    for r in range(cfg.mid_blocks):
        h = _res_block(p, f"dec.mid{r}", h)
    for lvl in range(len(cfg.channels) - 1, -1, -1):
        for r in range(cfg.num_res_blocks):
            h = _res_block(p, f"dec.l{lvl}.res{r}", h)
        if lvl > 0:
            h = pixel_shuffle3d(conv3d(h, p[f"dec.l{lvl}.up"], p[f"dec.l{lvl}.up_b"]))
    h = conv3d(silu(_norm(p, "dec.out", h)), p["dec.out"], p["dec.out_b"])
    return h[..., 0]


def conv_unet3d_forward(dense, params: dict, cfg: UNetConfig | None = None, inverse: bool = False):
    """Encode an occupancy grid to (mean, logvar), or with ``inverse`` decode a latent grid to logits."""
    cfg = UNetConfig() if cfg is None else cfg
    return unet_decode(dense, params, cfg) if inverse else unet_encode(dense, params, cfg)


def kl_penalty(mean, logvar) -> float:
    m, lv = np.asarray(mean, dtype=np.float64), np.asarray(logvar, dtype=np.float64)
    if m.shape != lv.shape:
        raise ValueError(f"mean {m.shape} and logvar {lv.shape} differ")
    # expm1(lv) - lv >= 0 mathematically; the clamp absorbs rounding for tiny lv
    return float(np.mean(0.5 * (np.maximum(np.expm1(lv) - lv, 0.0) + m * m)))


def kl_penalty_grad(mean, logvar):
    m, lv = np.asarray(mean, dtype=np.float64), np.asarray(logvar, dtype=np.float64)
    n = m.size
    return m / n, 0.5 * (np.exp(lv) - 1.0) / n
