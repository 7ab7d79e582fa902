"""Transformer stacks built from the blocks: the sparse VAE backbone and the two flow generators.

All stacks are forward-only. Each exposes ``tensors()`` / ``config()`` for the
weight archive and can be rebuilt with ``load_model``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..config import WINDOW_SIZE
from ..io import load_archive, save_archive
from ..sparse import SparseGrid, avg_pool2, keys_to_coords, nearest_unpool2, sparse_conv3
from .attention import WindowConfig
from .blocks import AdaLNBlockWeights, SwinBlockWeights, adaln_block, modulation, swin_block
from .layers import Linear, TimestepEmbedder, fan_in_init, layer_norm, silu, sinusoidal_pe


def _pe_dim_ok(dim: int):
    if dim % 6:
        raise ValueError(f"model dim {dim} must be divisible by 6 for the positional encoding")


# -- sparse VAE backbone ---------------------------------------------------------


@dataclass
class SparseBackbone:
    """Linear in, +PE, alternating shifted-window blocks, LN + linear out."""

    in_proj: Linear
    blocks: list
    out_norm: tuple
    out_proj: Linear
    heads: int
    window: int = WINDOW_SIZE

    kind = "sparse_backbone"

    @classmethod
    def init(cls, seed: int, in_ch: int, out_ch: int, dim: int = 48, heads: int = 4, depth: int = 2,
             window: int = WINDOW_SIZE) -> "SparseBackbone":
        _pe_dim_ok(dim)
        rng = np.random.default_rng(seed)
        return cls(
            Linear.init(rng, in_ch, dim),
            [SwinBlockWeights.init(rng, dim, heads) for _ in range(depth)],
            (np.ones(dim), np.zeros(dim)),
            Linear.init(rng, dim, out_ch),
            heads,
            window,
        )

    @property
    def dim(self) -> int:
        return self.in_proj.weight.shape[1]

    def window_config(self, i: int) -> WindowConfig:
        # odd blocks shift by half a window; (4, 4, 4) for the default size
        shift = (self.window // 2,) * 3 if i % 2 else (0, 0, 0)
        return WindowConfig(self.window, shift)

    def __call__(self, grid: SparseGrid) -> np.ndarray:
        if grid.channels != self.in_proj.weight.shape[0]:
            raise ValueError(f"grid has {grid.channels} channels, backbone expects {self.in_proj.weight.shape[0]}")
        h = self.in_proj(grid.features) + sinusoidal_pe(grid.coords, self.dim)
        for i, blk in enumerate(self.blocks):
            h = swin_block(h, grid.coords, blk, self.window_config(i))
        return self.out_proj(layer_norm(h, *self.out_norm))

    def config(self) -> dict:
        return {"kind": self.kind, "heads": self.heads, "depth": len(self.blocks), "dim": self.dim, "window": self.window}

    def tensors(self, prefix: str = "") -> dict:
        t = {**self.in_proj.tensors(f"{prefix}in_proj"), **self.out_proj.tensors(f"{prefix}out_proj"),
             f"{prefix}out_norm": self.out_norm[0], f"{prefix}out_norm_b": self.out_norm[1]}
        for i, b in enumerate(self.blocks):
            t.update(b.tensors(f"{prefix}blk{i}"))
        return t

    @classmethod
    def load(cls, t: dict, cfg: dict, prefix: str = "") -> "SparseBackbone":
        h = cfg["heads"]
        return cls(
            Linear.load(t, f"{prefix}in_proj"),
            [SwinBlockWeights.load(t, f"{prefix}blk{i}", h) for i in range(cfg["depth"])],
            (t[f"{prefix}out_norm"], t[f"{prefix}out_norm_b"]),
            Linear.load(t, f"{prefix}out_proj"),
            h,
            cfg.get("window", WINDOW_SIZE),
        )


def encode_slat(backbone: SparseBackbone, grid: SparseGrid, rng: np.random.Generator | None = None):
    """Run the VAE encoder; returns (mean, logvar, sample) grids. ``rng=None`` samples the mean."""
    out = backbone(grid)
    c = out.shape[1] // 2
    mean, logvar = out[:, :c], out[:, c:]
    z = mean if rng is None else mean + np.exp(0.5 * logvar) * rng.standard_normal(mean.shape)
    return grid.with_features(mean), grid.with_features(logvar), grid.with_features(z)


# -- flow generators ---------------------------------------------------------------


def _final_layer_init(rng, dim, out_ch):
    ada = Linear.init(rng, dim, 2 * dim, zero=True)
    ada.bias[dim:] = 1.0  # scale chunk
    return ada, Linear.init(rng, dim, out_ch)


def _final_layer(h, t_embed, ada: Linear, out: Linear):
    shift, scale = np.split(ada(silu(t_embed.reshape(-1))), 2)
    return out(layer_norm(h) * scale + shift)


@dataclass
class _FlowStack:
    t_embed: TimestepEmbedder
    in_proj: Linear
    blocks: list
    final_ada: Linear
    out_proj: Linear
    heads: int
    null_cond: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.in_proj.weight.shape[1]

    def _run(self, tokens, coords, t, cond):
        if cond is not None:
            cond = np.asarray(cond, dtype=np.float64)
            if cond.ndim == 1:
                cond = cond[None]
        elif self.null_cond is not None:
            cond = self.null_cond
        te = self.t_embed(float(t))[0]
        h = self.in_proj(tokens) + sinusoidal_pe(coords, self.dim)
        for blk in self.blocks:
            h = adaln_block(h, coords, te, cond, blk, None)
        return h, te

    def _tensors(self) -> dict:
        t = {**self.t_embed.tensors(), **self.in_proj.tensors("in_proj"), **self.final_ada.tensors("final.adaln"),
             **self.out_proj.tensors("out_proj")}
        for i, b in enumerate(self.blocks):
            t.update(b.tensors(f"blk{i}"))
        if self.null_cond is not None:
            t["null_cond"] = self.null_cond
        return t

    @staticmethod
    def _load_common(t: dict, cfg: dict):
        h = cfg["heads"]
        return dict(
            t_embed=TimestepEmbedder.load(t),
            in_proj=Linear.load(t, "in_proj"),
            blocks=[AdaLNBlockWeights.load(t, f"blk{i}", h) for i in range(cfg["depth"])],
            final_ada=Linear.load(t, "final.adaln"),
            out_proj=Linear.load(t, "out_proj"),
            heads=h,
            null_cond=t.get("null_cond"),
        )


@dataclass
class StructureFlowTransformer(_FlowStack):
    """Velocity model over the dense ``r^3 x C`` structure latent (one token per cell)."""

    resolution: int = 16
    channels: int = 8
    kind = "structure_flow"

    @classmethod
    def init(cls, seed: int, resolution: int = 16, channels: int = 8, dim: int = 48, heads: int = 4,
             depth: int = 2, cond_dim: int | None = None) -> "StructureFlowTransformer":
        _pe_dim_ok(dim)
        rng = np.random.default_rng(seed)
        ada, out = _final_layer_init(rng, dim, channels)
        return cls(
            TimestepEmbedder.init(rng, dim),
            Linear.init(rng, channels, dim),
            [AdaLNBlockWeights.init(rng, dim, heads, cond_dim) for _ in range(depth)],
            ada, out, heads,
            None if cond_dim is None else fan_in_init(rng, (1, cond_dim)),
            resolution, channels,
        )

    def __call__(self, x, t, cond=None, **_):
        x = np.asarray(x, dtype=np.float64)
        r, c = self.resolution, self.channels
        if x.size != r**3 * c:
            raise ValueError(f"state of size {x.size} does not match {r}^3 x {c}")
        coords = keys_to_coords(np.arange(r**3), r)
        h, te = self._run(x.reshape(r**3, c), coords, t, cond)
        return _final_layer(h, te, self.final_ada, self.out_proj).reshape(x.shape)

    def config(self) -> dict:
        return {"kind": self.kind, "heads": self.heads, "depth": len(self.blocks), "dim": self.dim,
                "resolution": self.resolution, "channels": self.channels}

    def tensors(self) -> dict:
        return self._tensors()

    @classmethod
    def load(cls, t: dict, cfg: dict) -> "StructureFlowTransformer":
        return cls(**cls._load_common(t, cfg), resolution=cfg["resolution"], channels=cfg["channels"])


@dataclass
class LatentFlowTransformer(_FlowStack):
    """Velocity model over latents on a sparse structure.

    A sparse conv residual block and 2x average pooling shrink the token count
    before the attention blocks; nearest unpooling plus an additive skip from
    the pre-pool features restores the full structure.
    """

    down_conv: tuple = field(default=None)
    up_conv: tuple = field(default=None)
    io_proj: tuple = field(default=None)  # (channels -> width, width -> channels)
    kind = "latent_flow"

    @property
    def width(self) -> int:
        return self.io_proj[0].weight.shape[1]

    @classmethod
    def init(cls, seed: int, channels: int = 8, width: int = 16, dim: int = 48, heads: int = 4, depth: int = 2,
             cond_dim: int | None = None) -> "LatentFlowTransformer":
        _pe_dim_ok(dim)
        rng = np.random.default_rng(seed)
        ada, out = _final_layer_init(rng, dim, width)
        conv = lambda: (fan_in_init(rng, (3, 3, 3, width, width)), np.zeros(width))  # noqa: E731
        return cls(
            TimestepEmbedder.init(rng, dim),
            Linear.init(rng, width, dim),
            [AdaLNBlockWeights.init(rng, dim, heads, cond_dim) for _ in range(depth)],
            ada, out, heads,
            None if cond_dim is None else fan_in_init(rng, (1, cond_dim)),
            conv(), conv(),
            (Linear.init(rng, channels, width), Linear.init(rng, width, channels)),
        )

    @staticmethod
    def _res(grid: SparseGrid, conv):
        h = sparse_conv3(grid.with_features(silu(layer_norm(grid.features))), conv[0], conv[1])
        return grid.features + h.features

    def __call__(self, x, t, cond=None, *, structure: SparseGrid, **_):
        x = np.asarray(x, dtype=np.float64)
        n = structure.num_active
        if x.size % max(n, 1) or n == 0:
            raise ValueError(f"state of size {x.size} does not fit {n} active voxels")
        feats = x.reshape(n, -1)
        g = structure.with_features(self.io_proj[0](feats))
        skip = self._res(g, self.down_conv)
        coarse = avg_pool2(g.with_features(skip))
        h, te = self._run(coarse.features, coarse.coords, t, cond)
        h = _final_layer(h, te, self.final_ada, self.out_proj)
        fine = nearest_unpool2(coarse.with_features(h), g)
        up = g.with_features(fine.features + skip)
        return self.io_proj[1](self._res(up, self.up_conv)).reshape(x.shape)

    def config(self) -> dict:
        return {"kind": self.kind, "heads": self.heads, "depth": len(self.blocks), "dim": self.dim,
                "width": self.width, "channels": self.io_proj[0].weight.shape[0]}

    def tensors(self) -> dict:
        t = self._tensors()
        t.update({"down.conv": self.down_conv[0], "down.conv_b": self.down_conv[1],
                  "up.conv": self.up_conv[0], "up.conv_b": self.up_conv[1]})
        t.update(self.io_proj[0].tensors("io.in"))
        t.update(self.io_proj[1].tensors("io.out"))
        return t

    @classmethod
    def load(cls, t: dict, cfg: dict) -> "LatentFlowTransformer":
        return cls(
            **cls._load_common(t, cfg),
            down_conv=(t["down.conv"], t["down.conv_b"]),
            up_conv=(t["up.conv"], t["up.conv_b"]),
            io_proj=(Linear.load(t, "io.in"), Linear.load(t, "io.out")),
        )


_KINDS = {c.kind: c for c in (StructureFlowTransformer, LatentFlowTransformer)}


def save_model(directory, model, extra: dict | None = None) -> None:
    meta = {"config": model.config(), **(extra or {})}
    save_archive(directory, model.tensors(), meta)


def load_model(directory):
    tensors, meta = load_archive(directory)
    cfg = meta["config"]
    if cfg["kind"] == SparseBackbone.kind:
        return SparseBackbone.load(tensors, cfg)
    if cfg["kind"] not in _KINDS:
        raise ValueError(f"unknown model kind {cfg['kind']!r}")
    return _KINDS[cfg["kind"]].load(tensors, cfg)


__all__ = [
    "LatentFlowTransformer",
    "SparseBackbone",
    "StructureFlowTransformer",
    "encode_slat",
    "load_model",
    "modulation",
    "save_model",
]
