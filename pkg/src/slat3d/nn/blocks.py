"""Transformer blocks: plain shifted-window blocks and adaLN-modulated DiT blocks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import (
    AttentionWeights,
    CrossAttentionWeights,
    WindowConfig,
    cross_attention,
    self_attention,
    windowed_mhsa,
)
from .layers import FFN, Linear, layer_norm, silu

N_MODULATIONS = 9


@dataclass(frozen=True)
class ModulationParams:
    """Shift, scale and gate for each of the three sub-layers."""

    shift_msa: np.ndarray
    scale_msa: np.ndarray
    gate_msa: np.ndarray
    shift_mca: np.ndarray
    scale_mca: np.ndarray
    gate_mca: np.ndarray
    shift_ffn: np.ndarray
    scale_ffn: np.ndarray
    gate_ffn: np.ndarray

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> "ModulationParams":
        vec = np.asarray(vec).reshape(-1)
        if vec.size % N_MODULATIONS:
            raise ValueError(f"modulation vector of size {vec.size} is not 9 * dim")
        return cls(*np.split(vec, N_MODULATIONS))


def _attend(x, coords, w: AttentionWeights, cfg: WindowConfig | None):
    if cfg is None:
        return self_attention(x, w)
    return windowed_mhsa(x, coords, w, cfg)


@dataclass
class AdaLNBlockWeights:
    adaln: Linear  # (t_dim, 9 * dim)
    attn: AttentionWeights
    cross: CrossAttentionWeights | None
    ffn: FFN

    @property
    def dim(self) -> int:
        return self.attn.dim

    @classmethod
    def init(cls, rng, dim: int, heads: int, cond_dim: int | None = None, t_dim: int | None = None):
        t_dim = dim if t_dim is None else t_dim
        adaln = Linear.init(rng, t_dim, N_MODULATIONS * dim, zero=True)
        # scale chunks start at 1 so an untrained block normalizes without rescaling
        for k in (1, 4, 7):
            adaln.bias[k * dim:(k + 1) * dim] = 1.0
        cross = None if cond_dim is None else CrossAttentionWeights.init(rng, dim, cond_dim, heads)
        return cls(adaln, AttentionWeights.init(rng, dim, heads), cross, FFN.init(rng, dim))

    def tensors(self, prefix: str) -> dict:
        t = {**self.adaln.tensors(f"{prefix}.adaln"), **self.attn.tensors(f"{prefix}.attn"), **self.ffn.tensors(prefix)}
        if self.cross is not None:
            t.update(self.cross.tensors(f"{prefix}.cross"))
        return t

    @classmethod
    def load(cls, t: dict, prefix: str, heads: int) -> "AdaLNBlockWeights":
        cross = CrossAttentionWeights.load(t, f"{prefix}.cross", heads) if f"{prefix}.cross.q" in t else None
        return cls(Linear.load(t, f"{prefix}.adaln"), AttentionWeights.load(t, f"{prefix}.attn", heads), cross, FFN.load(t, prefix))


def modulation(t_embed, w: AdaLNBlockWeights) -> ModulationParams:
    return ModulationParams.from_vector(w.adaln(silu(np.asarray(t_embed, dtype=np.float64).reshape(-1))))


def adaln_block(tokens, coords, t_embed, cond_tokens, weights: AdaLNBlockWeights, cfg: WindowConfig | None = None):
    """Gated pre-norm residual block: self-attention, cross-attention, FFN.

    Each sub-layer sees ``scale * LN(x) + shift`` and its output is multiplied
    by ``gate`` before the residual add. ``cfg=None`` means full attention.
    Cross-attention is skipped when the block has none or ``cond_tokens`` is None.
    """
    x = np.asarray(tokens, dtype=np.float64)
    m = modulation(t_embed, weights)
    h = layer_norm(x) * m.scale_msa + m.shift_msa
    x = x + m.gate_msa * _attend(h, coords, weights.attn, cfg)
    if weights.cross is not None and cond_tokens is not None:
        h = layer_norm(x) * m.scale_mca + m.shift_mca
        x = x + m.gate_mca * cross_attention(h, cond_tokens, weights.cross)
    h = layer_norm(x) * m.scale_ffn + m.shift_ffn
    return x + m.gate_ffn * weights.ffn(h)


@dataclass
class SwinBlockWeights:
    """Un-modulated pre-norm block (3D-SW-MSA then FFN) used by the VAEs."""

    norm1: tuple
    attn: AttentionWeights
    norm2: tuple
    ffn: FFN

    @classmethod
    def init(cls, rng, dim: int, heads: int) -> "SwinBlockWeights":
        ones, zeros = np.ones(dim), np.zeros(dim)
        return cls((ones, zeros), AttentionWeights.init(rng, dim, heads), (ones.copy(), zeros.copy()), FFN.init(rng, dim))

    def tensors(self, prefix: str) -> dict:
        return {
            f"{prefix}.norm1": self.norm1[0], f"{prefix}.norm1_b": self.norm1[1],
            f"{prefix}.norm2": self.norm2[0], f"{prefix}.norm2_b": self.norm2[1],
            **self.attn.tensors(f"{prefix}.attn"), **self.ffn.tensors(prefix),
        }

    @classmethod
    def load(cls, t: dict, prefix: str, heads: int) -> "SwinBlockWeights":
        return cls(
            (t[f"{prefix}.norm1"], t[f"{prefix}.norm1_b"]),
            AttentionWeights.load(t, f"{prefix}.attn", heads),
            (t[f"{prefix}.norm2"], t[f"{prefix}.norm2_b"]),
            FFN.load(t, prefix),
        )


def swin_block(tokens, coords, w: SwinBlockWeights, cfg: WindowConfig):
    x = np.asarray(tokens, dtype=np.float64)
    x = x + windowed_mhsa(layer_norm(x, *w.norm1), coords, w.attn, cfg)
    return x + w.ffn(layer_norm(x, *w.norm2))
