"""Multi-head attention: full, 3D shifted-window over sparse tokens, and cross."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..config import WINDOW_SIZE
from .layers import Linear, fan_in_init, qk_rmsnorm, softmax


@dataclass(frozen=True)
class WindowConfig:
    window_size: int = WINDOW_SIZE
    shift: tuple = (0, 0, 0)

    def __post_init__(self):
        shift = tuple(int(s) for s in self.shift)
        if len(shift) != 3 or any(not 0 <= s < self.window_size for s in shift):
            raise ValueError(f"shift {self.shift} must lie in [0, {self.window_size})^3")
        object.__setattr__(self, "shift", shift)


@dataclass
class AttentionWeights:
    """Fused QKV projection (D, 3D), output projection and per-head QK gains."""

    qkv: Linear
    proj: Linear
    q_gain: np.ndarray
    k_gain: np.ndarray
    heads: int

    def __post_init__(self):
        d = self.qkv.weight.shape[0]
        if d % self.heads:
            raise ValueError(f"model dim {d} not divisible by {self.heads} heads")
        if self.qkv.weight.shape[1] != 3 * d:
            raise ValueError("qkv projection must map D -> 3D")

    @property
    def dim(self) -> int:
        return self.qkv.weight.shape[0]

    @classmethod
    def init(cls, rng, dim: int, heads: int, qk_norm: bool = True) -> "AttentionWeights":
        hd = dim // heads
        gain = np.ones(hd)
        return cls(Linear.init(rng, dim, 3 * dim), Linear.init(rng, dim, dim), gain, gain.copy(), heads) if qk_norm else \
            cls(Linear.init(rng, dim, 3 * dim), Linear.init(rng, dim, dim), None, None, heads)

    def tensors(self, prefix: str) -> dict:
        t = {**self.qkv.tensors(f"{prefix}.qkv"), **self.proj.tensors(f"{prefix}.proj")}
        if self.q_gain is not None:
            t[f"{prefix}.q_gain"] = self.q_gain
            t[f"{prefix}.k_gain"] = self.k_gain
        return t

    @classmethod
    def load(cls, t: dict, prefix: str, heads: int) -> "AttentionWeights":
        return cls(
            Linear.load(t, f"{prefix}.qkv"),
            Linear.load(t, f"{prefix}.proj"),
            t.get(f"{prefix}.q_gain"),
            t.get(f"{prefix}.k_gain"),
            heads,
        )


@dataclass
class CrossAttentionWeights:
    """Queries from tokens (D -> D); keys/values from condition tokens (Dc -> 2D)."""

    q: Linear
    kv: Linear
    proj: Linear
    heads: int

    @property
    def dim(self) -> int:
        return self.q.weight.shape[0]

    @classmethod
    def init(cls, rng, dim: int, cond_dim: int, heads: int) -> "CrossAttentionWeights":
        return cls(Linear.init(rng, dim, dim), Linear.init(rng, cond_dim, 2 * dim), Linear.init(rng, dim, dim), heads)

    def tensors(self, prefix: str) -> dict:
        return {**self.q.tensors(f"{prefix}.q"), **self.kv.tensors(f"{prefix}.kv"), **self.proj.tensors(f"{prefix}.proj")}

    @classmethod
    def load(cls, t: dict, prefix: str, heads: int) -> "CrossAttentionWeights":
        return cls(Linear.load(t, f"{prefix}.q"), Linear.load(t, f"{prefix}.kv"), Linear.load(t, f"{prefix}.proj"), heads)


def split_heads(x, heads):
    t, d = x.shape
    return x.reshape(t, heads, d // heads).transpose(1, 0, 2)


def merge_heads(x):
    h, t, hd = x.shape
    return x.transpose(1, 0, 2).reshape(t, h * hd)


def scaled_dot_attention(q, k, v, mask=None):
    """q: (H, Tq, hd), k/v: (H, Tk, hd). ``mask`` (Tq, Tk) bool, True = attend."""
    scores = q @ k.transpose(0, 2, 1) / math.sqrt(q.shape[-1])
    if mask is not None:
        scores = np.where(mask[None], scores, -np.inf)
    return softmax(scores, axis=-1) @ v


def _qkv(x, w: AttentionWeights):
    qkv = w.qkv(x)
    d = w.dim
    q, k, v = split_heads(qkv[:, :d], w.heads), split_heads(qkv[:, d:2 * d], w.heads), split_heads(qkv[:, 2 * d:], w.heads)
    if w.q_gain is not None:
        q = qk_rmsnorm(q, w.q_gain)
        k = qk_rmsnorm(k, w.k_gain)
    return q, k, v


def self_attention(x, w: AttentionWeights, mask=None):
    """Full multi-head self-attention over all tokens (optionally masked)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != w.dim:
        raise ValueError(f"tokens {x.shape} do not match model dim {w.dim}")
    q, k, v = _qkv(x, w)
    return w.proj(merge_heads(scaled_dot_attention(q, k, v, mask)))


def window_ids(coords, cfg: WindowConfig) -> np.ndarray:
    """Integer window key of each voxel; no wrap-around, so edge windows may be partial."""
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    w = (c + np.asarray(cfg.shift)) // cfg.window_size
    # window indices are < N / window + 1 <= 1025, so 11 bits per axis suffice
    return (w[:, 0] << 22) | (w[:, 1] << 11) | w[:, 2]


def window_partition(coords, cfg: WindowConfig) -> list[np.ndarray]:
    """Token index groups, one per non-empty window, ordered by window key."""
    ids = window_ids(coords, cfg)
    order = np.argsort(ids, kind="stable")
    sorted_ids = ids[order]
    cuts = np.flatnonzero(np.diff(sorted_ids)) + 1
    return [g for g in np.split(order, cuts) if g.size]


def windowed_mhsa(tokens, coords, w: AttentionWeights, cfg: WindowConfig):
    """Self-attention restricted to tokens sharing a (shifted) 3D window."""
    x = np.asarray(tokens, dtype=np.float64)
    c = np.asarray(coords).reshape(-1, 3)
    if x.ndim != 2 or x.shape[0] != c.shape[0]:
        raise ValueError(f"{x.shape[0] if x.ndim else 0} tokens but {c.shape[0]} coords")
    if x.shape[1] != w.dim:
        raise ValueError(f"tokens {x.shape} do not match model dim {w.dim}")
    q, k, v = _qkv(x, w)
    out = np.empty_like(q)
    for idx in window_partition(c, cfg):
        out[:, idx] = scaled_dot_attention(q[:, idx], k[:, idx], v[:, idx])
    return w.proj(merge_heads(out))


def cross_attention(tokens, cond_tokens, w: CrossAttentionWeights):
    x = np.asarray(tokens, dtype=np.float64)
    c = np.asarray(cond_tokens, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] == 0:
        raise ValueError("cross attention needs at least one condition token")
    d = w.dim
    q = split_heads(w.q(x), w.heads)
    kv = w.kv(c)
    k, v = split_heads(kv[:, :d], w.heads), split_heads(kv[:, d:], w.heads)
    return w.proj(merge_heads(scaled_dot_attention(q, k, v)))


def random_attention(seed: int, dim: int, heads: int) -> AttentionWeights:
    rng = np.random.default_rng(seed)
    w = AttentionWeights.init(rng, dim, heads)
    w.q_gain = 1.0 + 0.1 * rng.normal(size=dim // heads)
    w.k_gain = 1.0 + 0.1 * rng.normal(size=dim // heads)
    w.qkv.bias = 0.1 * rng.normal(size=3 * dim)
    w.proj.bias = 0.1 * rng.normal(size=dim)
    return w


__all__ = [
    "AttentionWeights",
    "CrossAttentionWeights",
    "WindowConfig",
    "cross_attention",
    "fan_in_init",
    "random_attention",
    "self_attention",
    "window_partition",
    "windowed_mhsa",
]
