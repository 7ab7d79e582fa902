"""Forward-only numpy layers shared by the VAEs and flow transformers."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LN_EPS = 1e-6
QK_EPS = 1e-6
PE_BASE = 10000.0
TIMESTEP_DIM = 256
TIMESTEP_SCALE = 1000.0


def silu(x):
    return x / (1.0 + np.exp(-x))


def gelu(x):
    # tanh approximation
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def softmax(x, axis=-1):
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def layer_norm(x, weight=None, bias=None, eps=LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    y = (x - mu) / np.sqrt(var + eps)
    if weight is not None:
        y = y * weight
    if bias is not None:
        y = y + bias
    return y


def qk_rmsnorm(x, gain=None, eps=QK_EPS):
    """Normalize each head vector (last axis) by its root mean square."""
    x = np.asarray(x, dtype=np.float64)
    rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    y = x / rms
    return y if gain is None else y * gain


def sinusoidal_pe(coords, dim: int) -> np.ndarray:
    """Per-axis sin/cos encoding of integer voxel positions.

    ``dim / 3`` channels per axis, laid out ``[sin | cos]`` for x, then y,
    then z, with frequencies ``PE_BASE ** (-k / (dim / 6))``.
    """
    if dim % 6:
        raise ValueError(f"positional encoding dim must be divisible by 6, got {dim}")
    c = np.asarray(coords, dtype=np.float64)
    single = c.ndim == 1
    c = c.reshape(-1, 3)
    half = dim // 6
    freqs = PE_BASE ** (-np.arange(half) / half)
    parts = []
    for axis in range(3):
        ang = c[:, axis:axis + 1] * freqs
        parts += [np.sin(ang), np.cos(ang)]
    out = np.concatenate(parts, axis=1)
    return out[0] if single else out


def timestep_features(t, dim: int = TIMESTEP_DIM) -> np.ndarray:
    """Sinusoidal features of a timestep in [0, 1] (scaled to [0, 1000])."""
    half = dim // 2
    freqs = np.exp(-math.log(PE_BASE) * np.arange(half) / half)
    ang = np.atleast_1d(np.asarray(t, dtype=np.float64))[:, None] * TIMESTEP_SCALE * freqs
    return np.concatenate([np.cos(ang), np.sin(ang)], axis=1)


# -- parameters ------------------------------------------------------------------


def fan_in_init(rng: np.random.Generator, shape, scale: float = 1.0) -> np.ndarray:
    """Variance-scaling (fan-in) normal init; fan-in is every axis but the last."""
    fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else shape[0]
    return rng.normal(0.0, scale / math.sqrt(max(fan_in, 1)), size=shape)


@dataclass
class Linear:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray

    def __call__(self, x):
        return x @ self.weight + self.bias

    @classmethod
    def init(cls, rng, d_in: int, d_out: int, zero: bool = False) -> "Linear":
        w = np.zeros((d_in, d_out)) if zero else fan_in_init(rng, (d_in, d_out))
        return cls(w, np.zeros(d_out))

    def tensors(self, name: str) -> dict:
        return {name: self.weight, f"{name}_b": self.bias}

    @classmethod
    def load(cls, t: dict, name: str) -> "Linear":
        return cls(t[name], t[f"{name}_b"])


@dataclass
class FFN:
    fc1: Linear
    fc2: Linear

    def __call__(self, x):
        return self.fc2(gelu(self.fc1(x)))

    @classmethod
    def init(cls, rng, dim: int, mult: int = 4) -> "FFN":
        return cls(Linear.init(rng, dim, mult * dim), Linear.init(rng, mult * dim, dim))

    def tensors(self, prefix: str) -> dict:
        return {**self.fc1.tensors(f"{prefix}.ffn1"), **self.fc2.tensors(f"{prefix}.ffn2")}

    @classmethod
    def load(cls, t: dict, prefix: str) -> "FFN":
        return cls(Linear.load(t, f"{prefix}.ffn1"), Linear.load(t, f"{prefix}.ffn2"))


@dataclass
class TimestepEmbedder:
    """256-d sinusoidal timestep features followed by a 2-layer SiLU MLP."""

    fc1: Linear
    fc2: Linear

    def __call__(self, t):
        return self.fc2(silu(self.fc1(timestep_features(t))))

    @classmethod
    def init(cls, rng, dim: int) -> "TimestepEmbedder":
        return cls(Linear.init(rng, TIMESTEP_DIM, dim), Linear.init(rng, dim, dim))

    def tensors(self, prefix: str = "t_embed") -> dict:
        return {**self.fc1.tensors(f"{prefix}.fc1"), **self.fc2.tensors(f"{prefix}.fc2")}

    @classmethod
    def load(cls, t: dict, prefix: str = "t_embed") -> "TimestepEmbedder":
        return cls(Linear.load(t, f"{prefix}.fc1"), Linear.load(t, f"{prefix}.fc2"))
