"""Latent -> 3D Gaussians: per-voxel linear head and the raw-to-parameter mapping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from ..config import GAUSSIAN_PARAMS, GAUSSIANS_PER_VOXEL, MIN_GAUSSIAN_SCALE
from ..multiview import voxel_center
from ..nn.layers import Linear
from ..nn.transformers import SparseBackbone
from ..sparse import SparseGrid

OFFSET_CLIP = 15.0  # tanh(15) already rounds to 1 - 1e-13
# raw layout per Gaussian
OFFSET, SCALE, OPACITY, ROTATION, COLOR = slice(0, 3), slice(3, 6), slice(6, 7), slice(7, 11), slice(11, 14)


def softplus(x):
    return np.logaddexp(0.0, x)


@dataclass(frozen=True)
class GaussianSet:
    centers: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray  # unit quaternions (w, x, y, z)
    opacities: np.ndarray
    colors: np.ndarray
    anchors: np.ndarray = field(repr=False)
    resolution: int = 64

    def __len__(self) -> int:
        return self.centers.shape[0]

    @classmethod
    def empty(cls, resolution: int = 64) -> "GaussianSet":
        z3 = np.zeros((0, 3))
        return cls(z3, z3.copy(), np.zeros((0, 4)), np.zeros(0), z3.copy(), np.zeros((0, 3), np.int64), resolution)

    def check_invariants(self) -> list[str]:
        """Names of violated invariants (empty when all hold)."""
        bad = []
        n = self.resolution
        dev = np.abs(self.centers - voxel_center(self.anchors, n))
        if dev.size and dev.max() >= 1.0 / n:
            bad.append("center leaves its anchor's one-voxel neighbourhood")
        if np.any(self.scales < MIN_GAUSSIAN_SCALE):
            bad.append("scale below floor")
        if self.rotations.size and np.max(np.abs(np.linalg.norm(self.rotations, axis=1) - 1.0)) > 1e-6:
            bad.append("quaternion not unit")
        if np.any((self.opacities < 0) | (self.opacities > 1)):
            bad.append("opacity outside [0, 1]")
        if np.any((self.colors < 0) | (self.colors > 1)):
            bad.append("color outside [0, 1]")
        return bad

    def permuted(self, perm) -> "GaussianSet":
        return GaussianSet(self.centers[perm], self.scales[perm], self.rotations[perm], self.opacities[perm],
                           self.colors[perm], self.anchors[perm], self.resolution)


def gaussians_from_raw(raw, coords, resolution: int, k: int = GAUSSIANS_PER_VOXEL) -> GaussianSet:
    """Map raw head output (L, k*14) on voxels ``coords`` to constrained Gaussian parameters."""
    raw = np.asarray(raw, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if raw.shape != (coords.shape[0], k * GAUSSIAN_PARAMS):
        raise ValueError(f"raw output {raw.shape} != ({coords.shape[0]}, {k * GAUSSIAN_PARAMS})")
    r = raw.reshape(-1, GAUSSIAN_PARAMS)
    anchors = np.repeat(coords, k, axis=0)
    centers = voxel_center(anchors, resolution) + np.tanh(np.clip(r[:, OFFSET], -OFFSET_CLIP, OFFSET_CLIP)) / resolution
    scales = MIN_GAUSSIAN_SCALE + softplus(r[:, SCALE])
    q = r[:, ROTATION]
    qn = np.linalg.norm(q, axis=1, keepdims=True)
    rot = np.where(qn > 1e-12, q / np.maximum(qn, 1e-12), np.array([1.0, 0.0, 0.0, 0.0]))
    return GaussianSet(centers, scales, rot, expit(r[:, 6]), expit(r[:, COLOR]), anchors, resolution)


@dataclass
class GaussianHead:
    """Optional sparse transformer backbone followed by a per-voxel linear layer."""

    linear: Linear
    k: int = GAUSSIANS_PER_VOXEL
    backbone: SparseBackbone | None = None

    @classmethod
    def init(cls, seed: int, channels: int, k: int = GAUSSIANS_PER_VOXEL, scale: float = 1.0, backbone=None):
        rng = np.random.default_rng(seed)
        w = rng.normal(0.0, scale / np.sqrt(channels), (channels, k * GAUSSIAN_PARAMS))
        return cls(Linear(w, np.zeros(k * GAUSSIAN_PARAMS)), k, backbone)

    def raw(self, latents: SparseGrid) -> np.ndarray:
        feats = latents.features if self.backbone is None else self.backbone(latents)
        if feats.shape[1] != self.linear.weight.shape[0]:
            raise ValueError(f"latent channels {feats.shape[1]} do not match head input {self.linear.weight.shape[0]}")
        return self.linear(feats)

    def tensors(self) -> dict:
        t = self.linear.tensors("head")
        if self.backbone is not None:
            t.update(self.backbone.tensors("backbone."))
        return t

    def config(self) -> dict:
        return {"kind": "gaussian_head", "k": self.k,
                "backbone": None if self.backbone is None else self.backbone.config()}

    @classmethod
    def load(cls, t: dict, cfg: dict) -> "GaussianHead":
        bb = None if cfg.get("backbone") is None else SparseBackbone.load(t, cfg["backbone"], "backbone.")
        return cls(Linear.load(t, "head"), cfg["k"], bb)


def decode_gaussians(latents: SparseGrid, head: GaussianHead, k: int | None = None) -> GaussianSet:
    k = head.k if k is None else k
    if k < 1:
        raise ValueError("k must be >= 1")
    if k != head.k:
        raise ValueError(f"head emits {head.k} Gaussians per voxel, asked for {k}")
    if latents.num_active == 0:
        return GaussianSet.empty(latents.resolution)
    return gaussians_from_raw(head.raw(latents), latents.coords, latents.resolution, k)


# -- geometry helpers shared with the splatter --------------------------------------------


def quat_to_rotmat(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def covariances(gs: GaussianSet) -> np.ndarray:
    r = quat_to_rotmat(gs.rotations)
    m = r * gs.scales[:, None, :]
    return m @ np.swapaxes(m, 1, 2)
