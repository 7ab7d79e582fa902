"""Latent -> CP-factorized local radiance volumes, assembled into one sparse field."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..config import CP_CHANNELS, CP_RANK, CP_SIDE
from ..nn.layers import Linear
from ..nn.transformers import SparseBackbone
from ..sparse import SparseGrid

RAW_CHANNELS = CP_RANK * CP_SIDE * 3 + CP_RANK * CP_CHANNELS


def reconstruct_cp_cell(v_x, v_y, v_z, v_c) -> np.ndarray:
    """V[x, y, z, c] = sum_r v_x[r, x] v_y[r, y] v_z[r, z] v_c[r, c]."""
    v_x, v_y, v_z, v_c = (np.asarray(a, dtype=np.float64) for a in (v_x, v_y, v_z, v_c))
    ranks = {a.shape[-2] for a in (v_x, v_y, v_z, v_c)}
    if len(ranks) != 1 or any(a.ndim != v_x.ndim for a in (v_y, v_z, v_c)):
        raise ValueError("factor ranks disagree")
    return np.einsum("...rx,...ry,...rz,...rc->...xyzc", v_x, v_y, v_z, v_c)


@dataclass(frozen=True)
class CPRadianceField:
    """Per-voxel factors: vx, vy, vz (L, R, S) and vc (L, R, 4) on ``structure``."""

    structure: SparseGrid
    vx: np.ndarray
    vy: np.ndarray
    vz: np.ndarray
    vc: np.ndarray

    def __post_init__(self):
        n = self.structure.num_active
        r, s = self.vx.shape[1:] if self.vx.ndim == 3 else (None, None)
        for a, tail in ((self.vx, (r, s)), (self.vy, (r, s)), (self.vz, (r, s)), (self.vc, (r, CP_CHANNELS))):
            if a.shape != (n, *tail):
                raise ValueError(f"factor shape {a.shape} does not match ({n}, {tail})")

    @property
    def rank(self) -> int:
        return self.vx.shape[1]

    @property
    def side(self) -> int:
        return self.vx.shape[2]

    @classmethod
    def from_raw(cls, structure: SparseGrid, raw, rank: int = CP_RANK, side: int = CP_SIDE) -> "CPRadianceField":
        raw = np.asarray(raw, dtype=np.float64)
        n = structure.num_active
        a = rank * side
        if raw.shape != (n, 3 * a + rank * CP_CHANNELS):
            raise ValueError(f"raw output {raw.shape} does not hold rank-{rank} side-{side} factors")
        return cls(structure, raw[:, :a].reshape(n, rank, side), raw[:, a:2 * a].reshape(n, rank, side),
                   raw[:, 2 * a:3 * a].reshape(n, rank, side), raw[:, 3 * a:].reshape(n, rank, CP_CHANNELS))

    def to_raw(self) -> np.ndarray:
        n = self.structure.num_active
        return np.concatenate([a.reshape(n, -1) for a in (self.vx, self.vy, self.vz, self.vc)], axis=1)

    def cell(self, i: int) -> np.ndarray:
        return reconstruct_cp_cell(self.vx[i], self.vy[i], self.vz[i], self.vc[i])


class FieldSampler:
    """Query world points of the assembled (N * side)^3 field.

    A point maps to its containing voxel. Inside an active voxel, the local
    volume is sampled trilinearly with texel centres at (k + 0.5) / side of
    the voxel extent, clamped at the voxel border. Elsewhere rgb and density
    are zero. Values are the raw reconstruction; renderers apply ranges.
    """

    def __init__(self, cells: CPRadianceField):
        self.cells = cells
        self.n = cells.structure.resolution
        self.side = cells.side

    def __call__(self, points):
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        out = np.zeros((p.shape[0], CP_CHANNELS))
        g = (p + 0.5) * self.n
        inside = np.all((p > -0.5) & (p < 0.5), axis=1)
        vox = np.floor(g).astype(np.int64)
        idx = np.full(p.shape[0], -1)
        if inside.any():
            idx[inside] = self.cells.structure.lookup(np.clip(vox[inside], 0, self.n - 1))
        hit = idx >= 0
        if hit.any():
            out[hit] = self._sample(idx[hit], g[hit] - vox[hit])
        return out[:, :3], out[:, 3]

    def _sample(self, idx, local):
        s = self.side
        t = np.clip(local * s - 0.5, 0.0, s - 1.0)
        i0 = np.minimum(np.floor(t).astype(np.int64), s - 2)
        f = t - i0
        uniq, inv = np.unique(idx, return_inverse=True)
        c = self.cells
        vols = reconstruct_cp_cell(c.vx[uniq], c.vy[uniq], c.vz[uniq], c.vc[uniq])  # (U, s, s, s, 4)
        res = np.zeros((idx.shape[0], CP_CHANNELS))
        for dx in (0, 1):
            wx = f[:, 0] if dx else 1 - f[:, 0]
            for dy in (0, 1):
                wy = f[:, 1] if dy else 1 - f[:, 1]
                for dz in (0, 1):
                    wz = f[:, 2] if dz else 1 - f[:, 2]
                    v = vols[inv, i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
                    res += (wx * wy * wz)[:, None] * v
        return res


def assemble_field(cells: CPRadianceField, structure: SparseGrid | None = None) -> FieldSampler:
    if structure is not None and not np.array_equal(structure.coords, cells.structure.coords):
        raise ValueError("cell count/order does not match the active voxels")
    return FieldSampler(cells)


@dataclass
class RadianceHead:
    linear: Linear
    backbone: SparseBackbone | None = None

    @classmethod
    def init(cls, seed: int, channels: int, scale: float = 1.0, backbone=None) -> "RadianceHead":
        rng = np.random.default_rng(seed)
        w = rng.normal(0.0, scale / np.sqrt(channels), (channels, RAW_CHANNELS))
        return cls(Linear(w, np.zeros(RAW_CHANNELS)), backbone)

    def tensors(self) -> dict:
        t = self.linear.tensors("head")
        if self.backbone is not None:
            t.update(self.backbone.tensors("backbone."))
        return t

    def config(self) -> dict:
        return {"kind": "radiance_head", "rank": CP_RANK, "side": CP_SIDE,
                "backbone": None if self.backbone is None else self.backbone.config()}

    @classmethod
    def load(cls, t: dict, cfg: dict) -> "RadianceHead":
        bb = None if cfg.get("backbone") is None else SparseBackbone.load(t, cfg["backbone"], "backbone.")
        return cls(Linear.load(t, "head"), bb)


def decode_radiance(latents: SparseGrid, head: RadianceHead) -> CPRadianceField:
    feats = latents.features if head.backbone is None else head.backbone(latents)
    if feats.shape[1] != head.linear.weight.shape[0]:
        raise ValueError(f"latent channels {feats.shape[1]} do not match head input {head.linear.weight.shape[0]}")
    return CPRadianceField.from_raw(latents, head.linear(feats))
