"""Sparse voxel grids and the structure-level operators on them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import MAX_RESOLUTION

DICE_EPS = 1e-8


class ResolutionError(ValueError):
    pass


class StructureMismatchError(ValueError):
    pass


def coord_keys(coords: np.ndarray, resolution: int) -> np.ndarray:
    """Linear keys whose ascending order is the lexicographic (x, y, z) order."""
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    n = np.int64(resolution)
    return (c[:, 0] * n + c[:, 1]) * n + c[:, 2]


def keys_to_coords(keys: np.ndarray, resolution: int) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    n = resolution
    return np.stack([keys // (n * n), (keys // n) % n, keys % n], axis=1)


@dataclass(frozen=True, eq=False)
class SparseGrid:
    """Active voxels of an N^3 grid with one feature row per voxel.

    ``coords`` is an (L, 3) int64 array kept in strictly ascending
    lexicographic order; ``features`` is (L, C) float64 with row i attached
    to ``coords[i]``.
    """

    resolution: int
    coords: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        n = int(self.resolution)
        if n < 1 or n > MAX_RESOLUTION or n & (n - 1):
            raise ResolutionError(f"resolution must be a power of two <= {MAX_RESOLUTION}, got {n}")
        coords = np.ascontiguousarray(np.asarray(self.coords, dtype=np.int64).reshape(-1, 3))
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats.reshape(-1, 1)
        feats = np.ascontiguousarray(feats)
        if feats.shape[0] != coords.shape[0]:
            raise ValueError(f"{coords.shape[0]} coords but {feats.shape[0]} feature rows")
        if coords.size and (coords.min() < 0 or coords.max() >= n):
            raise ValueError("voxel coordinate out of range")
        keys = coord_keys(coords, n)
        if keys.size > 1 and not np.all(np.diff(keys) > 0):
            raise ValueError("coords must be strictly sorted (x, y, z) without duplicates")
        if not np.all(np.isfinite(feats)):
            raise ValueError("non-finite feature values")
        coords.setflags(write=False)
        feats.setflags(write=False)
        object.__setattr__(self, "resolution", n)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "_keys", keys)

    @classmethod
    def from_unsorted(cls, resolution: int, coords, features) -> "SparseGrid":
        """Build a grid from coords in any order; duplicates are rejected."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats.reshape(-1, 1)
        order = np.argsort(coord_keys(coords, resolution), kind="stable")
        return cls(resolution, coords[order], feats[order])

    @classmethod
    def empty(cls, resolution: int, channels: int = 1) -> "SparseGrid":
        return cls(resolution, np.zeros((0, 3), np.int64), np.zeros((0, channels)))

    @property
    def keys(self) -> np.ndarray:
        return self._keys

    @property
    def num_active(self) -> int:
        return self.coords.shape[0]

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.num_active

    def with_features(self, features) -> "SparseGrid":
        return SparseGrid(self.resolution, self.coords, features)

    def lookup(self, coords) -> np.ndarray:
        """Row index of each query coordinate, or -1 where inactive / out of range."""
        q = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        n = self.resolution
        inside = np.all((q >= 0) & (q < n), axis=1)
        out = np.full(q.shape[0], -1, dtype=np.int64)
        if not self.num_active or not inside.any():
            return out
        qk = coord_keys(q[inside], n)
        pos = np.searchsorted(self._keys, qk)
        pos_c = np.minimum(pos, self.num_active - 1)
        hit = self._keys[pos_c] == qk
        idx = np.where(hit, pos_c, -1)
        out[inside] = idx
        return out

    def equals(self, other: "SparseGrid") -> bool:
        return (
            self.resolution == other.resolution
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.features, other.features)
        )

    def __repr__(self) -> str:
        return f"SparseGrid(N={self.resolution}, L={self.num_active}, C={self.channels})"


def from_dense(grid: np.ndarray, fill: float = 1.0) -> SparseGrid:
    """One active voxel per true cell of a boolean N^3 array."""
    grid = np.asarray(grid, dtype=bool)
    if grid.ndim != 3 or len(set(grid.shape)) != 1:
        raise ValueError(f"expected a cubic N^3 grid, got shape {grid.shape}")
    coords = np.argwhere(grid)  # row-major argwhere is already lexicographic
    return SparseGrid(grid.shape[0], coords, np.full((coords.shape[0], 1), float(fill)))


def to_dense(grid: SparseGrid) -> np.ndarray:
    n = grid.resolution
    out = np.zeros((n, n, n), dtype=bool)
    if grid.num_active:
        c = grid.coords
        out[c[:, 0], c[:, 1], c[:, 2]] = True
    return out


def to_dense_features(grid: SparseGrid) -> np.ndarray:
    """Dense (N, N, N, C) array with zeros at inactive cells."""
    n = grid.resolution
    out = np.zeros((n, n, n, grid.channels))
    c = grid.coords
    out[c[:, 0], c[:, 1], c[:, 2]] = grid.features
    return out


@dataclass(frozen=True)
class TokenSequence:
    """Serialized view of a sparse grid: tokens[i] belongs to coords[i]."""

    resolution: int
    coords: np.ndarray
    tokens: np.ndarray

    def token_of(self, coord) -> int:
        keys = coord_keys(self.coords, self.resolution)
        k = coord_keys(np.asarray(coord).reshape(1, 3), self.resolution)[0]
        i = int(np.searchsorted(keys, k))
        if i >= len(keys) or keys[i] != k:
            raise KeyError(tuple(int(v) for v in coord))
        return i


def serialize(grid: SparseGrid) -> TokenSequence:
    return TokenSequence(grid.resolution, grid.coords, grid.features)


def deserialize(seq: TokenSequence) -> SparseGrid:
    return SparseGrid.from_unsorted(seq.resolution, seq.coords, seq.tokens)


def avg_pool2(grid: SparseGrid) -> SparseGrid:
    """2x average pooling over active children only."""
    n = grid.resolution
    if n % 2 or n < 2:
        raise ResolutionError(f"cannot pool odd resolution {n}")
    half = n // 2
    if not grid.num_active:
        return SparseGrid.empty(half, grid.channels)
    parent_keys = coord_keys(grid.coords // 2, half)
    uniq, inverse, counts = np.unique(parent_keys, return_inverse=True, return_counts=True)
    sums = np.zeros((uniq.size, grid.channels))
    np.add.at(sums, inverse, grid.features)
    return SparseGrid(half, keys_to_coords(uniq, half), sums / counts[:, None])


def nearest_unpool2(coarse: SparseGrid, fine_structure: SparseGrid) -> SparseGrid:
    """Give every active fine voxel the feature of its coarse parent."""
    if fine_structure.resolution != 2 * coarse.resolution:
        raise ResolutionError(
            f"fine resolution {fine_structure.resolution} is not twice {coarse.resolution}"
        )
    idx = coarse.lookup(fine_structure.coords // 2)
    if np.any(idx < 0):
        bad = fine_structure.coords[np.argmax(idx < 0)]
        raise StructureMismatchError(f"fine voxel {tuple(bad)} has no active parent")
    feats = coarse.features[idx] if coarse.num_active else np.zeros((0, coarse.channels))
    return SparseGrid(fine_structure.resolution, fine_structure.coords, feats)


KERNEL_OFFSETS = np.array(
    [(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)], dtype=np.int64
)


def neighbor_table(grid: SparseGrid) -> np.ndarray:
    """(L, 27) row indices of each voxel's 3^3 neighbours, -1 where inactive."""
    table = np.empty((grid.num_active, 27), dtype=np.int64)
    for o, off in enumerate(KERNEL_OFFSETS):
        table[:, o] = grid.lookup(grid.coords + off)
    return table


def sparse_conv3(grid: SparseGrid, weights: np.ndarray, bias=None, neighbors=None) -> SparseGrid:
    """Submanifold 3x3x3 convolution; the active set is preserved.

    ``weights`` has shape (3, 3, 3, Cin, Cout); tap [i, j, k] multiplies the
    neighbour at offset (i - 1, j - 1, k - 1). Inactive neighbours contribute zero.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.shape[:3] != (3, 3, 3) or w.ndim != 5 or w.shape[3] != grid.channels:
        raise ValueError(f"kernel shape {w.shape} does not match {grid.channels} input channels")
    cout = w.shape[4]
    b = np.zeros(cout) if bias is None else np.asarray(bias, dtype=np.float64)
    if b.shape != (cout,):
        raise ValueError(f"bias shape {b.shape} != ({cout},)")
    if neighbors is None:
        neighbors = neighbor_table(grid)
    out = np.zeros((grid.num_active, cout))
    flat_w = w.reshape(27, grid.channels, cout)
    for o in range(27):
        nb = neighbors[:, o]
        hit = nb >= 0
        if not hit.any():
            continue
        out[hit] += grid.features[nb[hit]] @ flat_w[o]
    out += b
    return grid.with_features(out)


def subdivide(grid: SparseGrid) -> SparseGrid:
    """Split every voxel into its 2^3 children, copying the parent feature."""
    n2 = grid.resolution * 2
    if not grid.num_active:
        return SparseGrid.empty(n2, grid.channels)
    child = np.array([(i, j, k) for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.int64)
    coords = (grid.coords[:, None, :] * 2 + child[None]).reshape(-1, 3)
    feats = np.repeat(grid.features, 8, axis=0)
    return SparseGrid.from_unsorted(n2, coords, feats)


def dice_loss(pred_prob, target) -> float:
    """Soft Dice loss 1 - (2 sum(p t) + eps) / (sum p + sum t + eps).

    The smoothing term sits in numerator and denominator so that both a
    perfect binary match and the empty/empty case give exactly 0.
    """
    p = np.asarray(pred_prob, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    if p.size and (p.min() < 0.0 or p.max() > 1.0):
        raise ValueError("probabilities must lie in [0, 1]")
    inter = np.sum(p * t)
    denom = np.sum(p) + np.sum(t) + DICE_EPS
    return float(1.0 - (2.0 * inter + DICE_EPS) / denom)


def dice_loss_grad(pred_prob, target) -> np.ndarray:
    p = np.asarray(pred_prob, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    inter = np.sum(p * t)
    denom = np.sum(p) + np.sum(t) + DICE_EPS
    return -(2.0 * t * denom - (2.0 * inter + DICE_EPS)) / denom**2
