"""Point-cloud metrics: Chamfer distance, F-score, farthest point sampling and surface sampling."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from ..config import CAMERA_FOV_DEG, CAMERA_RADIUS, EVAL_POINTS, EVAL_VIEWS, FSCORE_RADIUS
from ..decoders.mesh import TriMesh
from ..multiview import sample_sphere_cameras, unproject_depth
from ..render.raster import rasterize_mesh

NN_CANDIDATES = 8


class EmptyCloudError(ValueError):
    pass


def _cloud(points, name: str) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if p.shape[0] == 0:
        raise EmptyCloudError(f"{name} is empty")
    if not np.all(np.isfinite(p)):
        raise ValueError(f"{name} has non-finite coordinates")
    return p


def nearest(points, queries, tree: cKDTree | None = None):
    """(distance, index) of each query's nearest point; equal distances resolve to the lowest index."""
    points = np.asarray(points, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    tree = cKDTree(points) if tree is None else tree
    k = min(NN_CANDIDATES, len(points))
    _, idx = tree.query(queries, k=k)
    idx = np.asarray(idx).reshape(len(queries), k)
    # recompute exactly so the answer does not depend on the tree's arithmetic
    d = np.sqrt(np.sum((queries[:, None, :] - points[idx]) ** 2, axis=-1))
    best = d.min(1, keepdims=True)
    cand = np.where(d == best, idx, np.iinfo(np.int64).max)
    out_d, out_i = best[:, 0], cand.min(1)
    # every candidate tied: more equidistant points may lie beyond the k returned
    for row in np.flatnonzero(d[:, -1] == best[:, 0]) if k < len(points) else ():
        ball = np.array(sorted(tree.query_ball_point(queries[row], out_d[row] * (1 + 1e-9) + 1e-300)))
        db = np.sqrt(np.sum((queries[row] - points[ball]) ** 2, axis=-1))
        out_i[row] = ball[db == db.min()].min()
        out_d[row] = db.min()
    return out_d, out_i


def chamfer(x, y) -> float:
    """Mean nearest-neighbour L2 distance (not squared), summed over both directions."""
    x, y = _cloud(x, "X"), _cloud(y, "Y")
    dxy, _ = nearest(y, x)
    dyx, _ = nearest(x, y)
    return float(dxy.mean() + dyx.mean())


def fscore(x, y, r: float = FSCORE_RADIUS) -> float:
    """F-score with FN counted over X, FP over Y, and TP = |Y| - FP, as transcribed."""
    x, y = _cloud(x, "X"), _cloud(y, "Y")
    dxy, _ = nearest(y, x)
    dyx, _ = nearest(x, y)
    fn = int(np.sum(dxy > r))
    fp = int(np.sum(dyx > r))
    tp = len(y) - fp
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


@dataclass(frozen=True)
class FPSResult:
    points: np.ndarray
    indices: np.ndarray
    min_dists: np.ndarray  # distance of each pick to the previously chosen set (inf for the first)


def farthest_point_sample(points, k: int, seed: int = 0, start: int | None = None) -> FPSResult:
    """Greedy farthest point sampling from a random (or given) first point; ties go to the lowest index."""
    p = _cloud(points, "points")
    n = p.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"cannot pick {k} points from {n}")
    first = int(np.random.default_rng(seed).integers(n)) if start is None else int(start)
    idx = np.empty(k, dtype=np.int64)
    gaps = np.empty(k)
    idx[0], gaps[0] = first, np.inf
    dist = np.sqrt(np.sum((p - p[first]) ** 2, axis=1))
    for i in range(1, k):
        j = int(np.argmax(dist))
        idx[i], gaps[i] = j, dist[j]
        dist = np.minimum(dist, np.sqrt(np.sum((p - p[j]) ** 2, axis=1)))
    return FPSResult(p[idx], idx, gaps)


@dataclass(frozen=True)
class SurfaceSample:
    points: np.ndarray
    available: int
    exhausted: bool  # fewer unprojected points than requested; all were returned


def surface_point_cloud(mesh: TriMesh, n_views: int = EVAL_VIEWS, n_points: int = EVAL_POINTS, seed: int = 0,
                        resolution: int = 512, radius: float = CAMERA_RADIUS,
                        fov: float = CAMERA_FOV_DEG) -> SurfaceSample:
    """Unproject rasterized depth from sphere cameras and subsample uniformly without replacement."""
    if mesh.num_faces == 0:
        raise ValueError("mesh has no faces")
    cams = sample_sphere_cameras(n_views, radius, fov, seed, resolution, resolution)
    pts = [unproject_depth(rasterize_mesh(mesh, cam).depth, cam) for cam in cams]
    allp = np.concatenate(pts) if pts else np.zeros((0, 3))
    if allp.shape[0] == 0:
        raise EmptyCloudError("no surface visible from any view")
    if allp.shape[0] <= n_points:
        if allp.shape[0] < n_points:
            warnings.warn(f"only {allp.shape[0]} surface points available, {n_points} requested", stacklevel=2)
        return SurfaceSample(allp, allp.shape[0], allp.shape[0] < n_points)
    pick = np.random.default_rng(seed).choice(allp.shape[0], n_points, replace=False)
    return SurfaceSample(allp[np.sort(pick)], allp.shape[0], False)
