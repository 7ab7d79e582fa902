"""Pinhole cameras, voxel-to-pixel projection and multiview feature averaging."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import CAMERA_FOV_DEG, CAMERA_RADIUS, ENCODE_VIEWS
from .sparse import SparseGrid

POLE_THRESHOLD = 0.999


@dataclass(frozen=True)
class Camera:
    position: tuple
    target: tuple = (0.0, 0.0, 0.0)
    up: tuple = (0.0, 0.0, 1.0)
    fov_y: float = CAMERA_FOV_DEG
    width: int = 512
    height: int = 512

    def __post_init__(self):
        pos = tuple(float(v) for v in self.position)
        tgt = tuple(float(v) for v in self.target)
        up = tuple(float(v) for v in self.up)
        if len(pos) != 3 or len(tgt) != 3 or len(up) != 3:
            raise ValueError("position, target and up must be 3-vectors")
        if pos == tgt:
            raise ValueError("camera position coincides with its target")
        if not 0.0 < self.fov_y < 180.0:
            raise ValueError(f"fov_y must be in (0, 180), got {self.fov_y}")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "target", tgt)
        object.__setattr__(self, "up", up)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def focal(self) -> float:
        """Focal length in pixels for the vertical field of view."""
        return 0.5 * self.height / math.tan(math.radians(self.fov_y) / 2.0)

    def basis(self) -> np.ndarray:
        """Rows: right, up, forward (world-space unit vectors)."""
        forward = np.subtract(self.target, self.position)
        forward = forward / np.linalg.norm(forward)
        up_hint = np.asarray(self.up, dtype=np.float64)
        up_hint = up_hint / np.linalg.norm(up_hint)
        if abs(float(forward @ up_hint)) > POLE_THRESHOLD:
            up_hint = np.array([1.0, 0.0, 0.0])
        right = np.cross(forward, up_hint)
        right /= np.linalg.norm(right)
        true_up = np.cross(right, forward)
        return np.stack([right, true_up, forward])

    def to_camera(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return (p - np.asarray(self.position)) @ self.basis().T

    def to_dict(self) -> dict:
        return {
            "position": list(self.position),
            "target": list(self.target),
            "up": list(self.up),
            "fov_y_deg": float(self.fov_y),
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        try:
            return cls(
                position=tuple(d["position"]),
                target=tuple(d.get("target", (0.0, 0.0, 0.0))),
                up=tuple(d.get("up", (0.0, 0.0, 1.0))),
                fov_y=float(d["fov_y_deg"]),
                width=int(d["width"]),
                height=int(d["height"]),
            )
        except (KeyError, TypeError) as exc:
            raise ValueError(f"invalid camera description: {exc}") from exc


def load_camera(path) -> Camera:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: camera JSON does not parse: {exc}") from exc
    return Camera.from_dict(d)


def save_camera(path, camera: Camera) -> None:
    Path(path).write_text(json.dumps(camera.to_dict(), indent=2))


def sample_sphere_cameras(
    n: int = ENCODE_VIEWS,
    radius: float = CAMERA_RADIUS,
    fov: float = CAMERA_FOV_DEG,
    seed: int = 0,
    width: int = 512,
    height: int = 512,
) -> list[Camera]:
    """Area-uniform camera positions on a sphere, all looking at the origin."""
    if n < 1 or radius <= 0:
        raise ValueError("need n >= 1 and radius > 0")
    rng = np.random.default_rng(seed)
    z = rng.uniform(-1.0, 1.0, n)
    phi = rng.uniform(0.0, 2.0 * np.pi, n)
    rho = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    dirs = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return [Camera(tuple(radius * d), fov_y=fov, width=width, height=height) for d in dirs]


def orbit_camera(yaw_deg: float, pitch_deg: float, radius: float = CAMERA_RADIUS, **kw) -> Camera:
    yaw, pitch = math.radians(yaw_deg), math.radians(pitch_deg)
    pos = (
        radius * math.cos(pitch) * math.cos(yaw),
        radius * math.cos(pitch) * math.sin(yaw),
        radius * math.sin(pitch),
    )
    return Camera(pos, **kw)


@dataclass(frozen=True)
class Projection:
    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    visible: np.ndarray


def project(points, camera: Camera) -> Projection:
    """Continuous pixel coordinates (pixel (i, j) has its centre at (j + .5, i + .5))."""
    pc = np.atleast_2d(camera.to_camera(points))
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    f = camera.focal
    with np.errstate(divide="ignore", invalid="ignore"):
        u = 0.5 * camera.width + f * x / z
        v = 0.5 * camera.height - f * y / z
    visible = (z > 0) & (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)
    return Projection(u, v, z, visible)


def pixel_rays(camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Origin and per-pixel direction (H, W, 3) scaled so that depth 1 lies on the ray at t = 1."""
    f = camera.focal
    jj, ii = np.meshgrid(np.arange(camera.width) + 0.5, np.arange(camera.height) + 0.5)
    xc = (jj - 0.5 * camera.width) / f
    yc = -(ii - 0.5 * camera.height) / f
    right, up, fwd = camera.basis()
    dirs = xc[..., None] * right + yc[..., None] * up + fwd
    return np.asarray(camera.position), dirs


def unproject_depth(depth_map, camera: Camera) -> np.ndarray:
    """World points for every finite-depth pixel, in row-major pixel order."""
    d = np.asarray(depth_map, dtype=np.float64)
    if d.shape != (camera.height, camera.width):
        raise ValueError(f"depth map {d.shape} does not match camera {(camera.height, camera.width)}")
    origin, dirs = pixel_rays(camera)
    ok = np.isfinite(d)
    return origin + dirs[ok] * d[ok][:, None]


def voxel_center(p, resolution: int) -> np.ndarray:
    """World-space centre of voxel(s) p inside the (-0.5, 0.5)^3 cube."""
    return (np.asarray(p, dtype=np.float64) + 0.5) / resolution - 0.5


@dataclass(frozen=True)
class FeatureView:
    camera: Camera
    feature_map: np.ndarray = field(repr=False)

    def __post_init__(self):
        fm = np.asarray(self.feature_map, dtype=np.float64)
        if fm.ndim == 2:
            fm = fm[..., None]
        if fm.shape[:2] != (self.camera.height, self.camera.width):
            raise ValueError(
                f"feature map {fm.shape[:2]} does not match camera {(self.camera.height, self.camera.width)}"
            )
        if not np.all(np.isfinite(fm)):
            raise ValueError("feature map contains non-finite values")
        object.__setattr__(self, "feature_map", fm)

    @property
    def channels(self) -> int:
        return self.feature_map.shape[2]


def sample_map(fmap: np.ndarray, u: np.ndarray, v: np.ndarray, interpolation: str) -> np.ndarray:
    h, w = fmap.shape[:2]
    if interpolation == "nearest":
        j = np.clip(np.floor(u).astype(np.int64), 0, w - 1)
        i = np.clip(np.floor(v).astype(np.int64), 0, h - 1)
        return fmap[i, j]
    if interpolation != "bilinear":
        raise ValueError(f"unknown interpolation {interpolation!r}")
    x = np.clip(u - 0.5, 0.0, w - 1.0)
    y = np.clip(v - 0.5, 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    top = fmap[y0, x0] * (1 - fx) + fmap[y0, x1] * fx
    bot = fmap[y1, x0] * (1 - fx) + fmap[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _view_key(view: FeatureView):
    c = view.camera
    digest = hashlib.sha1(np.ascontiguousarray(view.feature_map).tobytes()).hexdigest()
    return (c.position, c.target, c.up, c.fov_y, c.width, c.height, digest)


@dataclass(frozen=True)
class AggregateResult:
    grid: SparseGrid
    unseen: np.ndarray  # bool per voxel: visible in no view, zero-filled
    view_counts: np.ndarray


def aggregate_features(
    structure: SparseGrid, views: list[FeatureView], interpolation: str = "bilinear"
) -> AggregateResult:
    """Average the features each voxel centre projects onto across all views.

    Visibility is depth positivity plus image bounds; there is no occlusion test.
    Views are accumulated in a canonical order (camera parameters, then a
    digest of the map) so any permutation of ``views`` gives identical bits.
    """
    if not views:
        raise ValueError("aggregate_features needs at least one view")
    dims = {v.channels for v in views}
    if len(dims) != 1:
        raise ValueError(f"views disagree on feature channels: {sorted(dims)}")
    d = dims.pop()
    centers = voxel_center(structure.coords, structure.resolution)
    acc = np.zeros((structure.num_active, d))
    counts = np.zeros(structure.num_active, dtype=np.int64)
    for view in sorted(views, key=_view_key):
        proj = project(centers, view.camera)
        vis = proj.visible
        if vis.any():
            acc[vis] += sample_map(view.feature_map, proj.u[vis], proj.v[vis], interpolation)
            counts[vis] += 1
    seen = counts > 0
    feats = np.zeros_like(acc)
    feats[seen] = acc[seen] / counts[seen][:, None]
    return AggregateResult(structure.with_features(feats), ~seen, counts)
