"""File formats for decoded assets: splat PLY, mesh OBJ/PLY, radiance cells with a JSON sidecar."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from scipy.special import logit

from ..io import FormatError, read_ply, read_sparse, write_obj, write_ply, write_sparse
from ..sparse import SparseGrid
from .gaussians import GaussianSet
from .mesh import TriMesh
from .radiance import CPRadianceField

SH_C0 = 0.28209479177387814  # degree-0 spherical harmonic, the splat-viewer color convention
PROB_CLIP = 1e-7


def write_gaussians_ply(path, gs: GaussianSet) -> None:
    """x,y,z, f_dc_0..2, opacity (logit), scale_0..2 (log), rot_0..3 (w first), plus anchor_0..2."""
    c = gs.centers
    f_dc = (gs.colors - 0.5) / SH_C0
    log_s = np.log(gs.scales)
    op = logit(np.clip(gs.opacities, PROB_CLIP, 1 - PROB_CLIP))
    v = {"x": c[:, 0], "y": c[:, 1], "z": c[:, 2]}
    v.update({f"f_dc_{i}": f_dc[:, i] for i in range(3)})
    v["opacity"] = op
    v.update({f"scale_{i}": log_s[:, i] for i in range(3)})
    v.update({f"rot_{i}": gs.rotations[:, i] for i in range(4)})
    v.update({f"anchor_{i}": gs.anchors[:, i].astype(np.float64) for i in range(3)})
    write_ply(path, v)


def read_gaussians_ply(path, resolution: int = 64) -> GaussianSet:
    v, _ = read_ply(path)
    try:
        col = lambda prefix, n: np.stack([v[f"{prefix}_{i}"] for i in range(n)], 1).astype(np.float64)
        centers = np.stack([v["x"], v["y"], v["z"]], 1).astype(np.float64)
        colors = np.clip(0.5 + SH_C0 * col("f_dc", 3), 0.0, 1.0)
        scales = np.exp(col("scale", 3))
        rot = col("rot", 4)
        op = 1.0 / (1.0 + np.exp(-v["opacity"].astype(np.float64)))
    except KeyError as exc:
        raise FormatError(f"{path}: missing Gaussian property {exc}") from exc
    rot = rot / np.linalg.norm(rot, axis=1, keepdims=True)
    if "anchor_0" in v:
        anchors = np.rint(col("anchor", 3)).astype(np.int64)
    else:
        anchors = np.clip(np.floor((centers + 0.5) * resolution), 0, resolution - 1).astype(np.int64)
    return GaussianSet(centers, scales, rot, op, colors, anchors, resolution)


def write_mesh_obj(path, mesh: TriMesh) -> None:
    write_obj(path, mesh.vertices, mesh.faces, _export_normals(mesh))


def _export_normals(mesh: TriMesh) -> np.ndarray:
    """Predicted normals where they are non-zero, geometric normals elsewhere."""
    geo = mesh.vertex_normals()
    if mesh.normals is None:
        return geo
    ok = np.linalg.norm(mesh.normals, axis=1) > 1e-9
    return np.where(ok[:, None], mesh.normals, geo)


def write_mesh_ply(path, mesh: TriMesh) -> None:
    v = mesh.vertices
    vert = {"x": v[:, 0], "y": v[:, 1], "z": v[:, 2]}
    n = _export_normals(mesh)
    vert.update(nx=n[:, 0], ny=n[:, 1], nz=n[:, 2])
    if mesh.colors is not None:
        rgb = np.clip(np.rint(mesh.colors * 255.0), 0, 255).astype(np.uint8)
        vert.update(red=rgb[:, 0], green=rgb[:, 1], blue=rgb[:, 2])
    write_ply(path, vert, mesh.faces)


def read_mesh_ply(path) -> TriMesh:
    v, f = read_ply(path)
    verts = np.stack([v["x"], v["y"], v["z"]], 1).astype(np.float64)
    colors = None
    if "red" in v:
        colors = np.stack([v["red"], v["green"], v["blue"]], 1).astype(np.float64) / 255.0
    normals = np.stack([v["nx"], v["ny"], v["nz"]], 1).astype(np.float64) if "nx" in v else None
    return TriMesh(verts, np.zeros((0, 3), np.int64) if f is None else f, colors, normals)


def _sidecar(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".json")


def write_radiance(path, field: CPRadianceField) -> None:
    """Raw factors as a sparse-grid file plus ``<path>.json`` with rank and side."""
    write_sparse(path, field.structure.with_features(field.to_raw()))
    _sidecar(path).write_text(json.dumps({"kind": "cp_radiance", "rank": field.rank, "side": field.side,
                                          "channels": 4}, indent=2))


def read_radiance(path) -> CPRadianceField:
    side = _sidecar(path)
    if not side.exists():
        raise FormatError(f"{path}: missing sidecar {side.name}")
    meta = json.loads(side.read_text())
    grid: SparseGrid = read_sparse(path)
    return CPRadianceField.from_raw(grid.with_features(np.zeros((grid.num_active, 1))), grid.features,
                                    meta["rank"], meta["side"])
