from .export import (read_gaussians_ply, read_mesh_ply, read_radiance, write_gaussians_ply, write_mesh_obj,
                     write_mesh_ply, write_radiance)
from .gaussians import GaussianHead, GaussianSet, covariances, decode_gaussians, gaussians_from_raw, quat_to_rotmat
from .mesh import (EmptyMeshError, ExtractionInfo, FlexiGrid, MeshUpsampler, TriMesh, VertexField,
                   decode_mesh_params, densify, extract_mesh, flexi_from_raw, flexicubes_extract, sphere_sdf_grid,
                   vertex_spread)
from .radiance import (CPRadianceField, FieldSampler, RadianceHead, assemble_field, decode_radiance,
                       reconstruct_cp_cell)

__all__ = [
    "GaussianHead", "GaussianSet", "covariances", "decode_gaussians", "gaussians_from_raw", "quat_to_rotmat",
    "CPRadianceField", "FieldSampler", "RadianceHead", "assemble_field", "decode_radiance", "reconstruct_cp_cell",
    "EmptyMeshError", "ExtractionInfo", "FlexiGrid", "MeshUpsampler", "TriMesh", "VertexField",
    "decode_mesh_params", "densify", "extract_mesh", "flexi_from_raw", "flexicubes_extract", "sphere_sdf_grid",
    "vertex_spread", "read_gaussians_ply", "read_mesh_ply", "read_radiance", "write_gaussians_ply",
    "write_mesh_obj", "write_mesh_ply", "write_radiance",
]
