"""Structured sparse-voxel latents: encoding blocks, rectified-flow generation,
decoders to Gaussians / radiance fields / meshes, renderers and metrics."""

__version__ = "0.1.0"
