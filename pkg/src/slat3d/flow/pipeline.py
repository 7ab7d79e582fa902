"""Two-stage generation: dense structure latent -> occupancy -> latents on the active voxels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..config import SamplerConfig
from ..nn.unet3d import UNetConfig, unet_decode
from ..sparse import SparseGrid, from_dense
from .core import ode_sample, repaint_sample


class EmptyStructureError(ValueError):
    """Stage 1 decoded to an occupancy grid with no active voxel."""


@dataclass
class StructureDecoder:
    """Conv U-Net decoder half: structure latent (n^3 x C) -> occupancy logits."""

    params: dict
    cfg: UNetConfig

    def __call__(self, latent):
        return unet_decode(latent, self.params, self.cfg)


@dataclass(frozen=True)
class GenerationResult:
    slat: SparseGrid
    structure_latent: np.ndarray
    logits: np.ndarray


def occupancy_from_logits(logits) -> SparseGrid:
    occ = np.asarray(logits) > 0.0
    if not occ.any():
        raise EmptyStructureError("stage 1 produced no active voxels (all logits <= 0)")
    return from_dense(occ)


def stage_seeds(seed: int):
    """Independent generators for the two stages derived from one seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2)]


def _sample(model, x_init, cond, sampler: SamplerConfig, ctx=None):
    return ode_sample(model, x_init, sampler.steps, cond, sampler.strength, sampler.method, ctx)


def two_stage_generate(
    structure_model,
    structure_decoder,
    latent_model,
    latent_channels: int,
    latent_shape=(16, 16, 16, 8),
    cond=None,
    sampler: SamplerConfig = SamplerConfig(),
    seed: int = 0,
) -> GenerationResult:
    """Sample a structure, decode and threshold it, then sample latents on it.

    Guidance (when ``cond`` is given) is applied in both stages.
    """
    rng1, rng2 = stage_seeds(seed)
    s = _sample(structure_model, rng1.standard_normal(latent_shape), cond, sampler)
    logits = structure_decoder(s)
    structure = occupancy_from_logits(logits)
    noise = rng2.standard_normal((structure.num_active, latent_channels))
    lat = _sample(latent_model, noise, cond, sampler, {"structure": structure})
    return GenerationResult(structure.with_features(lat), s, logits)


def resample_latents(latent_model, slat: SparseGrid, cond=None, sampler: SamplerConfig = SamplerConfig(),
                     seed: int = 0, mask=None) -> SparseGrid:
    """Stage 2 only, on a fixed structure. ``mask`` (per voxel) limits regeneration to a region."""
    rng = np.random.default_rng(seed)
    ctx = {"structure": slat}
    if mask is None:
        out = _sample(latent_model, rng.standard_normal(slat.features.shape), cond, sampler, ctx)
        return slat.with_features(out)
    m = np.broadcast_to(np.asarray(mask, bool)[:, None], slat.features.shape)
    out = repaint_sample(latent_model, slat.features, m, sampler.steps, sampler.resample, cond,
                         sampler.strength, sampler.method, rng, ctx)
    return slat.with_features(out)
