"""Rectified flow: forward process, CFM loss, samplers, Repaint editing and toy models."""

from .analytic import ConstantField, GaussianField, GaussianMixtureField
from .core import (
    FlowState,
    NumericalError,
    cfg_velocity,
    cfm_loss,
    interpolate,
    ode_sample,
    repaint_sample,
    sample_timestep,
)
from .mlp import AdamW, DivergenceError, TinyMLP, train_toy_flow, two_moons
from .pipeline import EmptyStructureError, StructureDecoder, two_stage_generate

__all__ = [
    "AdamW",
    "ConstantField",
    "DivergenceError",
    "EmptyStructureError",
    "FlowState",
    "GaussianField",
    "GaussianMixtureField",
    "NumericalError",
    "StructureDecoder",
    "TinyMLP",
    "cfg_velocity",
    "cfm_loss",
    "interpolate",
    "ode_sample",
    "repaint_sample",
    "sample_timestep",
    "train_toy_flow",
    "two_moons",
    "two_stage_generate",
]
