"""Neural building blocks: attention, adaLN blocks, the dense conv VAE and transformer stacks."""

from .attention import (
    AttentionWeights,
    CrossAttentionWeights,
    WindowConfig,
    cross_attention,
    self_attention,
    window_partition,
    windowed_mhsa,
)
from .blocks import AdaLNBlockWeights, ModulationParams, adaln_block, swin_block
from .layers import qk_rmsnorm, sinusoidal_pe
from .unet3d import UNetConfig, conv_unet3d_forward, init_unet, kl_penalty, kl_penalty_grad, pixel_shuffle3d, unet_decode, unet_encode

__all__ = [
    "AdaLNBlockWeights",
    "AttentionWeights",
    "CrossAttentionWeights",
    "ModulationParams",
    "UNetConfig",
    "WindowConfig",
    "adaln_block",
    "conv_unet3d_forward",
    "cross_attention",
    "init_unet",
    "kl_penalty",
    "kl_penalty_grad",
    "pixel_shuffle3d",
    "qk_rmsnorm",
    "self_attention",
    "sinusoidal_pe",
    "swin_block",
    "unet_decode",
    "unet_encode",
    "window_partition",
    "windowed_mhsa",
]
