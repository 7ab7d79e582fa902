from .image import RenderedImage, gaussian_window, image_l1, image_psnr, image_ssim
from .raster import rasterize_mesh
from .raymarch import DEFAULT_STEP, ray_box, raymarch_field
from .splat import depth_order, project_gaussians, splat_gaussians

__all__ = [
    "RenderedImage", "gaussian_window", "image_l1", "image_psnr", "image_ssim", "rasterize_mesh",
    "DEFAULT_STEP", "ray_box", "raymarch_field", "depth_order", "project_gaussians", "splat_gaussians",
]
