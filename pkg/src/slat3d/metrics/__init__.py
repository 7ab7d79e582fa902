from .gradcheck import GradcheckError, fd_gradcheck
from .losses import (LossBreakdown, dual_deviation, gs_regularizer, huber, huber_loss, huber_loss_grad, loss_gs,
                     loss_mesh, mesh_distance, no_perceptual, opacity_loss, point_triangle_distance, recon_loss,
                     tsdf_loss, volume_loss)
from .pointcloud import (EmptyCloudError, FPSResult, SurfaceSample, chamfer, farthest_point_sample, fscore, nearest,
                         surface_point_cloud)

__all__ = [
    "GradcheckError", "fd_gradcheck", "LossBreakdown", "dual_deviation", "gs_regularizer", "huber", "huber_loss",
    "huber_loss_grad", "loss_gs", "loss_mesh", "mesh_distance", "no_perceptual", "opacity_loss",
    "point_triangle_distance", "recon_loss", "tsdf_loss", "volume_loss", "EmptyCloudError", "FPSResult",
    "SurfaceSample", "chamfer", "farthest_point_sample", "fscore", "nearest", "surface_point_cloud",
]
