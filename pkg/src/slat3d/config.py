"""Default constants for the structured-latent pipeline.

Every number a workflow depends on lives here so that the CLI manifest can
echo it and the conformance tests can assert it in one place.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

# Grid and latent layout
GRID_RESOLUTION = 64
STRUCTURE_LATENT_RESOLUTION = 16
STRUCTURE_LATENT_CHANNELS = 8
UNET_CHANNELS = (32, 128, 512)
WINDOW_SIZE = 8
WINDOW_SHIFT = (4, 4, 4)
MAX_RESOLUTION = 1024

# Gaussian decoder / splatting
GAUSSIANS_PER_VOXEL = 32
GAUSSIAN_PARAMS = 14
MIN_GAUSSIAN_SCALE = 9e-4
SCREEN_FILTER_VARIANCE = 0.1
TRANSMITTANCE_CUTOFF = 1e-4

# CP radiance field
CP_RANK = 16
CP_SIDE = 8
CP_CHANNELS = 4

# FlexiCubes mesh decoder
MESH_RESOLUTION = 256
FLEXI_WEIGHT_DIMS = 45
INACTIVE_SDF = 1.0

# Rectified flow
CFG_STRENGTH = 3.0
SAMPLING_STEPS = 50
TIMESTEP_MU = 1.0
TIMESTEP_SIGMA = 1.0
COND_DROP_RATE = 0.1
LEARNING_RATE = 1e-4

# Losses
SSIM_WEIGHT = 0.2
LPIPS_WEIGHT = 0.2
DEPTH_HUBER_WEIGHT = 10.0
DEPTH_HUBER_DELTA = 1.0
COLOR_WEIGHT = 0.1
TSDF_WEIGHT = 0.01

# Evaluation protocol
CAMERA_RADIUS = 2.0
CAMERA_FOV_DEG = 40.0
ENCODE_VIEWS = 150
FSCORE_RADIUS = 0.05
FPS_POINTS = 4000
EVAL_VIEWS = 100
EVAL_POINTS = 100_000


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = SAMPLING_STEPS
    strength: float = CFG_STRENGTH
    method: str = "heun"
    resample: int = 1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    iterations: int = 2000
    batch: int = 256
    seed: int = 0
    timestep_mu: float = TIMESTEP_MU
    timestep_sigma: float = TIMESTEP_SIGMA
    cond_drop: float = COND_DROP_RATE
    hidden: tuple[int, ...] = (128, 128, 128)
    time_features: int = 16
    lr_decay: bool = True
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "betas" in known:
            known["betas"] = tuple(known["betas"])
        if "hidden" in known:
            known["hidden"] = tuple(int(h) for h in known["hidden"])
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**known)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["hidden"] = list(self.hidden)
        return d
