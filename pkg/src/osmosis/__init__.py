"""Underwater image restoration with an RGBD diffusion prior.

A single underwater photograph is restored by sampling a joint color+depth
diffusion prior under guidance from the physical water formation model,
while the scene's water parameters are fitted alongside the sample.
"""

__version__ = "0.1.0"

from .diffusion import (
    NoiseSchedule,
    RGBDImage,
    ddpm_step,
    make_schedule,
    posterior_mean,
    predict_x0,
    q_sample,
    sample_unconditional,
    train_step,
)
from .denoiser import GaussianOracleDenoiser, ToyUNet, ToyUNetConfig
from .formation import DepthScaling, WaterParams, apply_formation, formation_jacobian, scale_depth
from .guidance import (
    GuidanceConfig,
    RestorationResult,
    ablation_preset,
    compute_losses,
    forward_model,
    guided_step,
    optimize_phi,
    restore,
)

__all__ = [
    "__version__",
    "NoiseSchedule",
    "RGBDImage",
    "ddpm_step",
    "make_schedule",
    "posterior_mean",
    "predict_x0",
    "q_sample",
    "sample_unconditional",
    "train_step",
    "GaussianOracleDenoiser",
    "ToyUNet",
    "ToyUNetConfig",
    "DepthScaling",
    "WaterParams",
    "apply_formation",
    "formation_jacobian",
    "scale_depth",
    "GuidanceConfig",
    "RestorationResult",
    "ablation_preset",
    "compute_losses",
    "forward_model",
    "guided_step",
    "optimize_phi",
    "restore",
]
