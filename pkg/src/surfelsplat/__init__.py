"""Differentiable Gaussian-surfel splatting with staged two-view bundle adjustment."""

from .backward import GradientBuffers, StaleRenderError, backward
from .bundle import (
    BAResult,
    BAState,
    NonFiniteGradientError,
    Observations,
    OptimizationSchedule,
    Stage,
    init_intrinsics,
    perturb_pose,
    pose_error,
    run_algorithm1,
    run_stage,
)
from .camera import CameraIntrinsics, CameraPose, se3_exp, se3_log
from .losses import LossWeights, geometric_objective, photometric_loss, warp_depth
from .metrics import psnr, ssim
from .raster import RasterConfig, RenderOutput, render
from .surfel import GaussianSurfel, SurfelScene
from .synthetic import SyntheticSceneSpec, generate_synthetic, init_surfels_from_depth

__version__ = "0.1.0"

__all__ = [
    "BAResult", "BAState", "CameraIntrinsics", "CameraPose", "GaussianSurfel",
    "GradientBuffers", "LossWeights", "NonFiniteGradientError", "Observations",
    "OptimizationSchedule", "RasterConfig", "RenderOutput", "Stage", "StaleRenderError",
    "SurfelScene", "SyntheticSceneSpec", "backward", "generate_synthetic",
    "geometric_objective", "init_intrinsics", "init_surfels_from_depth", "perturb_pose",
    "photometric_loss", "pose_error", "psnr", "render", "run_algorithm1", "run_stage", "se3_exp",
    "se3_log", "ssim", "warp_depth",
]
