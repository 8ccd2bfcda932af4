"""Test-time generative augmentation toolkit.

Diffusion sampling and inversion over plain float64 grids, one-step
null-text optimization, masked dual-path generation, and a synthetic
segmentation benchmark with ensemble-entropy error estimation.
"""

from .denoiser import (
    AnalyticGaussianDenoiser,
    ConditionEmbedding,
    ConvDenoiser,
    DenoiserTrainConfig,
    load_checkpoint,
    save_checkpoint,
    train_toy_denoiser,
)
from .engine import (
    AugmentationSet,
    EnsembleResult,
    TtgaConfig,
    ensemble,
    error_estimate_map,
    generate_one,
    generate_set,
)
from .guidance import GuidanceConfig, cfg_multi, cfg_single
from .masks import MaskPair, MaskPolicy, attention_mask, bernoulli_mask, hybrid_mask
from .nulltext import NullOptConfig, OptimizedNull, one_step_reconstruct, optimize_null_text
from .optim import AdamState, adam_step
from .rng import SeededRng
from .sampler import InversionTrajectory, ddim_invert, ddim_step, ddpm_reverse_step, forward_noise
from .schedule import NoiseSchedule, build_schedule, from_xbar, gaussian_grid, to_xbar

__all__ = [
    "AnalyticGaussianDenoiser",
    "AdamState",
    "AugmentationSet",
    "ConditionEmbedding",
    "ConvDenoiser",
    "DenoiserTrainConfig",
    "EnsembleResult",
    "GuidanceConfig",
    "InversionTrajectory",
    "MaskPair",
    "MaskPolicy",
    "NoiseSchedule",
    "NullOptConfig",
    "OptimizedNull",
    "SeededRng",
    "TtgaConfig",
    "adam_step",
    "attention_mask",
    "bernoulli_mask",
    "build_schedule",
    "cfg_multi",
    "cfg_single",
    "ddim_invert",
    "ddim_step",
    "ddpm_reverse_step",
    "ensemble",
    "error_estimate_map",
    "forward_noise",
    "from_xbar",
    "gaussian_grid",
    "generate_one",
    "generate_set",
    "hybrid_mask",
    "load_checkpoint",
    "one_step_reconstruct",
    "optimize_null_text",
    "save_checkpoint",
    "to_xbar",
    "train_toy_denoiser",
]

__version__ = "0.1.0"
