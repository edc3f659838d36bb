"""Off-policy evaluation via guided window diffusion, with classical baselines."""

__version__ = "0.1.0"

from .rng import RngStream, gaussian
from .nn import Adam, Mlp, sinusoidal_embedding
from .data import NormStats, Trajectory, WindowBatch, slice_windows
from .diffusion import (
    DenoiserModel,
    GaussianMixture1D,
    GuidanceSpec,
    NoiseSchedule,
    exact_score_sample,
    forward_noise,
    denoise_mean,
    guidance,
    guided_sample,
    make_schedule,
    train_denoiser,
)
from .estimator import (
    EvalReport,
    RewardModel,
    StitchConfig,
    evaluate_policies,
    stitch_rollout_batch,
    train_reward,
)
from .errors import ConfigError, NumericalAbortError

__all__ = [
    "Adam",
    "ConfigError",
    "DenoiserModel",
    "EvalReport",
    "GaussianMixture1D",
    "GuidanceSpec",
    "Mlp",
    "NoiseSchedule",
    "NormStats",
    "NumericalAbortError",
    "RewardModel",
    "RngStream",
    "StitchConfig",
    "Trajectory",
    "WindowBatch",
    "denoise_mean",
    "evaluate_policies",
    "exact_score_sample",
    "forward_noise",
    "gaussian",
    "guidance",
    "guided_sample",
    "make_schedule",
    "sinusoidal_embedding",
    "slice_windows",
    "stitch_rollout_batch",
    "train_denoiser",
    "train_reward",
]
