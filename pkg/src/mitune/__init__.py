"""Point-wise mutual information scoring and MI-filtered self fine-tuning
for conditional diffusion models, at toy scale with closed-form oracles."""

from .adapter import AdaptedDenoiser, LowRankAdapter, finetune_adapters, inject
from .denoiser import MlpDenoiser, OracleDenoiser, TrainConfig, train
from .gaussian_world import NULL, GaussianWorld, closed_form_mi, ring_means, sample_joint
from .metrics import agreement_study, kendall_tau
from .mi_estimator import MiEstimate, pointwise_mi_forward, pointwise_mi_generate
from .pipeline import PipelineConfig, alignment_score, build_set, run_mitune, run_round
from .sampler import SamplerConfig, ddpm_step, generate, guided_eps
from .schedule import NoiseSchedule, build_schedule

__version__ = "0.1.0"

__all__ = [
    "AdaptedDenoiser", "GaussianWorld", "LowRankAdapter", "MiEstimate", "MlpDenoiser", "NULL",
    "NoiseSchedule", "OracleDenoiser", "PipelineConfig", "SamplerConfig", "TrainConfig",
    "agreement_study", "alignment_score", "build_schedule", "build_set", "closed_form_mi",
    "ddpm_step", "finetune_adapters", "generate", "guided_eps", "inject", "kendall_tau",
    "pointwise_mi_forward", "pointwise_mi_generate", "ring_means", "run_mitune", "run_round",
    "sample_joint", "train",
]
