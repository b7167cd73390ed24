"""Desk-scale latent-diffusion data expansion for surface-defect recognition.

Pipeline: adapt a small text-conditioned latent diffusion model to a scarce
image class (token-embedding optimization, then low-rank adaptation of the
attention layers), generate new samples from partially noised real images
with classifier-free guidance, score quality with a Frechet distance, tune
(guidance scale, strength) by grid search, and measure the downstream benefit
on a defect-recognition classifier.
"""

from .adaptation import (
    AdaptationConfig,
    LoraAdapter,
    attach_lora,
    merge_lora,
    train_full_parameter,
    train_lora,
    train_token_embedding,
    unmerge_lora,
)
from .data import DatasetManifest, ManifestEntry, ingest, synth_corpus
from .metrics import GaussianStats, extract_features, fid, gaussian_stats
from .nets import GeneratorModel, ModelConfig, PromptEmbedding, diffusion_loss
from .sampling import (
    GenerationConfig,
    generate_dataset,
    generate_from_noise,
    guided_noise,
    image_oriented_generate,
)
from .schedule import NoiseSchedule, ddim_step, diffuse, make_schedule, strength_to_timestep
from .tuning import grid_search, record_best, select_best

__all__ = [
    "AdaptationConfig",
    "DatasetManifest",
    "GaussianStats",
    "GenerationConfig",
    "GeneratorModel",
    "LoraAdapter",
    "ManifestEntry",
    "ModelConfig",
    "NoiseSchedule",
    "PromptEmbedding",
    "attach_lora",
    "ddim_step",
    "diffuse",
    "diffusion_loss",
    "extract_features",
    "fid",
    "gaussian_stats",
    "generate_dataset",
    "generate_from_noise",
    "grid_search",
    "guided_noise",
    "image_oriented_generate",
    "ingest",
    "make_schedule",
    "merge_lora",
    "record_best",
    "select_best",
    "strength_to_timestep",
    "synth_corpus",
    "train_full_parameter",
    "train_lora",
    "train_token_embedding",
    "unmerge_lora",
]

__version__ = "0.1.0"
