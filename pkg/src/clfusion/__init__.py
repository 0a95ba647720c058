"""Contrastive latent diffusion prior: conditioning embeddings to view-invariant latents."""

from .data import CondEmbedding, LatentViewDataset, generate_dataset, pseudo_text_augment, synth_world
from .estimator import ContrastiveLatentPrior, PseudoTextAugmenter
from .evaluation import ablation_suite, clip_score, recovery_score, view_invariance_score
from .losses import LossReport, LossWeights, total_loss
from .network import PriorConfig, PriorNetwork, apply_cfg
from .sampler import sample, sample_batch
from .schedule import NoiseSchedule, build_schedule
from .trainer import TrainConfig, Trainer, load_network

__version__ = "0.1.0"

__all__ = [
    "CondEmbedding",
    "ContrastiveLatentPrior",
    "LatentViewDataset",
    "LossReport",
    "LossWeights",
    "NoiseSchedule",
    "PriorConfig",
    "PriorNetwork",
    "PseudoTextAugmenter",
    "TrainConfig",
    "Trainer",
    "ablation_suite",
    "apply_cfg",
    "build_schedule",
    "clip_score",
    "generate_dataset",
    "load_network",
    "pseudo_text_augment",
    "recovery_score",
    "sample",
    "sample_batch",
    "synth_world",
    "total_loss",
    "view_invariance_score",
]
