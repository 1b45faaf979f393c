"""Cosine-drift regularized fine-tuning of a toy text-to-image diffusion model.

The pieces are usable on their own: a small reverse-mode autodiff engine
(``autodiff``), a bag-of-tokens text encoder (``textenc``), a pixel-space DDPM
(``diffusion``), the drift regularizer and baselines (``coffee``), the
synthetic shape benchmark (``datagen``) and the frozen-feature metrics
(``evaluation``). ``harness`` ties them into reproducible experiments.
"""
from .coffee import METHODS, CoffeeConfig, drift, finetune, reg_loss, total_loss
from .datagen import ATTRIBUTES, BASES, build_finetune_set, build_pretrain_corpus, render
from .diffusion import DenoiserNet, PretrainConfig, SamplerConfig, ddpm_sample, make_schedule, pretrain
from .evaluation import FeatureExtractor, ffd, is_analog, mcs_analog, presence_rate, train_feature_extractor
from .harness import ExperimentConfig, load_assets, run_experiment, run_lambda_sweep, run_protocol_comparison
from .textenc import EmbeddingTable, Vocabulary, encode, snapshot_refs

__version__ = "0.1.0"

__all__ = [
    "ATTRIBUTES", "BASES", "METHODS", "CoffeeConfig", "DenoiserNet", "EmbeddingTable", "ExperimentConfig",
    "FeatureExtractor", "PretrainConfig", "SamplerConfig", "Vocabulary", "build_finetune_set",
    "build_pretrain_corpus", "ddpm_sample", "drift", "encode", "ffd", "finetune", "is_analog", "load_assets",
    "make_schedule", "mcs_analog", "presence_rate", "pretrain", "reg_loss", "render", "run_experiment",
    "run_lambda_sweep", "run_protocol_comparison", "snapshot_refs", "total_loss", "train_feature_extractor",
]
