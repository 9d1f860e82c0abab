"""Autoregressive normalizing flows over short multi-channel frame sequences."""

from .data import SyntheticVideoSpec, generate_samples, read_dataset
from .denoiser import DenoiserNet, NoiseSpec
from .jacobi import JacobiPlan, jacobi_decode
from .model import GlobalLocalFlow, ModelConfig
from .sampler import GuidanceSpec, sample_sequential
from .streaming import stream_generate
from .trainer import TrainConfig, TrainState, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "DenoiserNet",
    "GlobalLocalFlow",
    "GuidanceSpec",
    "JacobiPlan",
    "ModelConfig",
    "NoiseSpec",
    "SyntheticVideoSpec",
    "TrainConfig",
    "TrainState",
    "generate_samples",
    "jacobi_decode",
    "load_checkpoint",
    "read_dataset",
    "sample_sequential",
    "save_checkpoint",
    "stream_generate",
    "train",
]
