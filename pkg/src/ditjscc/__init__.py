"""Generative joint source-channel coding with a conditional diffusion transformer.

A toy-scale implementation: a dual-branch transmitter sends a semantic
latent and a pixel-detail latent over a noisy channel, and the receiver
regenerates the image with a diffusion transformer conditioned on both.
Caption complexity can steer how the symbol budget is split between them.
"""
from .channel import ChannelConfig, cbr, transmit
from .checkpoint import CheckpointError
from .corpus import ToyCorpus, make_toy_corpus
from .diffusion import GuidanceConfig, make_schedule, toy_schedule
from .eval import Evaluator, MetricReport
from .kcba import AllocationConfig, allocate, analyze, fit_norm_stats, kc_score
from .system import DiTJSCC, SystemConfig, build_system
from .training import TrainConfig, Trainer, load_system, save_system

__version__ = "0.1.0"

__all__ = [
    "ChannelConfig",
    "cbr",
    "transmit",
    "CheckpointError",
    "ToyCorpus",
    "make_toy_corpus",
    "GuidanceConfig",
    "make_schedule",
    "toy_schedule",
    "Evaluator",
    "MetricReport",
    "AllocationConfig",
    "allocate",
    "analyze",
    "fit_norm_stats",
    "kc_score",
    "DiTJSCC",
    "SystemConfig",
    "build_system",
    "TrainConfig",
    "Trainer",
    "load_system",
    "save_system",
]
