"""Byte-level toy language model with pluggable attention patterns."""
from .checkpoint import load_checkpoint, save_checkpoint
from .model import ModelConfig, ToyLM, forward, rope_angles, rope_apply
from .train import AdamW, PplReport, TrainState, TrainingError, eval_perplexity, train

__all__ = [
    "AdamW",
    "ModelConfig",
    "PplReport",
    "ToyLM",
    "TrainState",
    "TrainingError",
    "eval_perplexity",
    "forward",
    "load_checkpoint",
    "rope_angles",
    "rope_apply",
    "save_checkpoint",
    "train",
]
