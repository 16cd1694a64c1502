"""Permuted self-attention super-resolution toolkit."""
from .attention import PSA, Standard, TokenReduction, TokenSampling
from .model import ModelConfig, build_model, model_forward, preset

__all__ = ["PSA", "Standard", "TokenReduction", "TokenSampling", "ModelConfig",
           "build_model", "model_forward", "preset"]
__version__ = "0.1.0"
