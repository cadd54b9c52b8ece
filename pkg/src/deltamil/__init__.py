"""Gated delta-rule memory with locality-aware mixing for multiple-instance learning on patch bags."""

from .config import ModelConfig, OptimConfig, RunConfig, SynthConfig
from .model import MILModel, PatchBag

__all__ = ["ModelConfig", "OptimConfig", "RunConfig", "SynthConfig", "MILModel", "PatchBag"]
__version__ = "0.1.0"
