"""Surprisal-routed test-time training with a residual cache, at desk scale."""

from .cache import CacheEntry, ResidualCache
from .config import ConfigError, ModelConfig, RunConfig, TrainConfig, desk_preset, load_config, paper_preset
from .model import CACHE_DISABLED, CACHE_ENABLED, SRTTTModel

__all__ = [
    "CACHE_DISABLED",
    "CACHE_ENABLED",
    "CacheEntry",
    "ConfigError",
    "ModelConfig",
    "ResidualCache",
    "RunConfig",
    "SRTTTModel",
    "TrainConfig",
    "desk_preset",
    "load_config",
    "paper_preset",
]
__version__ = "0.1.0"
