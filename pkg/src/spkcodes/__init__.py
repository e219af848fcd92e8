"""Speaker-adaptive feedforward layers driven by low-dimensional scaling and bias codes."""

from .model import (
    ConfigError,
    InjectionMode,
    NetworkConfig,
    Strategy,
    UnknownSpeakerError,
    build_network,
    count_params,
    fold_speaker,
    forward,
    forward_batch,
    load_network,
    register_speaker,
    save_network,
)
from .numeric import Rng
from .synthgen import GenConfig, generate, load_dataset, save_dataset
from .training import AdaptConfig, TrainConfig, adapt_speaker, gradcheck, train_multispeaker

__version__ = "0.1.0"

__all__ = [
    "AdaptConfig", "ConfigError", "GenConfig", "InjectionMode", "NetworkConfig", "Rng",
    "Strategy", "TrainConfig", "UnknownSpeakerError", "adapt_speaker", "build_network",
    "count_params", "fold_speaker", "forward", "forward_batch", "generate", "gradcheck",
    "load_dataset", "load_network", "register_speaker", "save_dataset", "save_network",
    "train_multispeaker",
]
