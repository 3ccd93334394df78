"""Semi-supervised uncertainty-aware transformer dehazing, desk scale."""

from .core import (Checkpoint, CheckpointError, ConfigMismatchError, LossWeights,
                   NetConfig, ShapeError, load_checkpoint, save_checkpoint,
                   seeded_rng, split_seed)
from .network import DehazeNet, ForwardOutput, PatchDiscriminator

__all__ = [
    "Checkpoint", "CheckpointError", "ConfigMismatchError", "LossWeights",
    "NetConfig", "ShapeError", "load_checkpoint", "save_checkpoint",
    "seeded_rng", "split_seed", "DehazeNet", "ForwardOutput", "PatchDiscriminator",
]

__version__ = "0.1.0"
