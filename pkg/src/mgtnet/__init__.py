"""2D-to-3D human pose lifting with multi-hop graph convolutions and attention."""

from .linalg import Tape, Tensor
from .model import MgtNet, ModelConfig
from .skeleton import SkeletonGraph, human36m_skeleton
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "Tape",
    "MgtNet",
    "ModelConfig",
    "SkeletonGraph",
    "human36m_skeleton",
    "TrainConfig",
    "train",
    "__version__",
]
