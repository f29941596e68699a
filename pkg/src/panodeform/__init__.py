"""Desk-scale panoramic segmentation with deformable embeddings and
prototype-based pinhole-to-panorama adaptation."""

from .tensor import Tensor, NumericError, ShapeError
from .model import ModelConfig, SegNet
from .prototypes import AdaptConfig, PrototypeBank
from .scenes import SceneSpec, LabeledScene
from .train import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "NumericError",
    "ShapeError",
    "ModelConfig",
    "SegNet",
    "AdaptConfig",
    "PrototypeBank",
    "SceneSpec",
    "LabeledScene",
    "TrainConfig",
    "__version__",
]
