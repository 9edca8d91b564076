"""Differentiable Gaussian splatting with explicit camera- and object-motion blur models."""

from .errors import ConfigError, DataError, NumericError, StateError
from .lie import Pose
from .scene import Camera, Gaussians

__all__ = ["Camera", "ConfigError", "DataError", "Gaussians", "NumericError", "Pose", "StateError"]
__version__ = "0.1.0"
