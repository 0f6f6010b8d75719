"""Landmark detection on 3D volumes: augmentation that carries landmarks along,
heatmap regression with a mixed loss, and Grad-CAM inspection."""

__version__ = "0.1.0"

from .core import LandmarkSet, Volume3, read_landmarks, read_volume, write_landmarks, write_volume
from .errors import DataError, Lmk3dError, NumericError

__all__ = [
    "LandmarkSet",
    "Volume3",
    "read_landmarks",
    "read_volume",
    "write_landmarks",
    "write_volume",
    "DataError",
    "Lmk3dError",
    "NumericError",
]
