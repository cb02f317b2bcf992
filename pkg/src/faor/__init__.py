"""Arbitrary-scale super-resolution of equirectangular (360 degree) images."""

__version__ = "0.1.0"

from .geometry import ErpGrid, PatchGrid, SphericalCoord, distortion_map  # noqa: E402
from .model import FAOR, ModelConfig, PriorMaps  # noqa: E402
from .resampling import resample  # noqa: E402

__all__ = [
    "__version__",
    "ErpGrid",
    "PatchGrid",
    "SphericalCoord",
    "distortion_map",
    "FAOR",
    "ModelConfig",
    "PriorMaps",
    "resample",
]
