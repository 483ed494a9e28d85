"""Joint tilt-series deformation estimation and implicit-volume
reconstruction for cryo-ET at desk scale."""

__version__ = "0.1.0"

from .data import TiltSeries, VoxelVolume
from .deform import ControlGrid, DeformParams
from .encoding import EncodingSpec
from .field import NetworkSpec, VolumeParams
from .geometry import DetectorSpec, GridSpec, Ray

__all__ = [
    "TiltSeries",
    "VoxelVolume",
    "ControlGrid",
    "DeformParams",
    "EncodingSpec",
    "NetworkSpec",
    "VolumeParams",
    "DetectorSpec",
    "GridSpec",
    "Ray",
    "__version__",
]
