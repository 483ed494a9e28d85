"""Core data carriers: dense voxel volumes and tilt-series stacks.

All geometry in this package works in normalized coordinates: the full
volume maps to the cube [-1, 1]^3 (per axis) and the detector plane to
[-1, 1]^2, both centered. Physical scale enters only through
``voxel_size`` (nm per voxel) when files or frequencies are involved.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class VoxelVolume:
    """Dense 3-D grid of density samples.

    ``data[i, j, k]`` is the density at the center of voxel (i, j, k);
    axis order matches the normalized coordinate axes (x1, x2, x3).
    """

    data: np.ndarray
    voxel_size: float = 1.0

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"volume must be 3-D, got shape {self.data.shape}")
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")

    @property
    def shape(self):
        return self.data.shape


@dataclass
class TiltSeries:
    """Stack of M square projection images with per-image tilt angles.

    ``images[m, i, j]``: image m, first index along detector axis 1 (the
    tilt-varying axis), second along detector axis 2 (the tilt axis).
    """

    images: np.ndarray
    angles_deg: np.ndarray
    voxel_size: float = 1.0
    dose_weights: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.angles_deg = np.asarray(self.angles_deg, dtype=float)
        if self.images.ndim != 3:
            raise ValueError(f"tilt series must be (M, N, N), got {self.images.shape}")
        if self.images.shape[1] != self.images.shape[2]:
            raise ValueError("projections must be square")
        if len(self.angles_deg) != self.images.shape[0]:
            raise ValueError(
                f"{self.images.shape[0]} images but {len(self.angles_deg)} angles"
            )

    @property
    def n_projections(self) -> int:
        return self.images.shape[0]

    @property
    def image_size(self) -> int:
        return self.images.shape[1]

    @property
    def angles_rad(self) -> np.ndarray:
        return np.deg2rad(self.angles_deg)
