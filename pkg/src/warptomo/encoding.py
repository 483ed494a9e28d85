"""Multi-resolution hash-grid positional encoding.

Each level l carries a lattice of resolution R_l cells per axis over the
normalized cube; a query point is encoded per level by trilinear
interpolation of the feature rows stored at the 8 enclosing lattice
vertices, and the per-level features are concatenated. Levels whose
vertex count fits in the table are indexed directly (injective); finer
levels fold vertices through a spatial hash (XOR of coordinates times
large primes, masked into the power-of-two table).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels


@dataclass(frozen=True)
class EncodingSpec:
    """Geometry of the multi-resolution feature tables."""

    levels: int = 8
    features: int = 2
    table_size: int = 2**16
    n_min: int = 8
    n_max: int = 32

    def __post_init__(self):
        if self.levels < 1 or self.features < 1:
            raise ValueError("levels and features must be >= 1")
        if self.table_size < 8 or self.table_size & (self.table_size - 1):
            raise ValueError("table_size must be a power of two")
        if not (1 <= self.n_min <= self.n_max):
            raise ValueError("need 1 <= n_min <= n_max")

    @property
    def out_dim(self) -> int:
        return self.levels * self.features

    def level_resolutions(self) -> np.ndarray:
        """Cells per axis for each level, geometric from n_min to n_max."""
        if self.levels == 1:
            return np.array([self.n_min], dtype=np.int64)
        growth = (self.n_max / self.n_min) ** (1.0 / (self.levels - 1))
        res = np.floor(self.n_min * growth ** np.arange(self.levels)).astype(np.int64)
        return np.maximum.accumulate(res)

    def level_rows(self) -> np.ndarray:
        """Feature rows per level: vertex count, capped at table_size."""
        verts = (self.level_resolutions() + 1) ** 3
        return np.minimum(verts, self.table_size)

    def level_hashed(self) -> np.ndarray:
        """True where the vertex lattice overflows the table (hash indexing)."""
        verts = (self.level_resolutions() + 1) ** 3
        return (verts > self.table_size).astype(np.uint8)

    def level_offsets(self) -> np.ndarray:
        """Row offset of each level in the flat table; last entry = total rows."""
        return np.concatenate([[0], np.cumsum(self.level_rows())]).astype(np.int64)

    @property
    def total_rows(self) -> int:
        return int(self.level_offsets()[-1])


def _pack(spec: EncodingSpec):
    return (
        spec.level_offsets(),
        spec.level_resolutions(),
        spec.level_hashed(),
        spec.table_size,
    )


def encode(points: np.ndarray, table: np.ndarray, spec: EncodingSpec,
           workers: int = 1) -> np.ndarray:
    """Encode (n, 3) points into (n, levels * features) features."""
    points = np.ascontiguousarray(points, dtype=table.dtype)
    out = np.zeros((points.shape[0], spec.out_dim), dtype=table.dtype)
    offsets, res, hashed, tsize = _pack(spec)
    kernels.encode_forward(points, table, offsets, res, hashed, tsize, out, workers)
    return out


def encode_backward(points: np.ndarray, d_feats: np.ndarray, table: np.ndarray,
                    spec: EncodingSpec, need_input_grad: bool = False,
                    workers: int = 1):
    """Backpropagate feature gradients to table rows and, optionally, inputs.

    Returns (d_table, d_points); ``d_points`` is None unless requested.
    Scatter accumulation is merged in fixed order, so results are
    deterministic for a fixed worker count.
    """
    points = np.ascontiguousarray(points, dtype=table.dtype)
    d_feats = np.ascontiguousarray(d_feats, dtype=table.dtype)
    d_table = np.zeros_like(table)
    d_points = np.zeros_like(points) if need_input_grad else None
    offsets, res, hashed, tsize = _pack(spec)
    kernels.encode_backward(points, d_feats, table, offsets, res, hashed, tsize,
                            d_table, d_points, workers)
    return d_table, d_points
