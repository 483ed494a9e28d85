"""Per-projection 2-D deformations: shift, in-plane rotation, local field.

A deformation gamma = (tau, alpha, control grid C) acts on a continuous
image u as a coordinate warp: the deformed image at x is u(m(x)) with

    m(x) = R_alpha (x + phi(C)(x)) - tau,

where phi(C) interpolates the control-point displacements (bilinear or
Catmull-Rom bicubic). All coordinates are normalized detector units in
[-1, 1]^2; pixel-unit amplitudes convert by a factor 2/N.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InverseMapError

_TWO_PI = 2.0 * np.pi


@dataclass
class ControlGrid:
    """Lattice of 2-D displacement vectors spanning [-1, 1]^2."""

    displacements: np.ndarray  # (n1, n2, 2)
    interpolation: str = "bilinear"

    def __post_init__(self):
        self.displacements = np.asarray(self.displacements, dtype=float)
        if self.displacements.ndim != 3 or self.displacements.shape[2] != 2:
            raise ValueError(f"displacements must be (n1, n2, 2), got {self.displacements.shape}")
        if min(self.displacements.shape[:2]) < 2:
            raise ValueError("control grid needs at least 2 points per axis")
        if self.interpolation not in ("bilinear", "bicubic"):
            raise ValueError(f"unknown interpolation {self.interpolation!r}")
        if not np.all(np.isfinite(self.displacements)):
            raise ValueError("control displacements must be finite")

    @property
    def shape(self):
        return self.displacements.shape[:2]

    @classmethod
    def zeros(cls, n1: int, n2: int, interpolation: str = "bilinear") -> "ControlGrid":
        return cls(np.zeros((n1, n2, 2)), interpolation)


@dataclass
class DeformParams:
    """Parameters of one projection's deformation."""

    tau: np.ndarray = field(default_factory=lambda: np.zeros(2))
    alpha: float = 0.0
    grid: ControlGrid = field(default_factory=lambda: ControlGrid.zeros(2, 2))

    def __post_init__(self):
        self.tau = np.asarray(self.tau, dtype=float)
        if self.tau.shape != (2,):
            raise ValueError("tau must be a 2-vector")
        self.alpha = float(self.alpha) % _TWO_PI

    @classmethod
    def identity(cls, n1: int = 2, n2: int = 2, interpolation: str = "bilinear") -> "DeformParams":
        return cls(np.zeros(2), 0.0, ControlGrid.zeros(n1, n2, interpolation))


def rot2(alpha: float) -> np.ndarray:
    c, s = np.cos(alpha), np.sin(alpha)
    return np.array([[c, -s], [s, c]])


def _axis_basis_linear(x, n):
    """Per-axis interpolation stencil on nodes linspace(-1, 1, n)."""
    g = (np.clip(x, -1.0, 1.0) + 1.0) * ((n - 1) / 2.0)
    i0 = np.clip(np.floor(g).astype(np.int64), 0, n - 2)
    f = g - i0
    idx = np.stack([i0, i0 + 1], axis=-1)
    wts = np.stack([1.0 - f, f], axis=-1)
    return idx, wts


def _axis_basis_cubic(x, n):
    """Catmull-Rom stencil with edge clamping on nodes linspace(-1, 1, n)."""
    g = (np.clip(x, -1.0, 1.0) + 1.0) * ((n - 1) / 2.0)
    i0 = np.clip(np.floor(g).astype(np.int64), 0, n - 2)
    f = g - i0
    idx = np.stack([np.clip(i0 + k, 0, n - 1) for k in (-1, 0, 1, 2)], axis=-1)
    f2, f3 = f * f, f * f * f
    wts = 0.5 * np.stack(
        [
            -f3 + 2.0 * f2 - f,
            3.0 * f3 - 5.0 * f2 + 2.0,
            -3.0 * f3 + 4.0 * f2 + f,
            f3 - f2,
        ],
        axis=-1,
    )
    return idx, wts


def displacement_basis(grid: ControlGrid, pts: np.ndarray):
    """Interpolation stencil of each point against the control lattice.

    Returns (indices, weights) of shape (n, K) with K = 4 (bilinear) or
    16 (bicubic); indices are into the row-major flattened lattice, and
    phi(pts) = sum_k weights[:, k] * C_flat[indices[:, k]].
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    n1, n2 = grid.shape
    basis = _axis_basis_linear if grid.interpolation == "bilinear" else _axis_basis_cubic
    idx1, w1 = basis(pts[:, 0], n1)
    idx2, w2 = basis(pts[:, 1], n2)
    idx = (idx1[:, :, None] * n2 + idx2[:, None, :]).reshape(pts.shape[0], -1)
    wts = (w1[:, :, None] * w2[:, None, :]).reshape(pts.shape[0], -1)
    return idx, wts


def displacement_at_batch(grid: ControlGrid, pts: np.ndarray) -> np.ndarray:
    """Interpolated displacement field at (n, 2) points (clamped to the domain)."""
    idx, wts = displacement_basis(grid, pts)
    flat = grid.displacements.reshape(-1, 2)
    return np.einsum("nk,nkc->nc", wts, flat[idx])


def displacement_at(grid: ControlGrid, x) -> np.ndarray:
    """Displacement at a single point."""
    return displacement_at_batch(grid, np.asarray(x, dtype=float)[None, :])[0]


def forward_map_batch(gamma: DeformParams, x: np.ndarray) -> np.ndarray:
    """m(x) = R_alpha (x + phi(x)) - tau for an (n, 2) batch."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    shifted = x + displacement_at_batch(gamma.grid, x)
    return shifted @ rot2(gamma.alpha).T - gamma.tau


def forward_map(gamma: DeformParams, x) -> np.ndarray:
    return forward_map_batch(gamma, np.asarray(x, dtype=float)[None, :])[0]


def inverse_map_batch(gamma: DeformParams, z: np.ndarray, tol: float = 1e-6,
                      max_iter: int = 50) -> np.ndarray:
    """Solve forward_map(gamma, x) = z by fixed-point iteration.

    Converges for deformations close to the identity (the local field
    is a contraction). Raises :class:`InverseMapError` otherwise.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    z = np.atleast_2d(np.asarray(z, dtype=float))
    base = (z + gamma.tau) @ rot2(gamma.alpha)  # R_alpha^T (z + tau)
    x = base.copy()
    for _ in range(max_iter):
        x = base - displacement_at_batch(gamma.grid, x)
        residual = np.linalg.norm(forward_map_batch(gamma, x) - z, axis=1)
        if residual.max() <= tol:
            return x
    raise InverseMapError(float(residual.max()), x, max_iter)


def inverse_map(gamma: DeformParams, z, tol: float = 1e-6, max_iter: int = 50) -> np.ndarray:
    return inverse_map_batch(gamma, np.asarray(z, dtype=float)[None, :], tol, max_iter)[0]


def bilinear_image_sample(image: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Sample an N x N image at normalized coordinates (n, 2); zero outside.

    Coordinates within 1e-9 of a pixel-center lattice point snap to it,
    so lattice-aligned warps reproduce pixel values exactly.
    """
    image = np.asarray(image)
    n = image.shape[0]
    g = (np.asarray(coords, dtype=float) + 1.0) * (n / 2.0) - 0.5
    g = np.where(np.abs(g - np.round(g)) < 1e-9, np.round(g), g)
    i0 = np.floor(g).astype(np.int64)
    f = g - i0

    out = np.zeros(g.shape[0], dtype=image.dtype)
    for corner in range(4):
        hi = np.array([(corner >> 1) & 1, corner & 1])
        idx = i0 + hi
        ok = np.all((idx >= 0) & (idx < n), axis=1)
        w = np.prod(np.where(hi, f, 1.0 - f), axis=1)
        idx_c = np.clip(idx, 0, n - 1)
        out = out + np.where(ok, w, 0.0) * image[idx_c[:, 0], idx_c[:, 1]]
    return out


def resample_image(image: np.ndarray, gamma: DeformParams, mode: str = "apply",
                   tol: float = 1e-6, max_iter: int = 50) -> np.ndarray:
    """Resample an image under a deformation.

    ``apply`` realizes the deformation operator (output pixel x reads
    the input at m(x)); ``undo`` aligns a deformed image back (reads at
    the numerically inverted coordinate).
    """
    image = np.asarray(image, dtype=float)
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise ValueError("image must be square 2-D")
    n = image.shape[0]
    centers = -1.0 + (np.arange(n) + 0.5) * (2.0 / n)
    u, v = np.meshgrid(centers, centers, indexing="ij")
    pts = np.stack([u.ravel(), v.ravel()], axis=1)
    if mode == "apply":
        mapped = forward_map_batch(gamma, pts)
    elif mode == "undo":
        mapped = inverse_map_batch(gamma, pts, tol=tol, max_iter=max_iter)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return bilinear_image_sample(image, mapped).reshape(n, n)


def _mesh_points(mesh_p: int) -> np.ndarray:
    if mesh_p < 2:
        raise ValueError("mesh_p must be >= 2")
    axis = np.linspace(-1.0, 1.0, mesh_p)
    u, v = np.meshgrid(axis, axis, indexing="ij")
    return np.stack([u.ravel(), v.ravel()], axis=1)


def deformation_norm(grid: ControlGrid, mesh_p: int = 10) -> float:
    """Root of the summed squared field over a uniform mesh_p^2 mesh."""
    phi = displacement_at_batch(grid, _mesh_points(mesh_p))
    return float(np.sqrt(np.sum(phi * phi)))


def wrapped_angle_penalty(alpha: float) -> float:
    """Distance of an angle from the identity rotation, min(a, 2*pi - a)."""
    a = float(alpha) % _TWO_PI
    return min(a, _TWO_PI - a)


def regularizer(gamma: DeformParams, lambdas=(1e-4, 1e-4, 1e-4), mesh_p: int = 10) -> float:
    """Size penalty on the deformation parameters.

    lambda1 * min(|alpha|, |2*pi - alpha|) + lambda2 * ||tau||_2
    + lambda3 * ||interpolated field over the mesh||.
    """
    l1, l2, l3 = lambdas
    if min(l1, l2, l3) < 0:
        raise ValueError("lambdas must be non-negative")
    return (
        l1 * wrapped_angle_penalty(gamma.alpha)
        + l2 * float(np.linalg.norm(gamma.tau))
        + l3 * deformation_norm(gamma.grid, mesh_p)
    )


def regularizer_grads(gamma: DeformParams, lambdas, mesh_p: int = 10):
    """Value plus exact gradients of the regularizer.

    Returns (value, d_alpha, d_tau, d_grid) with subgradient 0 at the
    non-smooth identity point of each term.
    """
    l1, l2, l3 = lambdas
    a = float(gamma.alpha) % _TWO_PI
    angle_term = min(a, _TWO_PI - a)
    if a == 0.0:
        d_alpha = 0.0
    else:
        d_alpha = l1 * (1.0 if a < np.pi else -1.0)

    tau_norm = float(np.linalg.norm(gamma.tau))
    d_tau = l2 * gamma.tau / tau_norm if tau_norm > 0 else np.zeros(2)

    pts = _mesh_points(mesh_p)
    idx, wts = displacement_basis(gamma.grid, pts)
    flat = gamma.grid.displacements.reshape(-1, 2)
    phi = np.einsum("nk,nkc->nc", wts, flat[idx])
    ssq = float(np.sum(phi * phi))
    norm = np.sqrt(ssq)
    d_grid = np.zeros_like(flat)
    if norm > 0:
        # d||Phi||/dC = sum_p basis_p * phi(p) / ||Phi||
        for comp in range(2):
            np.add.at(d_grid[:, comp], idx.ravel(), (wts * phi[:, comp : comp + 1]).ravel())
        d_grid *= l3 / norm
    value = l1 * angle_term + l2 * tau_norm + l3 * norm
    return value, d_alpha, d_tau, d_grid.reshape(gamma.grid.displacements.shape)


def deform_to_dict(gamma: DeformParams) -> dict:
    """JSON-ready document: {tau, alpha, grid:{n1, n2, interp, displacements}}."""
    n1, n2 = gamma.grid.shape
    return {
        "tau": [float(v) for v in gamma.tau],
        "alpha": float(gamma.alpha) % _TWO_PI,
        "grid": {
            "n1": n1,
            "n2": n2,
            "interp": gamma.grid.interpolation,
            "displacements": gamma.grid.displacements.reshape(-1, 2).tolist(),
        },
    }


def deform_from_dict(doc: dict) -> DeformParams:
    g = doc["grid"]
    disp = np.asarray(g["displacements"], dtype=float).reshape(g["n1"], g["n2"], 2)
    return DeformParams(
        np.asarray(doc["tau"], dtype=float),
        float(doc["alpha"]),
        ControlGrid(disp, g["interp"]),
    )


def save_gammas(path, gammas) -> None:
    with open(path, "w") as fh:
        json.dump([deform_to_dict(g) for g in gammas], fh, indent=1)


def load_gammas(path) -> list[DeformParams]:
    with open(path) as fh:
        return [deform_from_dict(doc) for doc in json.load(fh)]
