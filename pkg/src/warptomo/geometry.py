"""Tilt geometry, ray construction and line-integral rendering.

Conventions
-----------
* The volume lives in the normalized cube [-1, 1]^3; density samplers
  are callables mapping an (n, 3) array of points to n values and are
  zero outside the cube by construction (rays are clipped to it).
* The stage tilts about the second axis. A projection at tilt ``theta``
  assigns to detector coordinate (w1, w2) the line integral along

      ray(t) = (w1 cos(theta) - t sin(theta), w2, w1 sin(theta) + t cos(theta)),

  i.e. the ray through the inverse-tilted detector point with the
  inverse-tilted third axis as direction.
* Detector pixel (i, j) has its center at
  (-1 + (i + 0.5) * 2/N, -1 + (j + 0.5) * 2/N); axis 1 (index i) is the
  tilt-varying axis, axis 2 (index j) is the tilt axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_SIN_EPS = 1e-12


@dataclass(frozen=True)
class GridSpec:
    """Voxel grid mapped onto the normalized cube [-1, 1]^3."""

    n1: int
    n2: int
    n3: int
    voxel_size: float = 1.0

    def __post_init__(self):
        if min(self.n1, self.n2, self.n3) < 1:
            raise ValueError("voxel counts must be >= 1")
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")

    @property
    def shape(self):
        return (self.n1, self.n2, self.n3)

    def voxel_centers(self, axis: int) -> np.ndarray:
        """Normalized coordinates of voxel centers along one axis."""
        n = self.shape[axis]
        return -1.0 + (np.arange(n) + 0.5) * (2.0 / n)

    @classmethod
    def cubic(cls, n: int, voxel_size: float = 1.0) -> "GridSpec":
        return cls(n, n, n, voxel_size)


@dataclass(frozen=True)
class DetectorSpec:
    """Square detector of N x N pixels mapped onto [-1, 1]^2."""

    n_pixels: int

    def __post_init__(self):
        if self.n_pixels < 2:
            raise ValueError("detector needs at least 2 pixels per side")

    def pixel_centers(self) -> np.ndarray:
        """Center coordinate of pixel index 0..N-1 (same along both axes)."""
        n = self.n_pixels
        return -1.0 + (np.arange(n) + 0.5) * (2.0 / n)

    def pixel_center(self, i: int, j: int) -> np.ndarray:
        c = self.pixel_centers()
        return np.array([c[i], c[j]])

    def pixel_grid(self) -> np.ndarray:
        """(N*N, 2) array of all pixel centers, row-major in (i, j)."""
        c = self.pixel_centers()
        u, v = np.meshgrid(c, c, indexing="ij")
        return np.stack([u.ravel(), v.ravel()], axis=1)

    def coord_to_pixel(self, w: np.ndarray) -> np.ndarray:
        """Inverse of the pixel-center map (fractional pixel indices)."""
        return (np.asarray(w) + 1.0) * (self.n_pixels / 2.0) - 0.5


@dataclass
class Ray:
    """Straight ray clipped against the normalized cube."""

    origin: np.ndarray
    direction: np.ndarray
    t_min: float
    t_max: float
    n_samples: int = 64

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.direction = np.asarray(self.direction, dtype=float)
        norm = np.linalg.norm(self.direction)
        if abs(norm - 1.0) > 1e-12:
            raise ValueError(f"direction must be unit length, got {norm}")
        if self.t_min > self.t_max:
            raise ValueError("t_min must not exceed t_max")


def tilt_matrix(alpha: float) -> np.ndarray:
    """Rotation by ``alpha`` about the second axis."""
    c, s = np.cos(alpha), np.sin(alpha)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def tilt_rotate(x: np.ndarray, alpha: float) -> np.ndarray:
    """Apply the tilt rotation to a 3-vector or an (n, 3) batch."""
    x = np.asarray(x, dtype=float)
    return x @ tilt_matrix(alpha).T


def chord_bounds(w1, theta):
    """Clip detector rays against the cube, tracking d(t)/d(w1).

    Parameters
    ----------
    w1 : array
        First detector coordinate of each ray.
    theta : float or array
        Tilt angle(s) in radians, |theta| < pi/2.

    Returns
    -------
    (t0, t1, dt0, dt1, valid) : arrays
        Entry/exit parameters, their derivatives with respect to ``w1``
        (derivative of the active slab constraint; zero where invalid),
        and a mask of rays that intersect the cube. Invalid rays get
        t0 = t1 = 0. The second detector coordinate does not move the
        bounds; callers mask |w2| > 1 themselves.
    """
    w1 = np.asarray(w1, dtype=float)
    theta = np.broadcast_to(np.asarray(theta, dtype=float), w1.shape)
    if np.any(np.abs(theta) >= np.pi / 2):
        raise ValueError("tilt angles must lie in (-90, 90) degrees")
    s, c = np.sin(theta), np.cos(theta)

    lo_z = (-1.0 - w1 * s) / c
    hi_z = (1.0 - w1 * s) / c
    d_z = -s / c

    steep = np.abs(s) > _SIN_EPS
    s_safe = np.where(steep, s, 1.0)
    a = (w1 * c - 1.0) / s_safe
    b = (w1 * c + 1.0) / s_safe
    lo_x = np.where(steep, np.minimum(a, b), -np.inf)
    hi_x = np.where(steep, np.maximum(a, b), np.inf)
    d_x = np.where(steep, c / s_safe, 0.0)

    t0 = np.maximum(lo_z, lo_x)
    t1 = np.minimum(hi_z, hi_x)
    dt0 = np.where(lo_x > lo_z, d_x, d_z)
    dt1 = np.where(hi_x < hi_z, d_x, d_z)

    valid = t1 > t0
    valid &= steep | (np.abs(w1) <= 1.0)
    t0 = np.where(valid, t0, 0.0)
    t1 = np.where(valid, t1, 0.0)
    dt0 = np.where(valid, dt0, 0.0)
    dt1 = np.where(valid, dt1, 0.0)
    return t0, t1, dt0, dt1, valid


def ray_for_pixel(pixel, theta: float, detector: DetectorSpec, n_samples: int = 64) -> Ray:
    """Ray through the center of detector pixel (i, j) at tilt ``theta``."""
    i, j = pixel
    if not (0 <= i < detector.n_pixels and 0 <= j < detector.n_pixels):
        raise ValueError(f"pixel {pixel} outside detector of size {detector.n_pixels}")
    w = detector.pixel_center(i, j)
    rot = tilt_matrix(-theta)
    origin = rot @ np.array([w[0], w[1], 0.0])
    direction = rot @ np.array([0.0, 0.0, 1.0])
    t0, t1, _, _, valid = chord_bounds(np.array([w[0]]), theta)
    if not (valid[0] and abs(w[1]) <= 1.0):
        t0, t1 = np.zeros(1), np.zeros(1)
    return Ray(origin, direction, float(t0[0]), float(t1[0]), n_samples)


def quadrature_nodes(t0, t1, n_samples: int, quadrature: str = "trapezoid"):
    """Sample parameters and weights on [t0, t1] for each ray.

    Returns (t, weights), both shaped (n_rays, n_samples); weights sum
    to the interval length, so sum(f(t) * weights) approximates the
    line integral. Degenerate intervals get zero weights.
    """
    t0 = np.atleast_1d(np.asarray(t0, dtype=float))
    t1 = np.atleast_1d(np.asarray(t1, dtype=float))
    length = t1 - t0
    if quadrature == "trapezoid":
        if n_samples < 2:
            raise ValueError("trapezoid needs n_samples >= 2")
        h = length / (n_samples - 1)
        t = t0[:, None] + h[:, None] * np.arange(n_samples)
        coeff = np.ones(n_samples)
        coeff[0] = coeff[-1] = 0.5
        weights = h[:, None] * coeff
    elif quadrature == "midpoint":
        if n_samples < 1:
            raise ValueError("midpoint needs n_samples >= 1")
        h = length / n_samples
        t = t0[:, None] + h[:, None] * (np.arange(n_samples) + 0.5)
        weights = np.repeat(h[:, None], n_samples, axis=1)
    else:
        raise ValueError(f"unknown quadrature {quadrature!r}")
    return t, weights


def ray_points(w, theta, t):
    """World points ray(t) for detector coordinates w (n, 2).

    ``t`` has shape (n, S); the result is (n, S, 3).
    """
    theta = np.broadcast_to(np.asarray(theta, dtype=float), (w.shape[0],))
    s, c = np.sin(theta)[:, None], np.cos(theta)[:, None]
    x1 = w[:, 0:1] * c - t * s
    x2 = np.broadcast_to(w[:, 1:2], t.shape)
    x3 = w[:, 0:1] * s + t * c
    return np.stack([x1, x2, x3], axis=-1)


def integrate_ray(sampler, ray: Ray, quadrature: str = "trapezoid", n_samples: int | None = None) -> float:
    """Quadrature approximation of the line integral of ``sampler`` along ``ray``."""
    n = ray.n_samples if n_samples is None else n_samples
    if ray.t_max - ray.t_min == 0.0:
        return 0.0
    t, weights = quadrature_nodes(ray.t_min, ray.t_max, n, quadrature)
    points = ray.origin[None, None, :] + t[..., None] * ray.direction[None, None, :]
    values = np.asarray(sampler(points.reshape(-1, 3))).reshape(t.shape)
    return float(np.sum(values * weights))


def render_pixels(sampler, w, theta, n_samples: int = 64, quadrature: str = "trapezoid",
                  chunk: int = 16384) -> np.ndarray:
    """Line integrals for a batch of detector coordinates.

    ``w`` is (n, 2) and ``theta`` a scalar or (n,) array; returns (n,)
    integral values (zero where the ray misses the cube).
    """
    w = np.asarray(w, dtype=float)
    theta_full = np.broadcast_to(np.asarray(theta, dtype=float), (w.shape[0],))
    out = np.zeros(w.shape[0])
    for lo in range(0, w.shape[0], chunk):
        hi = min(lo + chunk, w.shape[0])
        wc, tc = w[lo:hi], theta_full[lo:hi]
        t0, t1, _, _, valid = chord_bounds(wc[:, 0], tc)
        valid = valid & (np.abs(wc[:, 1]) <= 1.0)
        t, weights = quadrature_nodes(t0, t1, n_samples, quadrature)
        weights = np.where(valid[:, None], weights, 0.0)
        pts = ray_points(wc, tc, t)
        values = np.asarray(sampler(pts.reshape(-1, 3))).reshape(t.shape)
        out[lo:hi] = np.sum(values * weights, axis=1)
    return out


def render_projection(sampler, theta: float, detector: DetectorSpec, gamma=None,
                      n_samples: int = 64, quadrature: str = "trapezoid") -> np.ndarray:
    """Render one N x N projection of ``sampler`` at tilt ``theta``.

    With ``gamma`` (a deformation), pixel (i, j) takes the integral
    along the ray through the warped detector coordinate m(x_ij), which
    realizes the deformed projection of the forward model.
    """
    w = detector.pixel_grid()
    if gamma is not None:
        from .deform import forward_map_batch

        w = forward_map_batch(gamma, w)
    vals = render_pixels(sampler, w, theta, n_samples=n_samples, quadrature=quadrature)
    return vals.reshape(detector.n_pixels, detector.n_pixels)


def trilinear_corners(points: np.ndarray, shape) -> tuple[np.ndarray, np.ndarray]:
    """Trilinear stencil of each point against a voxel-center lattice.

    Returns (flat_indices, weights), both (n, 8). Weights of corners
    that fall outside the grid are zero (their index is clipped in
    bounds so gathers stay safe); values therefore fade linearly to
    zero half a voxel beyond the outermost centers.
    """
    points = np.asarray(points, dtype=float)
    n = points.shape[0]
    shape = np.asarray(shape)
    g = (points + 1.0) * (shape[None, :] / 2.0) - 0.5
    i0 = np.floor(g).astype(np.int64)
    f = g - i0

    weights = np.ones((n, 8))
    flat = np.zeros((n, 8), dtype=np.int64)
    strides = np.array([shape[1] * shape[2], shape[2], 1], dtype=np.int64)
    for corner in range(8):
        w_c = np.ones(n)
        idx_c = np.zeros(n, dtype=np.int64)
        ok = np.ones(n, dtype=bool)
        for axis in range(3):
            hi = (corner >> (2 - axis)) & 1
            idx_a = i0[:, axis] + hi
            ok &= (idx_a >= 0) & (idx_a < shape[axis])
            w_c = w_c * np.where(hi, f[:, axis], 1.0 - f[:, axis])
            idx_c = idx_c + np.clip(idx_a, 0, shape[axis] - 1) * strides[axis]
        weights[:, corner] = np.where(ok, w_c, 0.0)
        flat[:, corner] = idx_c
    return flat, weights


def volume_sampler(volume):
    """Density sampler for a dense voxel volume (trilinear, zero outside)."""
    data = volume.data if hasattr(volume, "data") else np.asarray(volume)
    flat_data = data.ravel()

    def sampler(points):
        idx, wts = trilinear_corners(points, data.shape)
        return np.sum(flat_data[idx] * wts, axis=1)

    return sampler
