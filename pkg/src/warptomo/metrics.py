"""Quantitative evaluation: correlation, Fourier shell correlation,
translation registration and missing-wedge spectrum diagnostics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import VoxelVolume
from .errors import ShapeMismatchError


def _as_array(v) -> np.ndarray:
    return v.data if isinstance(v, VoxelVolume) else np.asarray(v)


def cc(a, b, mean_subtract: bool = False) -> float:
    """Normalized inner product <a, b> / (||a|| ||b||).

    No mean subtraction by default (set ``mean_subtract`` for the
    zero-mean variant). Scale-invariant; raises on zero-norm input.
    """
    x, y = _as_array(a).astype(float), _as_array(b).astype(float)
    if x.shape != y.shape:
        raise ShapeMismatchError(f"shapes {x.shape} and {y.shape} differ")
    if mean_subtract:
        x = x - x.mean()
        y = y - y.mean()
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        raise ValueError("correlation undefined for a zero-norm volume")
    return float(np.vdot(x, y) / (nx * ny))


@dataclass
class FscCurve:
    """Per-shell correlation, shell width one Fourier voxel, DC excluded."""

    radii: np.ndarray  # integer shells 1 .. n//2
    values: np.ndarray


def _shell_index(n: int) -> np.ndarray:
    k = np.fft.fftfreq(n) * n
    kx, ky, kz = np.meshgrid(k, k, k, indexing="ij")
    return np.round(np.sqrt(kx**2 + ky**2 + kz**2)).astype(np.int64)


def fsc(a, b) -> FscCurve:
    """Fourier shell correlation between two cubic volumes.

    Real part of the conjugated cross-spectrum per shell, normalized by
    the shell energies; values clamped to [-1, 1] against rounding.
    """
    x, y = _as_array(a).astype(float), _as_array(b).astype(float)
    if x.shape != y.shape:
        raise ShapeMismatchError(f"shapes {x.shape} and {y.shape} differ")
    if len(set(x.shape)) != 1:
        raise ShapeMismatchError("FSC requires cubic volumes")
    n = x.shape[0]
    fx, fy = np.fft.fftn(x), np.fft.fftn(y)
    shells = _shell_index(n).ravel()
    n_shells = n // 2

    cross = np.bincount(shells, weights=(np.conj(fx) * fy).real.ravel(), minlength=n_shells + 1)
    ex = np.bincount(shells, weights=(np.abs(fx) ** 2).ravel(), minlength=n_shells + 1)
    ey = np.bincount(shells, weights=(np.abs(fy) ** 2).ravel(), minlength=n_shells + 1)

    radii = np.arange(1, n_shells + 1)
    denom = np.sqrt(ex[radii] * ey[radii])
    values = np.where(denom > 0, cross[radii] / np.where(denom > 0, denom, 1.0), 0.0)
    return FscCurve(radii, np.clip(values, -1.0, 1.0))


def fsc_resolution(curve: FscCurve, threshold: float, voxel_size: float = 1.0) -> float:
    """Spatial frequency (1/length) of the first crossing below ``threshold``.

    Linear interpolation between shells; the curve is anchored at 1 for
    the (excluded) DC shell. Returns the Nyquist frequency when the
    curve never crosses.
    """
    if not (0.0 < threshold < 1.0):
        raise ValueError("threshold must lie in (0, 1)")
    n = 2 * int(curve.radii[-1])
    radii = np.concatenate([[0.0], curve.radii.astype(float)])
    values = np.concatenate([[1.0], curve.values])
    below = np.nonzero(values < threshold)[0]
    if len(below) == 0:
        return 1.0 / (2.0 * voxel_size)
    i = below[0]
    r_prev, r_cur = radii[i - 1], radii[i]
    v_prev, v_cur = values[i - 1], values[i]
    r_cross = r_prev + (v_prev - threshold) / (v_prev - v_cur) * (r_cur - r_prev)
    return float(r_cross / (n * voxel_size))


def register_translation(ref, mov):
    """Integer circular shift of ``mov`` relative to ``ref``.

    The returned shift s satisfies mov ~ roll(ref, s); ``registered``
    is roll(mov, -s), aligned back onto ``ref``. The shift maximizes
    the circular cross-correlation, computed spectrally.
    """
    x, y = _as_array(ref).astype(float), _as_array(mov).astype(float)
    if x.shape != y.shape:
        raise ShapeMismatchError(f"shapes {x.shape} and {y.shape} differ")
    corr = np.fft.ifftn(np.conj(np.fft.fftn(x)) * np.fft.fftn(y)).real
    raw = np.unravel_index(np.argmax(corr), corr.shape)
    shift = tuple(int((r + n // 2) % n - n // 2) for r, n in zip(raw, x.shape))
    registered = np.roll(y, tuple(-s for s in shift), axis=tuple(range(x.ndim)))
    if isinstance(mov, VoxelVolume):
        registered = VoxelVolume(registered, mov.voxel_size)
    return shift, registered


def central_slice_spectrum(volume, axis: int = 1) -> np.ndarray:
    """log(1 + |F|) of the central slice perpendicular to ``axis``,
    zero frequency centered."""
    data = _as_array(volume)
    if axis not in (0, 1, 2):
        raise ValueError("axis must be 0, 1 or 2")
    index = data.shape[axis] // 2
    sl = np.take(data, index, axis=axis)
    return np.log1p(np.abs(np.fft.fftshift(np.fft.fft2(sl))))


def wedge_masks(n: int, tilt_min_deg: float = -60.0, tilt_max_deg: float = 60.0,
                min_radius: float = 3.0):
    """(missing, measured) boolean masks for a centered 2-D spectrum.

    A tilt at angle theta measures the central-slice line at angle
    theta from the first frequency axis, so frequencies whose folded
    polar angle lies outside [tilt_min, tilt_max] belong to the missing
    wedge. A small ball around DC (where direction is quantized too
    coarsely to be meaningful) and radii beyond Nyquist are excluded
    from both masks.
    """
    k = np.arange(n) - n // 2
    k1, k3 = np.meshgrid(k, k, indexing="ij")
    radius = np.hypot(k1, k3)
    angle = np.rad2deg(np.arctan2(k3, k1))
    angle = np.where(angle > 90.0, angle - 180.0, angle)
    angle = np.where(angle <= -90.0, angle + 180.0, angle)
    valid = (radius >= min_radius) & (radius <= n // 2)
    measured = valid & (angle >= tilt_min_deg) & (angle <= tilt_max_deg)
    missing = valid & ~measured & np.isfinite(angle)
    return missing, measured


def wedge_spectrum_stats(volume, tilt_min_deg: float = -60.0, tilt_max_deg: float = 60.0,
                         axis: int = 1) -> dict:
    """Mean linear spectral magnitude inside and outside the missing wedge
    of the central slice perpendicular to the tilt axis."""
    data = _as_array(volume)
    index = data.shape[axis] // 2
    sl = np.take(data, index, axis=axis)
    mag = np.abs(np.fft.fftshift(np.fft.fft2(sl)))
    missing, measured = wedge_masks(sl.shape[0], tilt_min_deg, tilt_max_deg)
    return {
        "missing_mean": float(mag[missing].mean()),
        "measured_mean": float(mag[measured].mean()),
    }


def global_shift_of(gamma, mesh_p: int = 10) -> np.ndarray:
    """Field-of-view mean of the warp displacement m(x) - x.

    This is the gauge-free notion of a projection's global shift: the
    split between the explicit translation and the mean of the local
    control field is not determined by the data (a constant field plus
    a compensating shift leaves the warp unchanged), but their combined
    mean displacement is.
    """
    from .deform import forward_map_batch

    axis = np.linspace(-1.0, 1.0, mesh_p)
    u, v = np.meshgrid(axis, axis, indexing="ij")
    pts = np.stack([u.ravel(), v.ravel()], axis=1)
    return np.mean(forward_map_batch(gamma, pts) - pts, axis=0)


def shift_errors_px(gammas_est, gammas_true, n_pixels: int, angles_deg=None,
                    remove_gauge: bool = True) -> np.ndarray:
    """Per-tilt global-shift error norms in pixels.

    Shifts are compared as FOV-mean warp displacements (see
    :func:`global_shift_of`). A rigid translation of the reconstructed
    volume shifts every projection by (d1 cos(theta) + d3 sin(theta),
    d2) without changing the fit, so with ``remove_gauge`` the best
    such global pattern is subtracted (least squares) before reporting
    errors -- mirroring the volume registration applied before CC/FSC.
    """
    diff = np.stack([
        global_shift_of(e) - global_shift_of(t)
        for e, t in zip(gammas_est, gammas_true)
    ])
    if remove_gauge:
        if angles_deg is None:
            raise ValueError("gauge removal needs the tilt angles")
        theta = np.deg2rad(np.asarray(angles_deg, dtype=float))
        design = np.stack([np.cos(theta), np.sin(theta)], axis=1)
        coef, *_ = np.linalg.lstsq(design, diff[:, 0], rcond=None)
        diff = diff.copy()
        diff[:, 0] -= design @ coef
        diff[:, 1] -= diff[:, 1].mean()
    return np.linalg.norm(diff, axis=1) * (n_pixels / 2.0)


def shift_rmse_px(gammas_est, gammas_true, n_pixels: int, angles_deg=None,
                  remove_gauge: bool = True) -> float:
    errors = shift_errors_px(gammas_est, gammas_true, n_pixels, angles_deg, remove_gauge)
    return float(np.sqrt(np.mean(errors**2)))
