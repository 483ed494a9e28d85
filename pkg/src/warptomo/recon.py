"""Classical reconstruction: filtered backprojection for the tilt
geometry, the projector adjoint, and tilt-series re-alignment from
estimated deformations."""

from __future__ import annotations

import numpy as np

from .data import TiltSeries, VoxelVolume
from .deform import resample_image
from .geometry import DetectorSpec, GridSpec, chord_bounds, quadrature_nodes, ray_points, trilinear_corners


def _ramp_filter(n_padded: int, window: str) -> np.ndarray:
    """Frequency response of the ramp filter, built by transforming the
    sampled spatial-domain kernel so the DC term carries the standard
    correction instead of being zeroed."""
    kernel = np.zeros(n_padded)
    kernel[0] = 0.25
    odd = np.arange(1, n_padded // 2 + 1, 2)
    kernel[odd] = -1.0 / (np.pi * odd) ** 2
    kernel[n_padded - odd] = -1.0 / (np.pi * odd) ** 2
    response = 2.0 * np.real(np.fft.rfft(kernel))
    if window == "ramp-hann":
        idx = np.arange(response.size)
        response *= 0.5 * (1.0 + np.cos(np.pi * idx / (response.size - 1)))
    elif window != "ramp":
        raise ValueError(f"unknown filter {window!r}")
    return response


def filter_projections(images: np.ndarray, window: str = "ramp") -> np.ndarray:
    """1-D ramp filtering along the tilt-varying axis (axis 1 of the
    stack), spectral with zero-padding to twice the width."""
    n = images.shape[1]
    response = _ramp_filter(2 * n, window)
    spectra = np.fft.rfft(images, n=2 * n, axis=1)
    filtered = np.fft.irfft(spectra * response[None, :, None], n=2 * n, axis=1)
    return filtered[:, :n, :]


def fbp(series: TiltSeries, grid: GridSpec | None = None, filter: str = "ramp") -> VoxelVolume:
    """Filtered backprojection of a tilt series onto a voxel grid.

    Rows along the tilt axis are independent: each is ramp-filtered and
    smeared back along its rays with bilinear interpolation, summed
    with a pi/(2 M) weight.
    """
    if series.n_projections == 0:
        raise ValueError("empty tilt series")
    angles = series.angles_rad
    if np.any(np.abs(angles) >= np.pi / 2):
        raise ValueError("tilt angles must lie in (-90, 90) degrees")
    n = series.image_size
    if grid is None:
        grid = GridSpec.cubic(n, series.voxel_size)

    # Work in pixel units so the filter's unit spacing matches the data.
    filtered = filter_projections(series.images * (n / 2.0), filter)

    c1 = grid.voxel_centers(0)
    c2 = grid.voxel_centers(1)
    c3 = grid.voxel_centers(2)
    out = np.zeros(grid.shape)
    detector = DetectorSpec(n)

    for m, theta in enumerate(angles):
        proj = filtered[m]
        # Resample along the tilt axis onto the grid's second-axis centers.
        v_pix = detector.coord_to_pixel(c2)
        iv0 = np.clip(np.floor(v_pix).astype(np.int64), 0, n - 2)
        fv = np.clip(v_pix - iv0, 0.0, 1.0)
        proj_v = proj[:, iv0] * (1.0 - fv) + proj[:, iv0 + 1] * fv  # (n, n2)

        u = c1[:, None] * np.cos(theta) + c3[None, :] * np.sin(theta)
        u_pix = detector.coord_to_pixel(u)
        iu0 = np.floor(u_pix).astype(np.int64)
        fu = u_pix - iu0
        acc = np.zeros((grid.n1, grid.n3, grid.n2))
        for offset, weight in ((0, 1.0 - fu), (1, fu)):
            idx = iu0 + offset
            ok = (idx >= 0) & (idx < n)
            rows = proj_v[np.clip(idx, 0, n - 1)]  # (n1, n3, n2)
            acc += np.where(ok[..., None], weight[..., None], 0.0) * rows
        out += acc.transpose(0, 2, 1)

    out *= np.pi / (2.0 * series.n_projections)
    return VoxelVolume(out, grid.voxel_size)


def backproject(series: TiltSeries, grid: GridSpec, n_samples: int | None = None,
                quadrature: str = "trapezoid") -> VoxelVolume:
    """Unfiltered adjoint of the ray-integral projector.

    Scatters each pixel value along its quadrature samples with the
    same trilinear stencil the forward projector gathers with, so the
    dot-product identity <P x, y> = <x, B y> holds to rounding.
    """
    if series.n_projections == 0:
        raise ValueError("empty tilt series")
    n = series.image_size
    n_samples = grid.n3 if n_samples is None else n_samples
    detector = DetectorSpec(n)
    w = detector.pixel_grid()
    acc = np.zeros(grid.n1 * grid.n2 * grid.n3)

    for m, theta in enumerate(series.angles_rad):
        t0, t1, _, _, valid = chord_bounds(w[:, 0], theta)
        valid = valid & (np.abs(w[:, 1]) <= 1.0)
        t, wq = quadrature_nodes(t0, t1, n_samples, quadrature)
        wq = np.where(valid[:, None], wq, 0.0)
        pts = ray_points(w, theta, t).reshape(-1, 3)
        idx, wts = trilinear_corners(pts, grid.shape)
        contrib = (series.images[m].ravel()[:, None] * wq).ravel()
        for corner in range(8):
            acc += np.bincount(idx[:, corner], weights=contrib * wts[:, corner],
                               minlength=acc.size)
    return VoxelVolume(acc.reshape(grid.shape), grid.voxel_size)


def align_series(series: TiltSeries, gammas, tol: float = 1e-6,
                 max_iter: int = 300) -> TiltSeries:
    """Undo estimated deformations image by image; angles unchanged."""
    if len(gammas) != series.n_projections:
        raise ValueError(f"{series.n_projections} projections but {len(gammas)} deformations")
    aligned = np.stack(
        [
            resample_image(series.images[m], gammas[m], mode="undo", tol=tol, max_iter=max_iter)
            for m in range(series.n_projections)
        ]
    )
    return TiltSeries(aligned, series.angles_deg.copy(), series.voxel_size)
