"""Joint estimation of the volume and the per-projection deformations.

Per epoch, a fixed number of pixels is drawn from every projection;
each pixel is predicted by integrating the implicit volume along the
ray through its warped detector coordinate, and the weighted L1 data
loss plus the deformation regularizer is minimized by Adam with one
step per epoch. All gradients are exact reverse-mode: the chain runs
through the network, the hash tables, the sample positions, the
cube-clipped integration bounds, and the warp parameters. One batch per
epoch contains every projection, so the regularizer's per-epoch
contribution matches the objective without rescaling.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field as dc_field

import numpy as np

from .data import TiltSeries
from .deform import ControlGrid, DeformParams, displacement_basis, regularizer_grads, rot2
from .encoding import EncodingSpec
from .errors import NonFiniteGradientError, TrainingDivergedError
from .field import (NetworkSpec, VolumeParams, backward_from_cache, forward_with_cache)
from .geometry import DetectorSpec, chord_bounds, quadrature_nodes, ray_points

_MAX_POINTS_PER_SLICE = 65536


@dataclass
class TrainConfig:
    """All optimizer, sampling, regularization and schedule settings."""

    pixels_per_projection: int = 1500
    epochs: int = 1000
    lr_volume: float = 1e-2
    lr_shift: float = 1e-3
    lr_rotation: float = 1e-4
    lr_local: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lambda1: float = 1e-4
    lambda2: float = 1e-4
    lambda3: float = 1e-4
    dose: str = "uniform"  # "uniform" | "quadratic" | "custom"
    dose_weights: list | None = None
    n_samples: int | None = None  # None: one sample per voxel depth
    quadrature: str = "trapezoid"
    seed: int = 0
    early_stop_window: int = 50
    early_stop_rel: float = 1e-3
    early_stop_patience: int = 3
    est_grid: int = 10
    est_interp: str = "bilinear"
    mesh_p: int = 10
    enc_levels: int = 8
    enc_features: int = 2
    enc_table_size: int = 2**16
    enc_n_min: int = 8
    enc_n_max: int | None = None  # None: half the detector size
    hidden_layers: int = 2
    hidden_width: int = 64
    init_density: float = 0.1
    dtype: str = "float32"
    workers: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        for lr in (self.lr_volume, self.lr_shift, self.lr_rotation, self.lr_local):
            if lr <= 0:
                raise ValueError("learning rates must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.dose not in ("uniform", "quadratic", "custom"):
            raise ValueError(f"unknown dose mode {self.dose!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def encoding_spec(self, detector_size: int) -> EncodingSpec:
        n_max = self.enc_n_max if self.enc_n_max is not None else max(self.enc_n_min, detector_size // 2)
        return EncodingSpec(self.enc_levels, self.enc_features, self.enc_table_size,
                            self.enc_n_min, n_max)

    def network_spec(self) -> NetworkSpec:
        return NetworkSpec(self.hidden_layers, self.hidden_width)

    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


@dataclass
class Batch:
    """Sampled pixels: projection index, flat pixel index, observed value."""

    proj: np.ndarray
    pix: np.ndarray
    y: np.ndarray
    angles_rad: np.ndarray
    n_detector: int
    pixels_per_projection: int


def sample_minibatch(rng: np.random.Generator, series: TiltSeries, k: int) -> Batch:
    """Draw k pixels per projection, uniformly without replacement.

    Every projection is represented; results are reproducible for a
    fixed generator state.
    """
    n = series.image_size
    if k > n * n:
        raise ValueError(f"cannot draw {k} distinct pixels from {n}x{n}")
    proj, pix, y = [], [], []
    for m in range(series.n_projections):
        chosen = rng.choice(n * n, size=k, replace=False, shuffle=False)
        proj.append(np.full(k, m, dtype=np.int64))
        pix.append(chosen.astype(np.int64))
        y.append(series.images[m].ravel()[chosen])
    return Batch(
        np.concatenate(proj),
        np.concatenate(pix),
        np.concatenate(y).astype(float),
        series.angles_rad,
        n,
        k,
    )


def dose_weights_for(angles_deg: np.ndarray, mode: str, custom=None) -> np.ndarray:
    """Per-projection data-term weights.

    "quadratic" interpolates from 2 at zero tilt down to 1 at |60| deg:
    w(theta) = 1 + max(0, 1 - (theta/60)^2).
    """
    angles_deg = np.asarray(angles_deg, dtype=float)
    if mode == "uniform":
        return np.ones_like(angles_deg)
    if mode == "quadratic":
        return 1.0 + np.maximum(0.0, 1.0 - (angles_deg / 60.0) ** 2)
    if mode == "custom":
        w = np.asarray(custom, dtype=float)
        if w.shape != angles_deg.shape:
            raise ValueError("custom dose weights must match the angle list")
        return w
    raise ValueError(f"unknown dose mode {mode!r}")


@dataclass
class _GammaArrays:
    """Mutable per-projection deformation parameters during optimization."""

    tau: np.ndarray  # (M, 2)
    alpha: np.ndarray  # (M,)
    ctrl: np.ndarray  # (M, g1, g2, 2)
    interp: str

    @classmethod
    def identity(cls, n_proj: int, grid_n: int, interp: str) -> "_GammaArrays":
        return cls(
            np.zeros((n_proj, 2)),
            np.zeros(n_proj),
            np.zeros((n_proj, grid_n, grid_n, 2)),
            interp,
        )

    @classmethod
    def from_params(cls, gammas) -> "_GammaArrays":
        shapes = {g.grid.shape for g in gammas}
        interps = {g.grid.interpolation for g in gammas}
        if len(shapes) != 1 or len(interps) != 1:
            raise ValueError("all deformations must share one control-grid layout")
        return cls(
            np.stack([g.tau for g in gammas]),
            np.array([g.alpha for g in gammas], dtype=float),
            np.stack([g.grid.displacements for g in gammas]),
            interps.pop(),
        )

    def to_params(self) -> list[DeformParams]:
        return [
            DeformParams(self.tau[m].copy(), float(self.alpha[m]),
                         ControlGrid(self.ctrl[m].copy(), self.interp))
            for m in range(len(self.alpha))
        ]

    def copy(self) -> "_GammaArrays":
        return _GammaArrays(self.tau.copy(), self.alpha.copy(), self.ctrl.copy(), self.interp)


def _batch_pass(vparams: VolumeParams, gam: _GammaArrays, batch: Batch,
                config: TrainConfig, dose_w: np.ndarray, compute_grads: bool):
    """One forward (and optionally backward) sweep over a batch.

    Returns (losses, grads): losses = dict(total, data, reg);
    grads maps block name -> array when requested, else None.
    """
    n_det = batch.n_detector
    n_samples = config.n_samples if config.n_samples is not None else n_det
    centers = -1.0 + (np.arange(n_det) + 0.5) * (2.0 / n_det)
    trapezoid = config.quadrature == "trapezoid"
    if trapezoid:
        frac = np.arange(n_samples) / (n_samples - 1)
        coeff = np.ones(n_samples)
        coeff[0] = coeff[-1] = 0.5
    else:
        frac = (np.arange(n_samples) + 0.5) / n_samples
        coeff = np.ones(n_samples)
    denom = (n_samples - 1) if trapezoid else n_samples

    grads = None
    if compute_grads:
        grads = {
            "table": np.zeros_like(vparams.table),
            **{f"w{i}": np.zeros_like(w) for i, w in enumerate(vparams.weights)},
            **{f"b{i}": np.zeros_like(b) for i, b in enumerate(vparams.biases)},
            "tau": np.zeros_like(gam.tau),
            "alpha": np.zeros_like(gam.alpha),
            "ctrl": np.zeros_like(gam.ctrl),
        }

    boundaries = np.searchsorted(batch.proj, np.arange(len(batch.angles_rad) + 1))
    total_data_weighted = 0.0
    total_abs_residual = 0.0
    reg_total = 0.0

    for m in range(len(batch.angles_rad)):
        lo, hi = boundaries[m], boundaries[m + 1]
        if hi == lo:
            continue
        k_m = hi - lo
        theta = float(batch.angles_rad[m])
        sin_t, cos_t = np.sin(theta), np.cos(theta)
        pix = batch.pix[lo:hi]
        p = np.stack([centers[pix // n_det], centers[pix % n_det]], axis=1)

        grid_m = ControlGrid(gam.ctrl[m], gam.interp)
        idx_b, wts_b = displacement_basis(grid_m, p)
        phi = np.einsum("nk,nkc->nc", wts_b, gam.ctrl[m].reshape(-1, 2)[idx_b])
        shifted = p + phi
        sin_a, cos_a = np.sin(gam.alpha[m]), np.cos(gam.alpha[m])
        rot = rot2(gam.alpha[m])
        rot_d = np.array([[-sin_a, -cos_a], [cos_a, -sin_a]])  # dR/d(alpha)
        w = shifted @ rot.T - gam.tau[m]

        t0, t1, dt0, dt1, valid = chord_bounds(w[:, 0], theta)
        vmask = valid & (np.abs(w[:, 1]) <= 1.0)
        t, wq = quadrature_nodes(t0, t1, n_samples, config.quadrature)
        wq = np.where(vmask[:, None], wq, 0.0)

        pred = np.zeros(k_m)
        rays_per_slice = max(1, _MAX_POINTS_PER_SLICE // n_samples)
        for s_lo in range(0, k_m, rays_per_slice):
            s_hi = min(s_lo + rays_per_slice, k_m)
            sl = slice(s_lo, s_hi)
            pts = ray_points(w[sl], theta, t[sl]).reshape(-1, 3)
            vals, cache = forward_with_cache(vparams, pts, config.workers)
            f = vals.reshape(s_hi - s_lo, n_samples)
            pred[sl] = np.sum(f * wq[sl], axis=1)

            if not compute_grads:
                continue
            residual = batch.y[lo:hi][sl] - pred[sl]
            d_pred = -dose_w[m] * np.sign(residual) / k_m
            upstream = (d_pred[:, None] * wq[sl]).ravel()
            vg = backward_from_cache(vparams, cache, upstream, need_input_grad=True,
                                     workers=config.workers)
            grads["table"] += vg.table
            for i in range(len(vparams.weights)):
                grads[f"w{i}"] += vg.weights[i]
                grads[f"b{i}"] += vg.biases[i]

            g_pts = vg.points.astype(float).reshape(s_hi - s_lo, n_samples, 3)
            g_axis = g_pts[..., 0] * cos_t + g_pts[..., 2] * sin_t
            g_dir = -g_pts[..., 0] * sin_t + g_pts[..., 2] * cos_t
            dts = dt0[sl, None] + frac[None, :] * (dt1 - dt0)[sl, None]
            gw1 = np.sum(g_axis + g_dir * dts, axis=1)
            gw1 += d_pred * ((dt1 - dt0)[sl] / denom) * np.sum(coeff * f, axis=1)
            gw2 = np.sum(g_pts[..., 1], axis=1)
            gw = np.stack([gw1, gw2], axis=1) * vmask[sl, None]

            grads["tau"][m] -= gw.sum(axis=0)
            grads["alpha"][m] += np.einsum("nd,nd->", gw, shifted[sl] @ rot_d.T)
            q = gw @ rot
            flat_ctrl = grads["ctrl"][m].reshape(-1, 2)
            for comp in range(2):
                flat_ctrl[:, comp] += np.bincount(
                    idx_b[sl].ravel(),
                    weights=(wts_b[sl] * q[:, comp : comp + 1]).ravel(),
                    minlength=flat_ctrl.shape[0],
                )

        abs_residual = np.abs(batch.y[lo:hi] - pred)
        total_abs_residual += abs_residual.sum()
        total_data_weighted += dose_w[m] * abs_residual.mean()

        lambdas = (config.lambda1, config.lambda2, config.lambda3)
        gamma_m = DeformParams(gam.tau[m], float(gam.alpha[m]), grid_m)
        if compute_grads:
            reg_val, d_alpha, d_tau, d_ctrl = regularizer_grads(gamma_m, lambdas, config.mesh_p)
            grads["alpha"][m] += d_alpha
            grads["tau"][m] += d_tau
            grads["ctrl"][m] += d_ctrl
        else:
            from .deform import regularizer as _reg

            reg_val = _reg(gamma_m, lambdas, config.mesh_p)
        reg_total += reg_val

    losses = {
        "data": total_abs_residual / len(batch.y),
        "data_weighted": total_data_weighted,
        "reg": reg_total,
        "total": total_data_weighted + reg_total,
    }
    return losses, grads


def data_loss(batch: Batch, vparams: VolumeParams, gammas, config: TrainConfig) -> float:
    """Mean absolute residual over the batch pixels."""
    if len(batch.y) == 0:
        raise ValueError("empty batch")
    gam = _GammaArrays.from_params(gammas)
    dose_w = np.ones(len(batch.angles_rad))
    losses, _ = _batch_pass(vparams, gam, batch, config, dose_w, compute_grads=False)
    return float(losses["data"])


def total_loss(batch: Batch, vparams: VolumeParams, gammas, config: TrainConfig) -> float:
    """Dose-weighted per-projection data losses plus the regularizer."""
    gam = _GammaArrays.from_params(gammas)
    dose_w = dose_weights_for(np.rad2deg(batch.angles_rad), config.dose, config.dose_weights)
    losses, _ = _batch_pass(vparams, gam, batch, config, dose_w, compute_grads=False)
    return float(losses["total"])


def loss_and_grads(vparams: VolumeParams, gammas, batch: Batch, config: TrainConfig):
    """Total loss and exact gradients for every parameter block.

    ``gammas`` may be a list of DeformParams or a _GammaArrays; blocks
    are "table", "w*", "b*", "tau", "alpha", "ctrl".
    """
    gam = gammas if isinstance(gammas, _GammaArrays) else _GammaArrays.from_params(gammas)
    dose_w = dose_weights_for(np.rad2deg(batch.angles_rad), config.dose, config.dose_weights)
    losses, grads = _batch_pass(vparams, gam, batch, config, dose_w, compute_grads=True)
    return losses, grads


class AdamState:
    """First/second moment accumulators per parameter block."""

    def __init__(self):
        self.moments: dict = {}
        self.step_count: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place.

    ``lr`` is a float or a dict mapping block name to step size. Raises
    :class:`NonFiniteGradientError` naming the offending block.
    """
    state.step_count += 1
    t = state.step_count
    for name, value in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
        if name not in state.moments:
            state.moments[name] = (np.zeros_like(value), np.zeros_like(value))
        m, v = state.moments[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        step = lr[name] if isinstance(lr, dict) else lr
        value -= step * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class TrainResult:
    volume: VolumeParams
    gammas: list
    log: list
    stopped_epoch: int
    config: TrainConfig


@dataclass
class _Snapshot:
    volume: VolumeParams
    gammas: list
    log: list


def train(series: TiltSeries, config: TrainConfig) -> TrainResult:
    """Jointly fit the implicit volume and per-projection deformations.

    Stops at ``config.epochs`` or once the windowed mean loss improves
    by less than ``early_stop_rel`` for ``early_stop_patience``
    consecutive windows. Raises :class:`TrainingDivergedError` carrying
    the last finite state if the loss becomes non-finite.
    """
    if series.n_projections < 1:
        raise ValueError("empty tilt series")
    n_det = series.image_size
    k = config.pixels_per_projection
    if k > n_det * n_det:
        raise ValueError(f"pixels_per_projection {k} exceeds {n_det}x{n_det} image")

    rng = np.random.default_rng(config.seed)
    vparams = VolumeParams.init(
        config.encoding_spec(n_det), config.network_spec(), seed=config.seed,
        dtype=config.np_dtype(), init_density=config.init_density,
    )
    gam = _GammaArrays.identity(series.n_projections, config.est_grid, config.est_interp)
    dose_w = dose_weights_for(series.angles_deg, config.dose, config.dose_weights)

    param_blocks = {
        "table": vparams.table,
        **{f"w{i}": w for i, w in enumerate(vparams.weights)},
        **{f"b{i}": b for i, b in enumerate(vparams.biases)},
        "tau": gam.tau,
        "alpha": gam.alpha,
        "ctrl": gam.ctrl,
    }
    lr = {name: config.lr_volume for name in param_blocks}
    lr.update(tau=config.lr_shift, alpha=config.lr_rotation, ctrl=config.lr_local)
    state = AdamState()

    log: list = []
    window_means: list = []
    window_acc: list = []
    streak = 0
    last_good: _Snapshot | None = None
    t_start = time.perf_counter()

    for epoch in range(config.epochs):
        batch = sample_minibatch(rng, series, k)
        losses, grads = _batch_pass(vparams, gam, batch, config, dose_w, compute_grads=True)

        if not np.isfinite(losses["total"]):
            checkpoint = last_good or _Snapshot(vparams.copy(), gam.to_params(), list(log))
            raise TrainingDivergedError(epoch, checkpoint)
        last_good = _Snapshot(vparams.copy(), gam.to_params(), list(log))

        adam_step(param_blocks, grads, state, lr, config.beta1, config.beta2, config.eps)
        log.append(
            {
                "epoch": epoch,
                "total_loss": float(losses["total"]),
                "data_loss": float(losses["data"]),
                "reg_loss": float(losses["reg"]),
                "wall_seconds": time.perf_counter() - t_start,
            }
        )

        window_acc.append(float(losses["total"]))
        if len(window_acc) == config.early_stop_window:
            window_means.append(float(np.mean(window_acc)))
            window_acc = []
            if len(window_means) >= 2:
                prev, cur = window_means[-2], window_means[-1]
                improvement = (prev - cur) / max(abs(prev), 1e-30)
                streak = streak + 1 if improvement < config.early_stop_rel else 0
                if streak >= config.early_stop_patience:
                    break

    return TrainResult(vparams, gam.to_params(), log, len(log), config)
