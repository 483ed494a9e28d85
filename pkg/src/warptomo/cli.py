"""Batch pipeline: simulate -> train -> reconstruct -> evaluate.

Every command is a pure function of its flags, input files and seed;
all defaults end up in the run manifest. Exit codes: 0 success, 2 bad
flags, 3 I/O failure, 4 training divergence (checkpoint retained),
5 shape mismatch.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields as dc_fields

import numpy as np

from . import __version__, io as wio
from .deform import load_gammas, save_gammas
from .errors import ShapeMismatchError, TrainingDivergedError, WarptomoError
from .field import export_grid, save_checkpoint
from .geometry import GridSpec
from .metrics import cc, central_slice_spectrum, fsc, fsc_resolution, register_translation
from .recon import align_series, fbp
from .simulate import SimProtocol, generate_ground_truth, make_phantom
from .training import TrainConfig, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_SHAPE = 5


def _parse_angle_range(text: str) -> tuple:
    """"start:stop:step" (inclusive) or a comma-separated list."""
    if ":" in text:
        start, stop, step = (float(p) for p in text.split(":"))
        if step <= 0:
            raise argparse.ArgumentTypeError("angle step must be positive")
        count = int(round((stop - start) / step)) + 1
        return tuple(start + i * step for i in range(count))
    return tuple(float(p) for p in text.split(","))


def cmd_simulate(args) -> int:
    protocol = SimProtocol(
        angles=args.angles,
        max_shift_px=args.max_shift_px,
        max_rotation_deg=args.max_rot_deg,
        max_local_px=args.max_local_px,
        truth_grid=args.truth_grid,
        snr_db=args.snr_db,
        seed=args.seed,
    )
    grid = GridSpec.cubic(args.size, args.voxel_size)
    volume = make_phantom(args.phantom, grid, seed=args.seed, path=args.phantom_file)
    truth = generate_ground_truth(volume, protocol)

    os.makedirs(args.out, exist_ok=True)
    paths = {name: os.path.join(args.out, name) for name in (
        "gt_volume.mrc", "noiseless.mrc", "deformed.mrc", "noisy.mrc",
        "angles.tlt", "gamma_true.json", "protocol.json")}
    wio.write_mrc(volume, paths["gt_volume.mrc"])
    wio.write_mrc(truth.noiseless_ts, paths["noiseless.mrc"])
    wio.write_mrc(truth.clean_deformed_ts, paths["deformed.mrc"])
    wio.write_mrc(truth.noisy_ts, paths["noisy.mrc"])
    wio.write_angles(protocol.angles, paths["angles.tlt"])
    save_gammas(paths["gamma_true.json"], truth.gammas_true)
    wio.atomic_write_bytes(
        paths["protocol.json"], json.dumps(protocol.to_dict(), indent=1, sort_keys=True).encode()
    )
    print(f"wrote {len(paths)} files to {args.out}", file=sys.stderr)
    return EXIT_OK


def _train_config_from_args(args) -> TrainConfig:
    names = {f.name for f in dc_fields(TrainConfig)}
    values = {k: v for k, v in vars(args).items() if k in names and v is not None}
    return TrainConfig(**values)


def cmd_train(args) -> int:
    series = wio.read_tilt_series(args.ts, args.angles)
    config = _train_config_from_args(args)
    os.makedirs(args.out, exist_ok=True)
    ckpt_path = os.path.join(args.out, "volume.ckpt")

    try:
        result = train(series, config)
    except TrainingDivergedError as err:
        save_checkpoint(err.checkpoint.volume, ckpt_path)
        save_gammas(os.path.join(args.out, "gamma_est.json"), err.checkpoint.gammas)
        wio.write_loss_csv(os.path.join(args.out, "loss.csv"), err.checkpoint.log)
        print(f"error: {err} (checkpoint retained)", file=sys.stderr)
        return EXIT_DIVERGED

    save_checkpoint(result.volume, ckpt_path)
    save_gammas(os.path.join(args.out, "gamma_est.json"), result.gammas)
    wio.write_loss_csv(os.path.join(args.out, "loss.csv"), result.log)
    grid = GridSpec.cubic(series.image_size, series.voxel_size)
    wio.write_mrc(export_grid(result.volume, grid), os.path.join(args.out, "recon_nn.mrc"))
    wio.save_run_manifest(
        os.path.join(args.out, "manifest.json"),
        command="train",
        config=config.to_dict(),
        seeds={"train": config.seed},
        input_hashes={
            "ts": wio.sha256_file(args.ts),
            "angles": wio.sha256_file(args.angles),
        },
        outputs=["volume.ckpt", "gamma_est.json", "loss.csv", "recon_nn.mrc", "manifest.json"],
    )
    print(f"trained {result.stopped_epoch} epochs; outputs in {args.out}", file=sys.stderr)
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    series = wio.read_tilt_series(args.ts, args.angles)
    if args.gammas:
        series = align_series(series, load_gammas(args.gammas))
    if args.method != "fbp":
        raise argparse.ArgumentTypeError(f"unknown method {args.method!r}")
    volume = fbp(series, filter=args.filter)
    os.makedirs(args.out, exist_ok=True)
    wio.write_mrc(volume, os.path.join(args.out, "recon_fbp.mrc"))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ref = wio.read_volume(args.ref)
    est = wio.read_volume(args.est)
    if ref.shape != est.shape:
        raise ShapeMismatchError(f"reference {ref.shape} vs estimate {est.shape}")
    shift = (0, 0, 0)
    if args.register:
        shift, est = register_translation(ref, est)

    curve = fsc(ref, est)
    os.makedirs(args.out, exist_ok=True)
    wio.write_fsc_csv(os.path.join(args.out, "fsc.csv"), curve, ref.voxel_size)
    metrics = {
        "cc": cc(ref, est),
        "fsc_resolution_0.5": fsc_resolution(curve, 0.5, ref.voxel_size),
        "shift": list(shift),
    }
    wio.atomic_write_bytes(
        os.path.join(args.out, "metrics.json"),
        json.dumps(metrics, indent=1, sort_keys=True).encode(),
    )
    wio.write_mrc(central_slice_spectrum(ref), os.path.join(args.out, "spectrum_ref.mrc"))
    wio.write_mrc(central_slice_spectrum(est), os.path.join(args.out, "spectrum_est.mrc"))
    print(json.dumps(metrics), file=sys.stdout)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="warptomo",
                                     description="joint tilt-series alignment and reconstruction")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a ground-truth experiment")
    p.add_argument("--phantom", choices=["blobs", "shepp3d", "file"], default="blobs")
    p.add_argument("--phantom-file", default=None, help="MRC input for --phantom file")
    p.add_argument("--size", type=int, default=64, help="volume/detector size in voxels")
    p.add_argument("--voxel-size", type=float, default=1.0, help="nm per voxel")
    p.add_argument("--angles", type=_parse_angle_range, default=_parse_angle_range("-60:60:2"))
    p.add_argument("--snr-db", type=float, default=10.0)
    p.add_argument("--max-shift-px", type=float, default=None)
    p.add_argument("--max-rot-deg", type=float, default=0.01)
    p.add_argument("--max-local-px", type=float, default=None)
    p.add_argument("--truth-grid", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="jointly fit volume and deformations")
    p.add_argument("--ts", required=True, help="tilt-series MRC stack")
    p.add_argument("--angles", required=True, help="tilt-angle file (.tlt)")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--pixels", dest="pixels_per_projection", type=int, default=None)
    p.add_argument("--dose", choices=["uniform", "quadratic"], default=None)
    p.add_argument("--lr-volume", dest="lr_volume", type=float, default=None)
    p.add_argument("--lr-shift", dest="lr_shift", type=float, default=None)
    p.add_argument("--lr-rotation", dest="lr_rotation", type=float, default=None)
    p.add_argument("--lr-local", dest="lr_local", type=float, default=None)
    p.add_argument("--lambda1", type=float, default=None)
    p.add_argument("--lambda2", type=float, default=None)
    p.add_argument("--lambda3", type=float, default=None)
    p.add_argument("--n-samples", dest="n_samples", type=int, default=None)
    p.add_argument("--quadrature", choices=["trapezoid", "midpoint"], default=None)
    p.add_argument("--est-grid", dest="est_grid", type=int, default=None)
    p.add_argument("--enc-levels", dest="enc_levels", type=int, default=None)
    p.add_argument("--enc-features", dest="enc_features", type=int, default=None)
    p.add_argument("--enc-table-size", dest="enc_table_size", type=int, default=None)
    p.add_argument("--enc-n-min", dest="enc_n_min", type=int, default=None)
    p.add_argument("--enc-n-max", dest="enc_n_max", type=int, default=None)
    p.add_argument("--hidden-layers", dest="hidden_layers", type=int, default=None)
    p.add_argument("--hidden-width", dest="hidden_width", type=int, default=None)
    p.add_argument("--dtype", choices=["float32", "float64"], default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="FBP reconstruction, optionally aligned first")
    p.add_argument("--ts", required=True)
    p.add_argument("--angles", required=True)
    p.add_argument("--gammas", default=None, help="deformations JSON to undo before FBP")
    p.add_argument("--method", choices=["fbp"], default="fbp")
    p.add_argument("--filter", choices=["ramp", "ramp-hann"], default="ramp")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", help="CC, FSC and spectra against a reference")
    p.add_argument("--ref", required=True)
    p.add_argument("--est", required=True)
    p.add_argument("--register", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ShapeMismatchError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_SHAPE
    except (OSError, WarptomoError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
