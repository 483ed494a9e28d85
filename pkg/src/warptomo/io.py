"""Persistence: MRC2014 volumes/stacks, tilt-angle lists, run manifests.

Only MRC mode 2 (32-bit little-endian float) is supported; other modes
are rejected with a clear error. All writers are atomic (temp file in
the target directory, then rename), so interrupted runs never leave a
truncated primary output behind.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import sys
import tempfile

import numpy as np

from .data import TiltSeries, VoxelVolume
from .errors import AnglesParseError, MrcFormatError, MrcModeError, MrcTruncatedError

_HEADER_SIZE = 1024
_MAP_MAGIC = b"MAP "
_MACHST_LE = b"\x44\x44\x00\x00"


def atomic_write_bytes(path, blob: bytes) -> None:
    """Write a file atomically: temp file in the same directory + rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_mrc(data, path, voxel_size: float = 1.0) -> None:
    """Write a volume, stack or single image as MRC2014 mode 2.

    Accepts a :class:`VoxelVolume`, :class:`TiltSeries`, or a 2-D/3-D
    array. A 3-D C-order array of shape (d0, d1, d2) maps to file
    dimensions nx = d2, ny = d1, nz = d0 (x fastest).
    """
    if isinstance(data, VoxelVolume):
        voxel_size = data.voxel_size
        arr = data.data
    elif isinstance(data, TiltSeries):
        voxel_size = data.voxel_size
        arr = data.images
    else:
        arr = np.asarray(data)
    if arr.ndim == 2:
        arr = arr[None, :, :]
    if arr.ndim != 3:
        raise ValueError(f"cannot write array of shape {arr.shape} as MRC")

    payload = np.ascontiguousarray(arr, dtype="<f4")
    nz, ny, nx = payload.shape
    dmin = float(payload.min())
    dmax = float(payload.max())
    dmean = float(payload.mean())
    rms = float(payload.std())

    header = bytearray(_HEADER_SIZE)
    struct.pack_into("<3i", header, 0, nx, ny, nz)
    struct.pack_into("<i", header, 12, 2)  # mode 2: float32
    struct.pack_into("<3i", header, 16, 0, 0, 0)  # nxstart..nzstart
    struct.pack_into("<3i", header, 28, nx, ny, nz)  # mx, my, mz
    struct.pack_into("<3f", header, 40, nx * voxel_size, ny * voxel_size, nz * voxel_size)
    struct.pack_into("<3f", header, 52, 90.0, 90.0, 90.0)
    struct.pack_into("<3i", header, 64, 1, 2, 3)  # mapc, mapr, maps
    struct.pack_into("<3f", header, 76, dmin, dmax, dmean)
    struct.pack_into("<2i", header, 88, 0, 0)  # ispg, nsymbt
    struct.pack_into("<i", header, 108, 20140)  # nversion
    struct.pack_into("<3f", header, 196, 0.0, 0.0, 0.0)  # origin
    header[208:212] = _MAP_MAGIC
    header[212:216] = _MACHST_LE
    struct.pack_into("<f", header, 216, rms)
    struct.pack_into("<i", header, 220, 0)  # nlabl

    atomic_write_bytes(path, bytes(header) + payload.tobytes())


def read_mrc(path):
    """Read an MRC2014 mode-2 file.

    Returns (data, meta): data shaped (nz, ny, nx) float32, meta with the
    parsed dimensions and voxel size. Inverts :func:`write_mrc` bit-exactly.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER_SIZE:
        raise MrcTruncatedError(f"{path}: file shorter than the 1024-byte header")
    if blob[208:212] != _MAP_MAGIC:
        raise MrcFormatError(f"{path}: MAP magic missing at byte 208")
    if blob[212:213] not in (b"\x44",):
        raise MrcFormatError(f"{path}: only little-endian machine stamps are supported")

    nx, ny, nz = struct.unpack_from("<3i", blob, 0)
    (mode,) = struct.unpack_from("<i", blob, 12)
    if mode != 2:
        raise MrcModeError(f"{path}: mode {mode} not supported (only mode 2, float32)")
    mx, my, mz = struct.unpack_from("<3i", blob, 28)
    xlen, ylen, zlen = struct.unpack_from("<3f", blob, 40)
    dmin, dmax, dmean = struct.unpack_from("<3f", blob, 76)
    (nsymbt,) = struct.unpack_from("<i", blob, 92)

    start = _HEADER_SIZE + nsymbt
    count = nx * ny * nz
    raw = blob[start : start + count * 4]
    if len(raw) < count * 4:
        raise MrcTruncatedError(
            f"{path}: payload holds {len(raw) // 4} values, header promises {count}"
        )
    data = np.frombuffer(raw, dtype="<f4").reshape(nz, ny, nx).copy()
    meta = {
        "nx": nx,
        "ny": ny,
        "nz": nz,
        "mode": mode,
        "voxel_size": xlen / mx if mx else 1.0,
        "dmin": dmin,
        "dmax": dmax,
        "dmean": dmean,
    }
    return data, meta


def read_volume(path) -> VoxelVolume:
    data, meta = read_mrc(path)
    return VoxelVolume(data.astype(float), meta["voxel_size"])


def read_tilt_series(path, angles_path) -> TiltSeries:
    data, meta = read_mrc(path)
    angles = read_angles(angles_path)
    if len(angles) != data.shape[0]:
        raise AnglesParseError(angles_path, len(angles), "angle count != stack depth")
    return TiltSeries(data.astype(float), np.asarray(angles), meta["voxel_size"])


def write_angles(angles_deg, path) -> None:
    lines = "".join(f"{float(a):.4f}\n" for a in angles_deg)
    atomic_write_bytes(path, lines.encode())


def read_angles(path) -> list[float]:
    """One tilt angle (degrees) per line; blank lines ignored."""
    angles = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            try:
                angles.append(float(text))
            except ValueError:
                raise AnglesParseError(path, lineno, text) from None
    return angles


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def save_run_manifest(path, *, command: str, config: dict, seeds: dict,
                      input_hashes: dict, outputs: list) -> None:
    """JSON record of a run: full config, seeds, versions, inputs, outputs."""
    from . import __version__
    from .kernels import backend_name

    manifest = {
        "command": command,
        "config": config,
        "seeds": seeds,
        "versions": {
            "warptomo": __version__,
            "numpy": np.__version__,
            "python": sys.version.split()[0],
            "kernel_backend": backend_name(),
        },
        "input_hashes": input_hashes,
        "outputs": outputs,
    }
    atomic_write_bytes(path, json.dumps(manifest, indent=1, sort_keys=True).encode())


def load_manifest(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def write_loss_csv(path, rows) -> None:
    """Per-epoch log: epoch, total_loss, data_loss, reg_loss, wall_seconds."""
    lines = ["epoch,total_loss,data_loss,reg_loss,wall_seconds"]
    for row in rows:
        lines.append(
            f"{row['epoch']},{row['total_loss']:.10g},{row['data_loss']:.10g},"
            f"{row['reg_loss']:.10g},{row['wall_seconds']:.3f}"
        )
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())


def write_fsc_csv(path, curve, voxel_size: float = 1.0) -> None:
    """FSC curve as CSV: shell_index, spatial_frequency, fsc."""
    n = 2 * int(curve.radii[-1])
    lines = ["shell_index,spatial_frequency,fsc"]
    for r, v in zip(curve.radii, curve.values):
        freq = r / (n * voxel_size)
        lines.append(f"{int(r)},{freq:.10g},{v:.10g}")
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())
