"""Continuous volume density: hash encoding + small MLP, with exact
reverse-mode gradients for every parameter and for the query points.

The computation graph is fixed (encode -> hidden ReLU layers -> linear
output -> softplus), so gradients are hand-derived rather than taped.
Double precision is used for gradient-check work; training may run the
same code in float32.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

from .data import VoxelVolume
from .encoding import EncodingSpec, encode, encode_backward
from .errors import MrcFormatError
from .geometry import GridSpec

_CHECKPOINT_MAGIC = b"WTVF0001"


@dataclass(frozen=True)
class NetworkSpec:
    """Coordinate network: ReLU hidden layers, softplus output map."""

    hidden_layers: int = 2
    hidden_width: int = 64
    activation: str = "relu"
    output_transform: str = "softplus"

    def __post_init__(self):
        if self.hidden_layers < 1 or self.hidden_width < 1:
            raise ValueError("need at least one hidden layer of width >= 1")
        if self.activation != "relu" or self.output_transform != "softplus":
            raise ValueError("only relu hidden layers with softplus output are supported")


@dataclass
class VolumeParams:
    """All learnable parameters of the implicit volume."""

    encoding: EncodingSpec
    network: NetworkSpec
    table: np.ndarray  # (total_rows, features), all levels stacked
    weights: list = dc_field(default_factory=list)
    biases: list = dc_field(default_factory=list)

    @property
    def dtype(self):
        return self.table.dtype

    @property
    def tables(self) -> list:
        """Per-level views into the stacked feature table."""
        off = self.encoding.level_offsets()
        return [self.table[off[i] : off[i + 1]] for i in range(self.encoding.levels)]

    def num_params(self) -> int:
        return self.table.size + sum(w.size for w in self.weights) + sum(
            b.size for b in self.biases
        )

    def copy(self) -> "VolumeParams":
        return VolumeParams(
            self.encoding,
            self.network,
            self.table.copy(),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )

    @classmethod
    def init(cls, encoding: EncodingSpec, network: NetworkSpec, seed: int = 0,
             dtype=np.float64, init_density: float = 0.1) -> "VolumeParams":
        """Near-flat start: tiny features, fan-in-scaled weights, output
        bias set so the initial density is ``init_density`` everywhere."""
        rng = np.random.default_rng(seed)
        table = rng.uniform(-1e-4, 1e-4, size=(encoding.total_rows, encoding.features))

        dims = [encoding.out_dim] + [network.hidden_width] * network.hidden_layers + [1]
        weights, biases = [], []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            bound = 1.0 / np.sqrt(d_in)
            weights.append(rng.uniform(-bound, bound, size=(d_in, d_out)))
            biases.append(np.zeros(d_out))
        # softplus(b) = init_density
        biases[-1][0] = np.log(np.expm1(init_density))
        return cls(
            encoding,
            network,
            table.astype(dtype),
            [w.astype(dtype) for w in weights],
            [b.astype(dtype) for b in biases],
        )


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def forward_with_cache(params: VolumeParams, points: np.ndarray, workers: int = 1):
    """Densities at (n, 3) points plus the activations needed by backward."""
    points = np.ascontiguousarray(points, dtype=params.dtype)
    feats = encode(points, params.table, params.encoding, workers)
    z = feats
    pre_acts, acts = [], [feats]
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        a = z @ w + b
        pre_acts.append(a)
        z = np.maximum(a, 0.0)
        acts.append(z)
    out_pre = (z @ params.weights[-1] + params.biases[-1])[:, 0]
    values = _softplus(out_pre)
    cache = {"points": points, "pre_acts": pre_acts, "acts": acts, "out_pre": out_pre}
    return values, cache


def density(params: VolumeParams, points: np.ndarray, workers: int = 1) -> np.ndarray:
    """Non-negative density at (n, 3) points."""
    values, _ = forward_with_cache(params, points, workers)
    return values


def density_at(params: VolumeParams, x) -> float:
    """Density at a single 3-vector."""
    return float(density(params, np.asarray(x, dtype=float)[None, :])[0])


@dataclass
class VolumeGrads:
    """Gradients mirroring :class:`VolumeParams`, plus input-point grads."""

    table: np.ndarray
    weights: list
    biases: list
    points: np.ndarray | None = None


def backward_from_cache(params: VolumeParams, cache: dict, upstream: np.ndarray,
                        need_input_grad: bool = False, workers: int = 1) -> VolumeGrads:
    """Gradients of sum(upstream_i * density(x_i)) from a forward cache."""
    upstream = np.asarray(upstream, dtype=params.dtype)
    d_out = upstream * _sigmoid(cache["out_pre"])  # (n,)

    z_last = cache["acts"][-1]
    d_w = [None] * len(params.weights)
    d_b = [None] * len(params.biases)
    d_w[-1] = z_last.T @ d_out[:, None]
    d_b[-1] = np.array([d_out.sum()], dtype=params.dtype)

    dz = d_out[:, None] @ params.weights[-1].T
    for i in range(len(params.weights) - 2, -1, -1):
        da = dz * (cache["pre_acts"][i] > 0)
        d_w[i] = cache["acts"][i].T @ da
        d_b[i] = da.sum(axis=0)
        dz = da @ params.weights[i].T

    d_table, d_points = encode_backward(
        cache["points"], dz, params.table, params.encoding, need_input_grad, workers
    )
    return VolumeGrads(d_table, d_w, d_b, d_points)


def backward(params: VolumeParams, points: np.ndarray, upstream: np.ndarray,
             need_input_grad: bool = False, workers: int = 1) -> VolumeGrads:
    """Gradients of sum(upstream_i * density(x_i)) w.r.t. all parameters."""
    _, cache = forward_with_cache(params, points, workers)
    return backward_from_cache(params, cache, upstream, need_input_grad, workers)


def export_grid(params: VolumeParams, grid: GridSpec, chunk: int = 65536,
                workers: int = 1) -> VoxelVolume:
    """Sample the density at every voxel center of ``grid``."""
    c1, c2, c3 = (grid.voxel_centers(a) for a in range(3))
    pts = np.stack(np.meshgrid(c1, c2, c3, indexing="ij"), axis=-1).reshape(-1, 3)
    out = np.empty(pts.shape[0])
    for lo in range(0, pts.shape[0], chunk):
        hi = min(lo + chunk, pts.shape[0])
        out[lo:hi] = density(params, pts[lo:hi], workers)
    return VoxelVolume(out.reshape(grid.shape), grid.voxel_size)


def _array_manifest(params: VolumeParams):
    named = [("table", params.table)]
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        named.append((f"w{i}", w))
        named.append((f"b{i}", b))
    return named


def save_checkpoint(params: VolumeParams, path) -> None:
    """Binary container: magic, JSON spec header, little-endian payload,
    trailing SHA-256 of everything before it. Written atomically."""
    from .io import atomic_write_bytes

    named = _array_manifest(params)
    dtype = "float32" if params.dtype == np.float32 else "float64"
    header = {
        "format": 1,
        "dtype": dtype,
        "encoding": {
            "levels": params.encoding.levels,
            "features": params.encoding.features,
            "table_size": params.encoding.table_size,
            "n_min": params.encoding.n_min,
            "n_max": params.encoding.n_max,
        },
        "network": {
            "hidden_layers": params.network.hidden_layers,
            "hidden_width": params.network.hidden_width,
        },
        "arrays": [{"name": name, "shape": list(arr.shape)} for name, arr in named],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    blob = bytearray()
    blob += _CHECKPOINT_MAGIC
    blob += struct.pack("<I", len(header_bytes))
    blob += header_bytes
    le = "<f4" if dtype == "float32" else "<f8"
    for _, arr in named:
        blob += np.ascontiguousarray(arr).astype(le).tobytes()
    blob += hashlib.sha256(bytes(blob)).digest()
    atomic_write_bytes(path, bytes(blob))


def load_checkpoint(path) -> VolumeParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(_CHECKPOINT_MAGIC) + 4 + 32 or blob[:8] != _CHECKPOINT_MAGIC:
        raise MrcFormatError(f"{path}: not a volume checkpoint")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise MrcFormatError(f"{path}: checkpoint checksum mismatch")
    (header_len,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12 : 12 + header_len].decode())
    enc = EncodingSpec(**header["encoding"])
    net = NetworkSpec(**header["network"])
    le = "<f4" if header["dtype"] == "float32" else "<f8"
    itemsize = 4 if header["dtype"] == "float32" else 8

    arrays = {}
    offset = 12 + header_len
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        raw = body[offset : offset + count * itemsize]
        arrays[entry["name"]] = np.frombuffer(raw, dtype=le).reshape(entry["shape"]).copy()
        offset += count * itemsize

    weights = [arrays[f"w{i}"] for i in range(net.hidden_layers + 1)]
    biases = [arrays[f"b{i}"] for i in range(net.hidden_layers + 1)]
    return VolumeParams(enc, net, arrays["table"], weights, biases)
