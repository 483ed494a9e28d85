import numpy as np
import pytest

from warptomo.encoding import EncodingSpec
from warptomo.errors import MrcFormatError
from warptomo.field import (
    NetworkSpec,
    VolumeParams,
    backward,
    density,
    density_at,
    export_grid,
    forward_with_cache,
    load_checkpoint,
    save_checkpoint,
)
from warptomo.geometry import GridSpec
from warptomo.kernels import reference


def make_params(rng, *, dtype=np.float64, width=16, layers=2):
    spec = EncodingSpec(levels=4, features=2, table_size=2**10, n_min=4, n_max=16)
    params = VolumeParams.init(spec, NetworkSpec(layers, width), seed=7, dtype=dtype)
    params.table[:] = rng.normal(0, 0.4, params.table.shape)
    return params


def fresh_probe(rng, params, margin=1e-2):
    """Query point whose ReLU pre-activations sit away from the kinks,
    so central differences see a smooth function."""
    while True:
        pt = rng.uniform(-1, 1, (1, 3))
        _, cache = forward_with_cache(params, pt)
        if min(np.abs(a).min() for a in cache["pre_acts"]) > margin:
            return pt


class TestDensity:
    def test_zero_final_layer_gives_log_two(self, rng):
        params = make_params(rng)
        params.weights[-1][:] = 0.0
        params.biases[-1][:] = 0.0
        pts = rng.uniform(-1, 1, (20, 3))
        assert np.allclose(density(params, pts), np.log(2.0), atol=1e-14)

    def test_non_negative_everywhere(self, rng):
        params = make_params(rng)
        pts = rng.uniform(-1.5, 1.5, (200, 3))
        assert np.all(density(params, pts) >= 0.0)

    def test_matches_straight_line_reimplementation(self, rng):
        params = make_params(rng)
        pts = rng.uniform(-1, 1, (30, 3))
        spec = params.encoding
        feats = np.zeros((30, spec.out_dim))
        reference.encode_forward(
            np.ascontiguousarray(pts), params.table, spec.level_offsets(),
            spec.level_resolutions(), spec.level_hashed(), spec.table_size, feats,
        )
        z = feats
        for w, b in zip(params.weights[:-1], params.biases[:-1]):
            z = np.maximum(z @ w + b, 0.0)
        out = (z @ params.weights[-1] + params.biases[-1])[:, 0]
        expected = np.log1p(np.exp(-np.abs(out))) + np.maximum(out, 0.0)  # stable softplus
        assert np.max(np.abs(density(params, pts) - expected)) < 1e-12

    def test_density_at_scalar(self, rng):
        params = make_params(rng)
        x = np.array([0.1, -0.2, 0.3])
        assert np.isclose(density_at(params, x), density(params, x[None, :])[0])

    def test_empirical_continuity(self, rng):
        params = make_params(rng)
        base = rng.uniform(-0.9, 0.9, (50, 3))
        v0 = density(params, base)
        for eps in (1e-3, 1e-5, 1e-7):
            v1 = density(params, base + eps / np.sqrt(3.0))
            assert np.max(np.abs(v1 - v0)) < 200.0 * eps + 1e-12


class TestBackward:
    def test_zero_upstream(self, rng):
        params = make_params(rng)
        g = backward(params, rng.uniform(-1, 1, (10, 3)), np.zeros(10), need_input_grad=True)
        assert not g.table.any() and not g.points.any()
        assert all(not w.any() for w in g.weights) and all(not b.any() for b in g.biases)

    def test_gradcheck_all_parameter_classes(self, rng):
        params = make_params(rng)
        h = 1e-4
        checked = {"table": 0, "weights": 0, "biases": 0, "points": 0}
        for _ in range(40):
            pt = fresh_probe(rng, params)
            g = backward(params, pt, np.ones(1), need_input_grad=True)
            kind = rng.choice(["table", "weights", "biases", "points"])
            if kind == "table":
                rows = np.flatnonzero(np.abs(g.table).max(axis=1) > 1e-7)
                if len(rows) == 0:
                    continue
                idx = (rng.choice(rows), rng.integers(0, params.table.shape[1]))
                analytic = g.table[idx]
                p2, p3 = params.copy(), params.copy()
                p2.table[idx] += h
                p3.table[idx] -= h
                fd = (density(p2, pt)[0] - density(p3, pt)[0]) / (2 * h)
            elif kind == "weights":
                li = int(rng.integers(0, len(params.weights)))
                idx = tuple(rng.integers(0, s) for s in params.weights[li].shape)
                analytic = g.weights[li][idx]
                p2, p3 = params.copy(), params.copy()
                p2.weights[li][idx] += h
                p3.weights[li][idx] -= h
                fd = (density(p2, pt)[0] - density(p3, pt)[0]) / (2 * h)
            elif kind == "biases":
                li = int(rng.integers(0, len(params.biases)))
                idx = tuple(rng.integers(0, s) for s in params.biases[li].shape)
                analytic = g.biases[li][idx]
                p2, p3 = params.copy(), params.copy()
                p2.biases[li][idx] += h
                p3.biases[li][idx] -= h
                fd = (density(p2, pt)[0] - density(p3, pt)[0]) / (2 * h)
            else:
                ax = int(rng.integers(0, 3))
                analytic = g.points[0, ax]
                pp, pm = pt.copy(), pt.copy()
                pp[0, ax] += h
                pm[0, ax] -= h
                fd = (density(params, pp)[0] - density(params, pm)[0]) / (2 * h)
            if max(abs(fd), abs(analytic)) < 1e-9:
                continue
            rel = abs(fd - analytic) / max(abs(fd), abs(analytic))
            assert rel < 1e-4, f"{kind}: fd={fd} analytic={analytic}"
            checked[kind] += 1
        assert all(v > 0 for v in checked.values())

    def test_batch_gradient_is_sum_of_pointwise(self, rng):
        params = make_params(rng)
        pts = rng.uniform(-1, 1, (6, 3))
        ups = rng.standard_normal(6)
        whole = backward(params, pts, ups, need_input_grad=True)
        table_sum = np.zeros_like(params.table)
        for i in range(6):
            table_sum += backward(params, pts[i : i + 1], ups[i : i + 1]).table
        assert np.max(np.abs(whole.table - table_sum)) < 1e-10

    def test_deterministic_accumulation(self, rng):
        params = make_params(rng)
        pts = rng.uniform(-1, 1, (500, 3))
        ups = rng.standard_normal(500)
        a = backward(params, pts, ups, need_input_grad=True)
        b = backward(params, pts, ups, need_input_grad=True)
        assert np.array_equal(a.table, b.table) and np.array_equal(a.points, b.points)


class TestExportGrid:
    def test_zero_network_constant_volume(self, rng):
        params = make_params(rng)
        params.weights[-1][:] = 0.0
        params.biases[-1][:] = 0.0
        vol = export_grid(params, GridSpec.cubic(8))
        assert np.allclose(vol.data, np.log(2.0))

    def test_refined_export_shares_centers_with_coarse(self, rng):
        # voxel centers nest between n and 3n (center k of the coarse grid
        # is center 3k+1 of the refined one)
        params = make_params(rng)
        coarse = export_grid(params, GridSpec.cubic(6))
        fine = export_grid(params, GridSpec.cubic(18))
        assert np.max(np.abs(fine.data[1::3, 1::3, 1::3] - coarse.data)) < 1e-12

    def test_requery_matches_export(self, rng):
        params = make_params(rng)
        grid = GridSpec.cubic(5)
        vol = export_grid(params, grid)
        c = [grid.voxel_centers(a) for a in range(3)]
        pts = np.stack(np.meshgrid(*c, indexing="ij"), axis=-1).reshape(-1, 3)
        assert np.array_equal(density(params, pts).reshape(vol.shape), vol.data)


class TestCheckpoint:
    @pytest.mark.parametrize("dtype", [np.float64, np.float32])
    def test_round_trip(self, rng, tmp_path, dtype):
        params = make_params(rng, dtype=dtype)
        path = tmp_path / "vol.ckpt"
        save_checkpoint(params, path)
        back = load_checkpoint(path)
        assert back.encoding == params.encoding
        assert back.network == params.network
        assert np.array_equal(back.table, params.table)
        for a, b in zip(back.weights, params.weights):
            assert np.array_equal(a, b)
        for a, b in zip(back.biases, params.biases):
            assert np.array_equal(a, b)

    def test_checksum_guard(self, rng, tmp_path):
        params = make_params(rng)
        path = tmp_path / "vol.ckpt"
        save_checkpoint(params, path)
        blob = bytearray(path.read_bytes())
        blob[100] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(MrcFormatError):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "not.ckpt"
        path.write_bytes(b"garbage" * 20)
        with pytest.raises(MrcFormatError):
            load_checkpoint(path)
