import numpy as np
import pytest

from warptomo.encoding import EncodingSpec, encode, encode_backward
from warptomo.kernels import reference


def small_spec():
    return EncodingSpec(levels=4, features=2, table_size=2**10, n_min=4, n_max=16)


def random_table(rng, spec, dtype=np.float64):
    return rng.normal(0, 0.4, (spec.total_rows, spec.features)).astype(dtype)


class TestSpec:
    def test_geometric_resolutions(self):
        spec = EncodingSpec(levels=5, features=2, table_size=2**14, n_min=4, n_max=64)
        res = spec.level_resolutions()
        assert res[0] == 4 and res[-1] == 64
        assert np.all(np.diff(res) >= 0)

    def test_direct_until_table_overflows(self):
        spec = small_spec()
        verts = (spec.level_resolutions() + 1) ** 3
        assert np.array_equal(spec.level_hashed(), (verts > spec.table_size).astype(np.uint8))
        assert np.array_equal(spec.level_rows(), np.minimum(verts, spec.table_size))

    def test_rejects_non_power_of_two_table(self):
        with pytest.raises(ValueError):
            EncodingSpec(table_size=1000)

    def test_output_dim(self, rng):
        spec = small_spec()
        feats = encode(rng.uniform(-1, 1, (5, 3)), random_table(rng, spec), spec)
        assert feats.shape == (5, spec.out_dim)


class TestForward:
    def test_lattice_corner_returns_stored_row(self, rng):
        spec = small_spec()
        table = random_table(rng, spec)
        res = spec.level_resolutions()
        offsets = spec.level_offsets()
        # a vertex of the coarsest (injective) level: vertex (1, 2, 3)
        level = 0
        vx, vy, vz = 1, 2, 3
        point = np.array([[vx, vy, vz]]) * (2.0 / res[level]) - 1.0
        side = res[level] + 1
        row = offsets[level] + (vx * side + vy) * side + vz
        feats = encode(point, table, spec)
        got = feats[0, level * spec.features : (level + 1) * spec.features]
        assert np.max(np.abs(got - table[row])) < 1e-12

    def test_cell_center_is_mean_of_eight_corners(self, rng):
        spec = small_spec()
        table = random_table(rng, spec)
        res = spec.level_resolutions()
        offsets = spec.level_offsets()
        level = 1
        cell = np.array([2, 1, 3])
        point = (cell + 0.5)[None, :] * (2.0 / res[level]) - 1.0
        side = res[level] + 1
        acc = np.zeros(spec.features)
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    row = offsets[level] + ((cell[0] + dx) * side + cell[1] + dy) * side + cell[2] + dz
                    acc += table[row]
        feats = encode(point, table, spec)
        got = feats[0, level * spec.features : (level + 1) * spec.features]
        assert np.max(np.abs(got - acc / 8.0)) < 1e-12

    def test_piecewise_affine_along_axis(self, rng):
        spec = small_spec()
        table = random_table(rng, spec)
        res = spec.level_resolutions()
        # segment contained in one cell of every level simultaneously
        x0 = rng.uniform(-0.9, 0.9, 3)
        u0 = (x0 + 1.0) / 2.0
        lo, hi = -1.0, 1.0
        for r in res:
            cell = min(int(np.floor(u0[0] * r)), r - 1)
            lo = max(lo, cell / r * 2.0 - 1.0)
            hi = min(hi, (cell + 1) / r * 2.0 - 1.0)
        assert hi > lo
        a = lo + 0.25 * (hi - lo)
        b = lo + 0.75 * (hi - lo)
        pts = np.tile(x0, (3, 1))
        pts[0, 0], pts[1, 0], pts[2, 0] = a, (a + b) / 2, b
        feats = encode(pts, table, spec)
        assert np.max(np.abs(feats[1] - (feats[0] + feats[2]) / 2)) < 1e-10

    def test_clamps_outside_domain(self, rng):
        spec = small_spec()
        table = random_table(rng, spec)
        inside = encode(np.array([[1.0, 0.2, -0.3]]), table, spec)
        outside = encode(np.array([[1.8, 0.2, -0.3]]), table, spec)
        assert np.allclose(inside, outside)


class TestBackendEquivalence:
    """The compiled kernels and the numpy fallback must agree."""

    def _pack(self, spec):
        return (spec.level_offsets(), spec.level_resolutions(), spec.level_hashed(),
                spec.table_size)

    @pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 1e-4)])
    def test_forward_agreement(self, rng, dtype, tol):
        spec = small_spec()
        table = random_table(rng, spec, dtype)
        pts = rng.uniform(-1.1, 1.1, (500, 3)).astype(dtype)
        fast = encode(pts, table, spec)
        slow = np.zeros((500, spec.out_dim), dtype=dtype)
        reference.encode_forward(np.ascontiguousarray(pts), table, *self._pack(spec), slow)
        assert np.max(np.abs(fast - slow)) < tol

    @pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-10), (np.float32, 1e-3)])
    def test_backward_agreement(self, rng, dtype, tol):
        spec = small_spec()
        table = random_table(rng, spec, dtype)
        pts = rng.uniform(-1, 1, (400, 3)).astype(dtype)
        dfe = rng.standard_normal((400, spec.out_dim)).astype(dtype)
        d_table, d_pts = encode_backward(pts, dfe, table, spec, need_input_grad=True)
        ref_table = np.zeros_like(table)
        ref_pts = np.zeros_like(pts)
        reference.encode_backward(np.ascontiguousarray(pts), np.ascontiguousarray(dfe),
                                  table, *self._pack(spec), ref_table, ref_pts)
        scale = max(1.0, np.abs(ref_table).max())
        assert np.max(np.abs(d_table - ref_table)) / scale < tol
        assert np.max(np.abs(d_pts - ref_pts)) / max(1.0, np.abs(ref_pts).max()) < tol

    def test_worker_count_does_not_change_forward(self, rng):
        spec = small_spec()
        table = random_table(rng, spec)
        pts = rng.uniform(-1, 1, (1000, 3))
        assert np.array_equal(encode(pts, table, spec, workers=1),
                              encode(pts, table, spec, workers=2))

    def test_backward_deterministic_per_worker_count(self, rng):
        spec = small_spec()
        table = random_table(rng, spec)
        pts = rng.uniform(-1, 1, (1000, 3))
        dfe = rng.standard_normal((1000, spec.out_dim))
        for workers in (1, 2):
            a = encode_backward(pts, dfe, table, spec, True, workers=workers)
            b = encode_backward(pts, dfe, table, spec, True, workers=workers)
            assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


class TestBackwardSemantics:
    def test_zero_upstream_zero_grads(self, rng):
        spec = small_spec()
        table = random_table(rng, spec)
        pts = rng.uniform(-1, 1, (50, 3))
        d_table, d_pts = encode_backward(pts, np.zeros((50, spec.out_dim)), table, spec, True)
        assert not d_table.any() and not d_pts.any()

    def test_table_gradient_matches_fd(self, rng):
        spec = small_spec()
        table = random_table(rng, spec)
        pts = rng.uniform(-1, 1, (10, 3))
        dfe = rng.standard_normal((10, spec.out_dim))
        d_table, _ = encode_backward(pts, dfe, table, spec)
        flat = np.flatnonzero(d_table)
        h = 1e-6
        for i in rng.choice(flat, 10, replace=False):
            idx = np.unravel_index(i, d_table.shape)
            t2, t3 = table.copy(), table.copy()
            t2[idx] += h
            t3[idx] -= h
            fd = np.sum(dfe * (encode(pts, t2, spec) - encode(pts, t3, spec))) / (2 * h)
            assert abs(fd - d_table[idx]) < 1e-7
