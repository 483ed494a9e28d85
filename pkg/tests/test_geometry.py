import numpy as np
import pytest

from conftest import gaussian_bump_sampler
from warptomo.data import VoxelVolume
from warptomo.geometry import (
    DetectorSpec,
    GridSpec,
    Ray,
    chord_bounds,
    integrate_ray,
    ray_for_pixel,
    render_projection,
    tilt_matrix,
    tilt_rotate,
    volume_sampler,
)


class TestTiltRotate:
    def test_identity(self):
        assert np.allclose(tilt_rotate(np.array([1.0, 0, 0]), 0.0), [1, 0, 0])

    def test_quarter_turn(self):
        out = tilt_rotate(np.array([1.0, 0, 0]), np.pi / 2)
        assert np.allclose(out, [0, 0, -1], atol=1e-15)

    def test_matches_direct_matrix_product(self):
        x = np.array([0.3, -0.7, 0.2])
        alpha = 0.4
        c, s = np.cos(alpha), np.sin(alpha)
        expected = np.array(
            [c * x[0] + s * x[2], x[1], -s * x[0] + c * x[2]]
        )
        out = tilt_rotate(x, alpha)
        assert np.allclose(out, expected, atol=1e-15)
        assert np.isclose(np.linalg.norm(out), np.linalg.norm(x))

    def test_round_trip_is_identity(self, rng):
        for _ in range(20):
            x = rng.uniform(-1, 1, 3)
            alpha = rng.uniform(-1.5, 1.5)
            back = tilt_rotate(tilt_rotate(x, alpha), -alpha)
            assert np.max(np.abs(back - x)) < 1e-12

    def test_batch_matches_single(self, rng):
        xs = rng.uniform(-1, 1, (7, 3))
        out = tilt_rotate(xs, 0.3)
        for i in range(7):
            assert np.allclose(out[i], tilt_rotate(xs[i], 0.3))


class TestRayForPixel:
    def test_center_pixel_untilted(self):
        det = DetectorSpec(33)
        ray = ray_for_pixel((16, 16), 0.0, det)
        assert np.allclose(ray.origin, [0, 0, 0], atol=1e-14)
        assert np.allclose(ray.direction, [0, 0, 1])
        assert np.isclose(ray.t_max - ray.t_min, 2.0)

    def test_corner_pixel_parallel_to_z(self):
        det = DetectorSpec(32)
        ray = ray_for_pixel((0, 0), 0.0, det)
        assert np.allclose(ray.direction, [0, 0, 1])
        c = det.pixel_center(0, 0)
        assert np.allclose(ray.origin[:2], c)

    def test_tilted_chord_matches_slab_oracle(self):
        det = DetectorSpec(33)
        theta = np.deg2rad(60.0)
        ray = ray_for_pixel((16, 16), theta, det)
        # independent slab intersection of origin + t*direction with the cube
        lo, hi = -np.inf, np.inf
        for axis in range(3):
            d, o = ray.direction[axis], ray.origin[axis]
            if abs(d) > 1e-15:
                a, b = (-1 - o) / d, (1 - o) / d
                lo, hi = max(lo, min(a, b)), min(hi, max(a, b))
        assert np.isclose(ray.t_max - ray.t_min, hi - lo, atol=1e-12)

    def test_out_of_detector_pixel_rejected(self):
        with pytest.raises(ValueError):
            ray_for_pixel((40, 0), 0.0, DetectorSpec(32))

    def test_miss_is_degenerate(self):
        # |w2| > 1 never happens for real pixels; force a steep off-axis w1
        t0, t1, _, _, valid = chord_bounds(np.array([5.0]), 0.5)
        assert not valid[0] and t0[0] == t1[0] == 0.0


class TestIntegrateRay:
    def test_constant_density_gives_chord_length(self):
        ray = Ray(np.zeros(3), np.array([0.0, 0, 1]), -1.0, 1.0, 64)
        val = integrate_ray(lambda pts: np.ones(len(pts)), ray)
        assert np.isclose(val, 2.0, atol=1e-12)

    def test_zero_sampler(self):
        ray = Ray(np.zeros(3), np.array([0.0, 0, 1]), -1.0, 1.0, 16)
        assert integrate_ray(lambda pts: np.zeros(len(pts)), ray) == 0.0

    def test_degenerate_ray_returns_exact_zero(self):
        ray = Ray(np.zeros(3), np.array([0.0, 0, 1]), 0.3, 0.3, 16)
        assert integrate_ray(lambda pts: np.ones(len(pts)), ray) == 0.0

    @pytest.mark.parametrize("quadrature", ["trapezoid", "midpoint"])
    def test_gaussian_bump_matches_fine_quadrature(self, quadrature):
        sampler = gaussian_bump_sampler([0.1, -0.2, 0.05], 0.3)
        direction = np.array([0.2, -0.3, 0.93])
        direction /= np.linalg.norm(direction)
        ray = Ray(np.array([0.05, 0.1, 0.0]), direction, -0.9, 0.8, 64)
        coarse = integrate_ray(sampler, ray, quadrature)
        fine = integrate_ray(sampler, ray, quadrature, n_samples=6400)
        assert abs(coarse - fine) < 1e-4

    def test_linear_in_sampler(self, rng):
        f = gaussian_bump_sampler([0.0, 0.1, 0.0], 0.25)
        g = gaussian_bump_sampler([-0.2, 0.0, 0.3], 0.4)
        ray = Ray(np.array([0.1, 0.0, 0.0]), np.array([0.0, 0, 1.0]), -1.0, 1.0, 32)
        a, b = 2.5, -1.25
        combined = integrate_ray(lambda p: a * f(p) + b * g(p), ray)
        separate = a * integrate_ray(f, ray) + b * integrate_ray(g, ray)
        assert abs(combined - separate) < 1e-10

    def test_trapezoid_convergence_order(self):
        sampler = gaussian_bump_sampler([0.0, 0.0, 0.1], 0.3)
        ray = Ray(np.array([0.1, -0.1, 0.0]), np.array([0.0, 0, 1.0]), -1.0, 1.0, 16)
        ref = integrate_ray(sampler, ray, n_samples=20001)
        errs = [abs(integrate_ray(sampler, ray, n_samples=n + 1) - ref) for n in (16, 32, 64)]
        orders = [np.log2(errs[i] / errs[i + 1]) for i in range(2)]
        assert min(orders) > 1.9


class TestRenderProjection:
    def test_column_sum_oracle_untilted(self, rng):
        # compactly supported bump: boundary voxels are ~0, so the
        # per-column sum times the voxel depth is the true projection
        n = 16
        grid = GridSpec.cubic(n)
        centers = grid.voxel_centers(0)
        pts = np.stack(np.meshgrid(centers, centers, centers, indexing="ij"), axis=-1)
        data = np.exp(-0.5 * np.sum((pts / 0.22) ** 2, axis=-1))
        vol = VoxelVolume(data)
        det = DetectorSpec(n)
        expected = data.sum(axis=2) * (2.0 / n)

        img_mid = render_projection(volume_sampler(vol), 0.0, det,
                                    n_samples=n, quadrature="midpoint")
        assert np.max(np.abs(img_mid - expected)) < 1e-12

        img_trap = render_projection(volume_sampler(vol), 0.0, det, n_samples=4 * n + 1)
        assert np.max(np.abs(img_trap - expected)) / np.max(expected) < 1e-3

    def test_spherically_symmetric_volume_projection_angle_invariant(self):
        # sigma small enough that the tail beyond the shortest chord is
        # below the tolerance; fine quadrature keeps its own error there too
        sampler = gaussian_bump_sampler([0.0, 0.0, 0.0], 0.2)
        det = DetectorSpec(24)
        img0 = render_projection(sampler, 0.0, det, n_samples=2048)
        img37 = render_projection(sampler, np.deg2rad(37.0), det, n_samples=2048)
        inner = slice(6, 18)
        assert np.max(np.abs(img0[inner, inner] - img37[inner, inner])) < 1e-6

    def test_identity_deformation_bitwise_equal(self):
        from warptomo.deform import DeformParams

        sampler = gaussian_bump_sampler([0.1, 0.0, -0.1], 0.3)
        det = DetectorSpec(16)
        plain = render_projection(sampler, 0.3, det, n_samples=32)
        warped = render_projection(sampler, 0.3, det, gamma=DeformParams.identity(),
                                   n_samples=32)
        assert np.array_equal(plain, warped)

    def test_zero_volume_renders_zero(self):
        det = DetectorSpec(8)
        img = render_projection(lambda p: np.zeros(len(p)), 0.4, det, n_samples=16)
        assert np.all(img == 0.0)


class TestChordBounds:
    def test_gradient_of_bounds_matches_fd(self):
        theta = np.deg2rad(43.0)
        w1 = np.array([0.3, -0.55, 0.9])
        t0, t1, d0, d1, valid = chord_bounds(w1, theta)
        h = 1e-7
        t0p, t1p, *_ = chord_bounds(w1 + h, theta)
        t0m, t1m, *_ = chord_bounds(w1 - h, theta)
        assert np.allclose((t0p - t0m) / (2 * h), d0, atol=1e-6)
        assert np.allclose((t1p - t1m) / (2 * h), d1, atol=1e-6)

    def test_untilted(self):
        t0, t1, d0, d1, valid = chord_bounds(np.array([0.2]), 0.0)
        assert valid[0] and t0[0] == -1.0 and t1[0] == 1.0 and d0[0] == d1[0] == 0.0

    def test_angle_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            chord_bounds(np.array([0.0]), np.pi / 2)
