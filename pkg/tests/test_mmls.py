import math

import numpy as np
import pytest
from scipy.linalg import subspace_angles

from app.modules.errors import ConvergenceError, FeasibilityError
from app.modules.geometry import PointCloud, enumerate_multi_indices
from app.modules.mls_engine import Bandwidth, WeightFunction
from app.modules.mmls import (
    LocalFrame,
    MmlsConfig,
    find_local_frame,
    local_poly_fit,
    mmls_project,
    mmls_rate_experiment,
    reconstruct_manifold,
    rigid_motion,
)
from app.modules.sampling import ReferenceManifold, sample_manifold

PLANE_NORMAL = np.array([-0.3, -0.2, 1.0]) / math.sqrt(1.13)


def _plane_samples(rng, n=400):
    u = rng.random((n, 2))
    z = 0.3 * u[:, 0] + 0.2 * u[:, 1] + 0.1
    return np.column_stack([u, z])


def _plane_distance(p):
    p = np.atleast_2d(p)
    return np.abs((p[:, 2] - 0.3 * p[:, 0] - 0.2 * p[:, 1] - 0.1) / math.sqrt(1.13))


def _plane_config(**kw):
    return MmlsConfig(2, 3, bandwidth=Bandwidth.fixed(0.2), **kw)


class TestLocalFrame:
    def test_recovers_hyperplane(self, rng):
        pts = _plane_samples(rng)
        r = np.array([0.5, 0.5, 0.3 * 0.5 + 0.2 * 0.5 + 0.1])
        frame = find_local_frame(r, PointCloud(pts), _plane_config())
        tangent = np.array([[1.0, 0.0, 0.3], [0.0, 1.0, 0.2]]).T
        assert np.max(subspace_angles(frame.basis, tangent)) <= 1e-8
        assert frame.residual <= 1e-16
        np.testing.assert_allclose(frame.origin, r, atol=1e-12)

    def test_constraints_hold(self, rng):
        pts = _plane_samples(rng)
        r = np.array([0.4, 0.6, 0.25]) + 0.05 * PLANE_NORMAL
        cfg = _plane_config()
        frame = find_local_frame(r, PointCloud(pts), cfg)
        np.testing.assert_allclose(frame.basis.T @ (r - frame.origin), 0.0, atol=1e-12)
        assert np.linalg.norm(frame.origin - r) <= cfg.mu_factor * frame.h
        assert frame.neighbor_count >= cfg.basis_size

    def test_residual_never_increases(self, rng):
        cloud = sample_manifold(ReferenceManifold.circle(), 500, 3)
        cfg = MmlsConfig(1, 2, bandwidth=Bandwidth.fixed(0.2))
        frame = find_local_frame([1.05, 0.2], cloud, cfg)
        assert all(b <= a for a, b in zip(frame.history, frame.history[1:]))

    def test_circle_tangent(self):
        manifold = ReferenceManifold.circle()
        cloud = PointCloud(manifold.reference_points(2000))
        h = 0.05
        frame = find_local_frame([1.0, 0.0], cloud, MmlsConfig(1, 2, bandwidth=Bandwidth.fixed(h)))
        angle = np.max(subspace_angles(frame.basis, np.array([[0.0], [1.0]])))
        assert angle <= 0.1 * h
        assert np.linalg.norm(frame.origin - np.array([1.0, 0.0])) <= h ** 2

    def test_far_point_is_infeasible(self, rng):
        with pytest.raises(FeasibilityError):
            find_local_frame([0.5, 0.5, 5.0], PointCloud(_plane_samples(rng)), _plane_config())

    def test_iteration_cap(self):
        cloud = sample_manifold(ReferenceManifold.circle(), 500, 4)
        cfg = MmlsConfig(1, 2, bandwidth=Bandwidth.fixed(0.2), max_iterations=1)
        with pytest.raises(ConvergenceError) as err:
            find_local_frame([1.03, 0.1], cloud, cfg)
        assert err.value.iterations == 1


class TestPolyFit:
    def test_parabola_is_reproduced(self):
        x = np.linspace(-1.0, 1.0, 201)
        pts = np.column_stack([x, 0.3 * x ** 2])
        cloud = PointCloud(pts)
        cfg = MmlsConfig(1, 2, degree=2, bandwidth=Bandwidth.fixed(0.2))
        frame = find_local_frame([0.0, 0.05], cloud, cfg)
        poly = local_poly_fit(frame, cloud, cfg)
        np.testing.assert_allclose(poly.at_origin(), [0.0, 0.0], atol=1e-9)
        near = np.abs(x) < 0.15
        local = (pts[near] - frame.origin) @ frame.basis
        np.testing.assert_allclose(poly(local), pts[near], atol=1e-9)

    def test_degree_zero_is_weighted_mean(self):
        cloud = sample_manifold(ReferenceManifold.circle(), 800, 5)
        cfg = MmlsConfig(1, 2, degree=0, bandwidth=Bandwidth.fixed(0.15))
        frame = find_local_frame([0.0, 1.02], cloud, cfg)
        poly = local_poly_fit(frame, cloud, cfg)
        kernel = cfg.fit_weight.with_bandwidth(frame.h)
        R = cloud.points[np.linalg.norm(cloud.points - frame.origin, axis=1) <= kernel.radius]
        w = kernel((R - frame.origin) @ frame.basis)
        np.testing.assert_allclose(poly.at_origin(), (w[:, None] * R).sum(axis=0) / w.sum(), atol=1e-12)

    def test_matches_dense_normal_equations(self):
        cloud = sample_manifold(ReferenceManifold.circle(), 1000, 6)
        h = 0.15
        cfg = MmlsConfig(1, 2, degree=2, bandwidth=Bandwidth.fixed(h))
        frame = find_local_frame([math.cos(0.7), math.sin(0.7)], cloud, cfg)
        poly = local_poly_fit(frame, cloud, cfg)
        R = cloud.points[np.linalg.norm(cloud.points - frame.origin, axis=1) <= h]
        x = ((R - frame.origin) @ frame.basis)[:, 0]
        w = WeightFunction(bandwidth=h)(x[:, None])
        P = np.column_stack([np.ones_like(x), x / h, (x / h) ** 2])
        sw = np.sqrt(w)[:, None]
        coef, *_ = np.linalg.lstsq(sw * P, sw * R, rcond=None)
        np.testing.assert_allclose(poly.coefficients, coef, atol=1e-10)

    def test_randomized_frames_match_lstsq(self, rng):
        checked = 0
        for _ in range(1000):
            D = int(rng.integers(2, 4))
            d = int(rng.integers(1, D))
            degree = int(rng.integers(0, 3))
            h = float(rng.uniform(0.3, 0.6))
            pts = rng.random((int(rng.integers(60, 200)), D))
            origin = rng.uniform(0.3, 0.7, size=D)
            basis, _ = np.linalg.qr(rng.standard_normal((D, d)))
            frame = LocalFrame(origin, basis, residual=0.0, iterations=0, h=h, neighbor_count=0)
            cfg = MmlsConfig(d, D, degree=degree, bandwidth=Bandwidth.fixed(h))

            R = pts[np.linalg.norm(pts - origin, axis=1) <= h]
            x = (R - origin) @ basis
            w = WeightFunction(bandwidth=h)(x)
            indices = enumerate_multi_indices(d, degree)
            P = np.stack([np.prod(x ** np.array(a.entries), axis=1) / h ** a.order for a in indices], axis=1)
            if np.count_nonzero(w) < len(indices):
                continue
            if np.linalg.eigvalsh((P.T * w) @ P / R.shape[0])[0] < 1e-6:
                continue
            poly = local_poly_fit(frame, PointCloud(pts), cfg)
            sw = np.sqrt(w)[:, None]
            coef, *_ = np.linalg.lstsq(sw * P, sw * R, rcond=None)
            np.testing.assert_allclose(poly.coefficients, coef, rtol=1e-7, atol=1e-9)
            checked += 1
            if checked == 200:
                break
        assert checked == 200


class TestProjection:
    def test_off_plane_point_lands_on_plane(self, rng):
        cloud = PointCloud(_plane_samples(rng))
        r = np.array([0.5, 0.4, 0.33]) + 0.1 * PLANE_NORMAL
        assert _plane_distance(mmls_project(r, cloud, _plane_config()))[0] <= 1e-9

    def test_circle_refinement(self):
        manifold = ReferenceManifold.circle()
        probes = manifold.reference_points(16)
        cfg = MmlsConfig.for_manifold(manifold, degree=2)
        errors = []
        for n in (500, 2000):
            cloud = sample_manifold(manifold, n, 10)
            projected = np.array([mmls_project(p, cloud, cfg) for p in probes])
            errors.append(np.max(np.abs(np.linalg.norm(projected, axis=1) - 1.0)))
        assert errors[1] * 4 <= errors[0]

    def test_reprojection_contracts(self, rng):
        manifold = ReferenceManifold.circle()
        cloud = sample_manifold(manifold, 2000, 21)
        cfg = MmlsConfig.for_manifold(manifold, degree=2)
        for theta in rng.uniform(0.0, 2.0 * math.pi, size=30):
            offset = rng.choice([-1.0, 1.0]) * rng.uniform(0.01, 0.05)
            r = (1.0 + offset) * np.array([math.cos(theta), math.sin(theta)])
            once = mmls_project(r, cloud, cfg)
            twice = mmls_project(once, cloud, cfg)
            assert np.linalg.norm(twice - once) <= np.linalg.norm(once - r)

    def test_rigid_motion_commutes(self):
        cloud = sample_manifold(ReferenceManifold.circle(), 600, 12)
        cfg = MmlsConfig(1, 2, bandwidth=Bandwidth.fixed(0.2))
        c, s = math.cos(0.4), math.sin(0.4)
        rot = np.array([[c, -s], [s, c]])
        shift = np.array([2.0, -1.0])
        r = np.array([0.3, 0.97])
        moved = mmls_project(rot @ r + shift, rigid_motion(cloud, rot, shift), cfg)
        np.testing.assert_allclose(moved, rot @ mmls_project(r, cloud, cfg) + shift, atol=1e-9)


class TestReconstruction:
    def test_samples_on_plane_are_fixed_points(self, rng):
        cloud = PointCloud(_plane_samples(rng, 300))
        cfg = MmlsConfig(2, 3, degree=1, bandwidth=Bandwidth.fixed(0.25))
        rec = reconstruct_manifold(cloud, cloud, cfg)
        assert rec.failures == 0
        np.testing.assert_allclose(rec.cloud.points, cloud.points, atol=1e-9)

    def test_empty_probe_set(self, rng):
        cloud = PointCloud(_plane_samples(rng, 50))
        rec = reconstruct_manifold(cloud, PointCloud(np.empty((0, 3))), _plane_config())
        assert len(rec.cloud) == 0
        assert rec.diagnostics == []

    def test_circle_gap_shrinks(self):
        manifold = ReferenceManifold.circle()
        samples = sample_manifold(manifold, 2000, 13)
        probes = PointCloud(1.01 * manifold.reference_points(64))
        rec = reconstruct_manifold(samples, probes, MmlsConfig.for_manifold(manifold, degree=2, workers=2))
        gap_in = np.max(manifold.distance(probes.points))
        gap_out = np.max(manifold.distance(rec.cloud.points))
        assert len(rec.cloud) == 64
        assert gap_out < gap_in

    def test_flat_rate_run_skips_slope(self):
        manifold = ReferenceManifold.graph(1, 2, amplitude=0.0)
        cfg = MmlsConfig.for_manifold(manifold, degree=1)
        report = mmls_rate_experiment(manifold, cfg, (64, 128, 256, 512), trials=1, master_seed=0, probes=8)
        assert report.target == "mmls"
        assert report.slope is None
        assert all(y <= 1e-10 for _, _, y in report.points)

    @pytest.mark.slow
    @pytest.mark.parametrize("degree,low,high", [(2, 2.3, 3.7), (1, 1.4, 2.6)])
    def test_circle_rate(self, degree, low, high):
        manifold = ReferenceManifold.circle()
        cfg = MmlsConfig.for_manifold(manifold, degree=degree)
        report = mmls_rate_experiment(manifold, cfg, tuple(2 ** k for k in range(9, 14)), trials=10, master_seed=7)
        assert low <= report.slope <= high
