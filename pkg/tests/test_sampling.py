import math

import numpy as np
import pytest
from scipy import stats

from app.modules.errors import ArgumentError, ConfigError
from app.modules.geometry import Domain
from app.modules.sampling import (
    Density,
    ReferenceManifold,
    derive_stream,
    experiment_id,
    sample_iid,
    sample_manifold,
)


class TestStreams:
    def test_experiment_id_is_stable(self):
        assert experiment_id("fill") == experiment_id("fill")
        assert experiment_id("fill") != experiment_id("separation")

    def test_trials_get_independent_streams(self):
        a = sample_iid(Density.uniform(), Domain.unit_cube(1), 8, derive_stream(3, 1, 8, 0))
        b = sample_iid(Density.uniform(), Domain.unit_cube(1), 8, derive_stream(3, 1, 8, 1))
        assert not np.array_equal(a.points, b.points)


class TestSampleIid:
    def test_bit_identical_rerun(self):
        a = sample_iid(Density.uniform(), Domain.unit_cube(1), 4, 12345)
        b = sample_iid(Density.uniform(), Domain.unit_cube(1), 4, 12345)
        assert a.points.shape == (4, 1)
        assert a.points.tobytes() == b.points.tobytes()

    def test_uniform_mean(self):
        cloud = sample_iid(Density.uniform(), Domain.unit_cube(2), 10_000, 7)
        np.testing.assert_allclose(cloud.points.mean(axis=0), [0.5, 0.5], atol=0.02)

    def test_ball_samples_inside(self):
        domain = Domain.ball(3, radius=2.0)
        cloud = sample_iid(Density.uniform(), domain, 500, 1)
        assert np.all(domain.contains(cloud.points))
        assert np.linalg.norm(cloud.points, axis=1).max() > 1.5

    def test_bounded_ratio_histogram(self):
        domain = Domain.unit_cube(1)
        density = Density.bounded_ratio(0.4, c_lower=0.5, c_upper=2.0)
        lo, hi, integral = density.validate(domain)
        assert 0.5 <= lo <= hi <= 2.0
        assert integral == pytest.approx(1.0, abs=1e-6)

        n = 20_000
        cloud = sample_iid(density, domain, n, 99)
        hits, _ = np.histogram(cloud.points[:, 0], bins=10, range=(0.0, 1.0))
        ratio = hits[hits >= 100] / (n / 10)
        assert ratio.min() >= 0.5
        assert ratio.max() <= 2.0

    def test_bounded_ratio_follows_profile(self):
        domain = Domain.unit_cube(1)
        density = Density.bounded_ratio(0.5)
        cloud = sample_iid(density, domain, 20_000, 5)
        near_edge = np.mean((cloud.points[:, 0] < 0.1) | (cloud.points[:, 0] > 0.9))
        center = np.mean(np.abs(cloud.points[:, 0] - 0.5) < 0.1)
        assert near_edge > center

    def test_spiky_density_rejected(self):
        density = Density.bounded_ratio(0.5, c_upper=2e4)
        with pytest.raises(ConfigError):
            sample_iid(density, Domain.unit_cube(1), 10, 0)

    def test_bounds_that_miss_the_profile(self):
        density = Density.bounded_ratio(0.5, c_lower=0.9, c_upper=1.1)
        with pytest.raises(ConfigError):
            density.validate(Domain.unit_cube(2))

    def test_invalid_size(self):
        with pytest.raises(ArgumentError):
            sample_iid(Density.uniform(), Domain.unit_cube(1), 0, 0)

    def test_default_bounds_follow_the_domain(self):
        domain = Domain.ball(2)
        density = Density.bounded_ratio(0.9)
        lo, hi = density.bounds(domain)
        assert hi > 1.9
        r_min, r_max, integral = density.validate(domain)
        assert lo - 1e-9 <= r_min <= r_max <= hi + 1e-9
        assert integral == pytest.approx(1.0, abs=1e-6)
        cloud = sample_iid(density, domain, 2000, 7)
        assert np.all(domain.contains(cloud.points))

    def test_envelope_below_the_ratio_is_rejected(self):
        density = Density.bounded_ratio(0.9, c_lower=0.1, c_upper=1.9)
        with pytest.raises(ConfigError) as err:
            sample_iid(density, Domain.ball(2), 2000, 7)
        assert err.value.key == "sampling.c_upper"


class TestSampleManifold:
    def test_circle_membership(self):
        cloud = sample_manifold(ReferenceManifold.circle(), 3, 11)
        np.testing.assert_allclose(np.linalg.norm(cloud.points, axis=1), 1.0, atol=1e-12)
        assert cloud.parameters.shape == (3, 1)

    def test_sphere_is_centered(self):
        cloud = sample_manifold(ReferenceManifold.sphere(), 10_000, 2)
        sigma = math.sqrt(1.0 / 3.0 / 10_000)
        np.testing.assert_allclose(cloud.points.mean(axis=0), 0.0, atol=4 * sigma)

    def test_graph_points_follow_their_parameters(self):
        manifold = ReferenceManifold.graph(1, 2, amplitude=0.1)
        cloud = sample_manifold(manifold, 5, 4)
        u = cloud.parameters
        np.testing.assert_allclose(cloud.points[:, :1], u)
        np.testing.assert_allclose(cloud.points[:, 1:], manifold.heights(u))

    def test_reproducible(self):
        a = sample_manifold(ReferenceManifold.sphere(), 50, 8)
        b = sample_manifold(ReferenceManifold.sphere(), 50, 8)
        assert a.points.tobytes() == b.points.tobytes()


class TestReferenceManifold:
    def test_circle_distance(self):
        circle = ReferenceManifold.circle(2.0)
        np.testing.assert_allclose(circle.distance([[3.0, 0.0], [0.0, 1.5]]), [1.0, 0.5])

    def test_graph_distance_along_normal(self):
        manifold = ReferenceManifold.graph(1, 2, amplitude=0.1)
        u = np.array([[0.37]])
        foot = manifold.embed(u)[0]
        slope = manifold.height_jacobian(u)[0, 0, 0]
        normal = np.array([-slope, 1.0]) / math.hypot(slope, 1.0)
        assert manifold.distance(foot + 0.01 * normal)[0] == pytest.approx(0.01, abs=1e-8)

    def test_volumes(self):
        assert ReferenceManifold.circle().volume() == pytest.approx(2.0 * math.pi)
        assert ReferenceManifold.graph(1, 2, amplitude=0.0).volume() == pytest.approx(1.0)

    def test_reference_points_on_manifold(self):
        sphere = ReferenceManifold.sphere()
        np.testing.assert_allclose(sphere.distance(sphere.reference_points(100)), 0.0, atol=1e-12)

    def test_bad_dimensions(self):
        with pytest.raises(ArgumentError):
            ReferenceManifold("circle", 2, 3)


def _cell_probabilities(density, domain, edges, per_axis=1000):
    lo, hi = domain.bounding_box()
    axes = [lo[j] + (np.arange(per_axis) + 0.5) * (hi[j] - lo[j]) / per_axis for j in range(domain.dim)]
    grid = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
    grid = grid[domain.contains(grid)]
    weights = density.ratio(grid, domain)
    mass, _ = np.histogram(_profile_statistic(grid, domain), bins=edges, weights=weights)
    return mass / mass.sum()


def _profile_statistic(points, domain):
    lo, hi = domain.bounding_box()
    u = (points - lo) / (hi - lo)
    return np.prod(np.cos(2.0 * math.pi * u), axis=1)


class TestGoodnessOfFit:
    @pytest.mark.parametrize("domain", [Domain.unit_cube(2), Domain.ball(2)], ids=["cube", "ball"])
    @pytest.mark.parametrize("density", [Density.uniform(), Density.bounded_ratio(0.9)],
                             ids=["uniform", "bounded-ratio"])
    def test_chi_square_on_profile_cells(self, domain, density):
        n = 100_000
        edges = np.linspace(-1.0, 1.0, 11)
        expected = _cell_probabilities(density, domain, edges) * n
        cloud = sample_iid(density, domain, n, 20240611)
        observed, _ = np.histogram(_profile_statistic(cloud.points, domain), bins=edges)
        assert observed.sum() == n
        _, p_value = stats.chisquare(observed, expected)
        assert p_value > 0.001

    def test_uniform_cells_reject_the_tilted_density(self):
        domain = Domain.unit_cube(2)
        n = 100_000
        edges = np.linspace(-1.0, 1.0, 11)
        expected = _cell_probabilities(Density.uniform(), domain, edges) * n
        cloud = sample_iid(Density.bounded_ratio(0.9), domain, n, 3)
        observed, _ = np.histogram(_profile_statistic(cloud.points, domain), bins=edges)
        _, p_value = stats.chisquare(observed, expected)
        assert p_value < 1e-6
