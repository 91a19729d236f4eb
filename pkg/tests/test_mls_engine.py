import math

import numpy as np
import pytest

from app.modules.errors import ArgumentError, IllConditionedError, InsufficientDataError
from app.modules.geometry import Domain, MultiIndex, PointCloud, enumerate_multi_indices
from app.modules.mls_engine import (
    Bandwidth,
    DifferentialOperator,
    MlsModel,
    WeightFunction,
    assemble_gram,
    lambda_min,
    local_fit,
    mls_eval,
    mls_eval_derivative,
    mls_eval_many,
    mls_eval_operator,
    scaled_monomial,
    shape_function_derivatives,
    weight_eval,
)

E1 = MultiIndex((1,))
DX = MultiIndex((1, 0))
DY = MultiIndex((0, 1))


def _model(points, values, degree=2, h=None, **kw):
    d = np.atleast_2d(points).shape[1] if np.ndim(points) > 1 else 1
    cloud = PointCloud(points, Domain.unit_cube(d))
    bandwidth = Bandwidth.fixed(h) if h is not None else Bandwidth.rate()
    return MlsModel(cloud, values, degree, bandwidth=bandwidth, **kw)


def _bump(t, radius):
    rho = np.sum(np.atleast_2d(t) ** 2, axis=1) / radius ** 2
    out = np.zeros(rho.shape)
    inside = rho < 1.0
    out[inside] = np.exp(1.0 / (rho[inside] - 1.0))
    return out


class TestWeightEval:
    def test_bump_at_origin(self):
        assert weight_eval(WeightFunction(), [0.0]) == pytest.approx(math.exp(-1.0))
        assert weight_eval(WeightFunction(), [0.0, 0.0]) == pytest.approx(math.exp(-1.0))

    @pytest.mark.parametrize("profile", ["smooth-bump", "wendland-like", "indicator"])
    @pytest.mark.parametrize("order", [0, 1, 2])
    @pytest.mark.parametrize("t", [(0.5, 0.0), (0.0, -0.5), (0.6, 0.1)])
    def test_vanishes_outside_support(self, profile, order, t):
        w = WeightFunction(profile, support=2.0, bandwidth=0.25)
        assert weight_eval(w, np.array(t), MultiIndex((order, 0))) == 0.0

    @pytest.mark.parametrize("profile", ["smooth-bump", "wendland-like"])
    def test_first_derivative_matches_finite_difference(self, rng, profile):
        w = WeightFunction(profile, support=1.0, bandwidth=0.5)
        step = 1e-6
        for _ in range(20):
            t = rng.uniform(-0.3, 0.3, size=2)
            t[0] = math.copysign(max(abs(t[0]), 0.05), t[0])
            e = np.array([step, 0.0])
            fd = (weight_eval(w, t + e) - weight_eval(w, t - e)) / (2 * step)
            np.testing.assert_allclose(weight_eval(w, t, DX), fd, rtol=1e-6, atol=1e-9)

    def test_second_derivative_matches_finite_difference(self, rng):
        w = WeightFunction("smooth-bump", support=1.0, bandwidth=0.5)
        step = 1e-6
        for _ in range(10):
            t = rng.uniform(-0.25, 0.25, size=2)
            e = np.array([0.0, step])
            fd = (weight_eval(w, t + e, DX) - weight_eval(w, t - e, DX)) / (2 * step)
            np.testing.assert_allclose(weight_eval(w, t, MultiIndex((1, 1))), fd, rtol=1e-5, atol=1e-8)

    def test_vectorized_matches_scalar(self, rng):
        w = WeightFunction(bandwidth=0.4)
        t = rng.uniform(-0.5, 0.5, size=(30, 2))
        batch = weight_eval(w, t)
        np.testing.assert_allclose(batch, [weight_eval(w, ti) for ti in t])
        np.testing.assert_allclose(batch, _bump(t, 0.4))

    def test_unsupported_order(self):
        with pytest.raises(ArgumentError):
            weight_eval(WeightFunction(), [0.1], MultiIndex((5,)))


class TestScaledMonomial:
    def test_value(self):
        got = scaled_monomial(DX, [0.3, 0.7], [0.0, 0.0], 0.1)
        assert got == pytest.approx(3.0)

    def test_second_derivative_of_square(self):
        assert scaled_monomial(MultiIndex((2,)), [0.42], [0.1], 0.25, MultiIndex((2,))) == pytest.approx(2 / 0.25 ** 2)

    def test_derivative_beyond_exponent(self):
        assert scaled_monomial(MultiIndex((1, 1)), [0.3, 0.2], [0.0, 0.0], 0.1, MultiIndex((0, 2))) == 0.0


class TestGram:
    def test_degree_zero_is_mean_weight(self, rng):
        pts = rng.uniform(0.3, 0.7, size=(12, 2))
        model = _model(pts, np.zeros(12), degree=0, h=0.5)
        gram, nbrs = assemble_gram(model, [0.5, 0.5])
        assert gram.shape == (1, 1)
        assert len(nbrs) == 12
        assert gram[0, 0] == pytest.approx(np.mean(_bump(pts - 0.5, 0.5)))

    def test_symmetric_neighbors_decouple(self):
        model = _model([0.25, 0.75], np.zeros(2), degree=1, h=0.5)
        gram, _ = assemble_gram(model, [0.5])
        assert abs(gram[0, 1]) <= 1e-15
        assert gram[0, 1] == gram[1, 0]

    def test_matches_naive_summation(self, rng):
        h = 0.5
        pts = rng.uniform(0.3, 0.7, size=(40, 2))
        x_hat = np.array([0.5, 0.5])
        model = _model(pts, np.zeros(40), degree=2, h=h)
        gram, nbrs = assemble_gram(model, x_hat)
        assert nbrs == list(range(40))
        indices = enumerate_multi_indices(2, 2)
        naive = np.zeros((6, 6))
        for x in pts:
            t = x - x_hat
            theta = math.exp(1.0 / (np.dot(t, t) / h ** 2 - 1.0))
            p = np.array([np.prod(t ** np.array(a.entries)) / h ** a.order for a in indices])
            naive += theta * np.outer(p, p) / 40
        np.testing.assert_allclose(gram, naive, rtol=1e-13, atol=1e-16)

    def test_empty_neighborhood(self):
        model = _model([0.1, 0.2], np.zeros(2), degree=0, h=0.05)
        with pytest.raises(InsufficientDataError) as err:
            assemble_gram(model, [0.9])
        assert err.value.neighbor_count == 0


class TestLambdaMin:
    def test_scalar(self):
        assert lambda_min(np.array([[2.5]])) == 2.5

    def test_diagonal(self):
        assert lambda_min(np.diag([3.0, 1.0, 2.0])) == pytest.approx(1.0)

    def test_random_psd(self, rng):
        for _ in range(20):
            a = rng.standard_normal((6, 6))
            m = a @ a.T
            np.testing.assert_allclose(lambda_min(m), np.linalg.eigvalsh(m)[0], rtol=1e-9, atol=1e-12)


class TestLocalFit:
    def test_degree_zero_is_shepard(self, rng):
        pts = rng.uniform(0.2, 0.8, size=(15, 2))
        model = _model(pts, np.zeros(15), degree=0, h=0.6)
        x_hat = np.array([0.45, 0.55])
        fit = local_fit(model, x_hat)
        theta = _bump(pts[fit.neighbor_indices] - x_hat, 0.6)
        np.testing.assert_allclose(fit.shape_values, theta / theta.sum(), rtol=1e-12)
        assert fit.lambda_min == pytest.approx(np.mean(theta))

    @pytest.mark.parametrize("degree", [0, 1, 2, 3])
    def test_partition_of_unity(self, rng, degree):
        pts = rng.random((300, 2))
        model = _model(pts, np.zeros(300), degree=degree, h=0.25)
        for x_hat in rng.uniform(0.1, 0.9, size=(10, 2)):
            fit = local_fit(model, x_hat)
            assert fit.shape_values.sum() == pytest.approx(1.0, abs=1e-10)

    def test_matches_normal_equations(self):
        pts = 0.2 + 0.1 * np.arange(7)
        x_hat = 0.53
        h = 0.4
        model = _model(pts, np.zeros(7), degree=2, h=h)
        fit = local_fit(model, [x_hat])
        t = pts - x_hat
        P = np.stack([np.ones(7), t / h, (t / h) ** 2], axis=1)
        W = np.diag(_bump(t[:, None], h))
        rhs = np.array([1.0, 0.0, 0.0])
        expected = W @ P @ np.linalg.solve(P.T @ W @ P, rhs)
        np.testing.assert_allclose(fit.shape_values, expected, atol=1e-10)

    def test_collinear_neighbors_are_ill_conditioned(self):
        s = np.linspace(0.2, 0.8, 25)
        pts = np.stack([s, s], axis=1)
        model = _model(pts, np.zeros(25), degree=1, h=0.5)
        with pytest.raises(IllConditionedError) as err:
            local_fit(model, [0.5, 0.5])
        assert err.value.neighbor_count == 25
        assert err.value.lambda_min < 1e-10

    def test_ridge_fallback(self):
        s = np.linspace(0.2, 0.8, 25)
        pts = np.stack([s, s], axis=1)
        model = _model(pts, s, degree=1, h=0.5, ridge=1e-6)
        fit = local_fit(model, [0.5, 0.5])
        assert fit.ridge_used

    def test_too_few_weighted_neighbors(self):
        model = _model([0.4, 0.6], np.zeros(2), degree=2, h=0.5)
        with pytest.raises(InsufficientDataError):
            local_fit(model, [0.5])


class TestEvaluation:
    @pytest.fixture
    def cloud_2d(self, rng):
        return rng.random((400, 2))

    def test_constant_data(self, cloud_2d, rng):
        model = _model(cloud_2d, np.full(400, 7.0), degree=2, h=0.2)
        for x_hat in rng.uniform(0.0, 1.0, size=(10, 2)):
            assert mls_eval(model, x_hat) == pytest.approx(7.0, abs=1e-10)

    def test_linear_reproduction(self, cloud_2d, rng):
        values = 3.0 + 2.0 * cloud_2d[:, 0]
        for degree in (1, 2):
            model = _model(cloud_2d, values, degree=degree, h=0.2)
            for x_hat in rng.uniform(0.05, 0.95, size=(5, 2)):
                assert mls_eval(model, x_hat) == pytest.approx(3.0 + 2.0 * x_hat[0], abs=1e-9)
                assert mls_eval_derivative(model, x_hat, DX) == pytest.approx(2.0, abs=1e-8)
                assert mls_eval_derivative(model, x_hat, DY) == pytest.approx(0.0, abs=1e-8)

    def test_laplacian_of_paraboloid(self, cloud_2d):
        values = cloud_2d[:, 0] ** 2 + cloud_2d[:, 1] ** 2
        model = _model(cloud_2d, values, degree=2, h=0.2)
        Q = DifferentialOperator.laplacian(2)
        assert mls_eval_operator(model, [0.5, 0.5], Q) == pytest.approx(4.0, abs=1e-7)
        assert mls_eval_operator(model, [0.3, 0.6], Q) == pytest.approx(4.0, abs=1e-7)

    def test_identity_operator(self, cloud_2d):
        model = _model(cloud_2d, np.sin(3 * cloud_2d[:, 0]) * cloud_2d[:, 1], degree=2, h=0.2)
        x_hat = [0.4, 0.7]
        assert mls_eval_operator(model, x_hat, DifferentialOperator.identity(2)) == pytest.approx(mls_eval(model, x_hat), rel=1e-14)

    def test_operator_is_linear(self, cloud_2d):
        model = _model(cloud_2d, np.exp(cloud_2d[:, 0] - cloud_2d[:, 1]), degree=2, h=0.2)
        x_hat = [0.35, 0.6]
        Q = DifferentialOperator.parse("1,0:1;0,1:2", 2)
        expected = mls_eval_derivative(model, x_hat, DX) + 2.0 * mls_eval_derivative(model, x_hat, DY)
        np.testing.assert_allclose(mls_eval_operator(model, x_hat, Q), expected, rtol=1e-12, atol=1e-12)

    def test_derivative_matches_finite_difference(self, rng):
        pts = rng.random(500)
        model = _model(pts, np.sin(2 * np.pi * pts), degree=2, h=0.1)
        step = 1e-5
        for x in (0.1, 0.37, 0.62):
            fd = (mls_eval(model, [x + step]) - mls_eval(model, [x - step])) / (2 * step)
            np.testing.assert_allclose(mls_eval_derivative(model, [x], E1), fd, rtol=1e-4)

    def test_second_derivative_matches_finite_difference(self, rng):
        pts = rng.random(500)
        model = _model(pts, np.sin(2 * np.pi * pts), degree=3, h=0.1)
        step = 1e-5
        x = 0.2
        fd = (mls_eval_derivative(model, [x + step], E1) - mls_eval_derivative(model, [x - step], E1)) / (2 * step)
        np.testing.assert_allclose(mls_eval_derivative(model, [x], MultiIndex((2,))), fd, rtol=1e-4)

    def test_shape_derivatives_sum_to_zero(self, cloud_2d):
        model = _model(cloud_2d, np.zeros(400), degree=2, h=0.2)
        _, da = shape_function_derivatives(model, [0.5, 0.4], DX)
        assert da.sum() == pytest.approx(0.0, abs=1e-9)

    def test_refinement_reduces_error(self):
        probes = np.linspace(0.05, 0.95, 50)
        errors = []
        for n in (2000, 8000):
            pts = np.random.default_rng(n).random(n)
            model = _model(pts, np.sin(2 * np.pi * pts), degree=2)
            got = np.array([mls_eval(model, [x]) for x in probes])
            errors.append(np.max(np.abs(got - np.sin(2 * np.pi * probes))))
        assert errors[1] < errors[0]

    def test_derivative_order_above_degree(self, cloud_2d):
        model = _model(cloud_2d, np.zeros(400), degree=1, h=0.2)
        with pytest.raises(ArgumentError):
            mls_eval_derivative(model, [0.5, 0.5], MultiIndex((2, 0)))

    def test_many_marks_failures(self):
        model = _model([0.1, 0.15, 0.2, 0.25], np.ones(4), degree=0, h=0.1)
        values, failures = mls_eval_many(model, [[0.15], [0.9]])
        assert values[0] == pytest.approx(1.0)
        assert np.isnan(values[1])
        assert [i for i, _ in failures] == [1]


class TestBandwidth:
    def test_rate_rule(self):
        h = Bandwidth.rate(1.5).resolve(1024, 2)
        assert h == pytest.approx(1.5 * math.sqrt(math.log(1024) / 1024))

    def test_rate_uses_volume(self):
        assert Bandwidth.rate(1.0).resolve(100, 1, volume=2.0) == pytest.approx(2.0 * math.log(100) / 100)

    def test_model_resolves_bandwidth(self, rng):
        pts = rng.random((256, 1))
        model = _model(pts, np.zeros(256), degree=1)
        assert model.h == pytest.approx(1.5 * math.log(256) / 256)
        assert model.kernel.radius == pytest.approx(model.h)

    def test_ball_model_scales_by_volume(self, rng):
        g = rng.standard_normal((400, 2))
        pts = 0.9 * g / np.linalg.norm(g, axis=1)[:, None] * np.sqrt(rng.random(400))[:, None]
        model = MlsModel(PointCloud(pts, Domain.ball(2)), np.zeros(400), 1, bandwidth=Bandwidth.rate(1.5))
        assert model.h == pytest.approx(1.5 * math.sqrt(math.pi * math.log(400) / 400))

    def test_fixed_needs_positive_h(self):
        with pytest.raises(ArgumentError):
            Bandwidth.fixed(0.0)


class TestDifferentialOperator:
    def test_parse(self):
        Q = DifferentialOperator.parse("1,0:1;0,1:2", 2)
        assert [(a.entries, q) for a, q in Q.terms] == [((1, 0), 1.0), ((0, 1), 2.0)]
        assert Q.order == 1
        assert str(Q) == "1,0:1;0,1:2"

    def test_shortcuts(self):
        assert DifferentialOperator.parse("id", 3).order == 0
        assert DifferentialOperator.parse("laplacian", 2).order == 2
        assert DifferentialOperator.parse("d1", 2).terms[0][0].entries == (0, 1)

    def test_zero_operator_rejected(self):
        with pytest.raises(ArgumentError):
            DifferentialOperator.parse("1,0:0", 2)


def _monomial_derivative(beta, alpha, x):
    """∂^α x^β evaluado en x."""
    out = 1.0
    for b, a, xj in zip(beta.entries, alpha.entries, x):
        if a > b:
            return 0.0
        out *= math.perm(b, a) * xj ** (b - a)
    return out


def _dense(model, neighbors, values):
    out = np.zeros(len(model.cloud))
    out[neighbors] = values
    return out


REPRODUCTION_SETUP = {1: (500, 0.1), 2: (1000, 0.2), 3: (2000, 0.3)}


class TestPolynomialReproduction:
    @pytest.mark.parametrize("d", [1, 2, 3])
    @pytest.mark.parametrize("degree", [0, 1, 2, 3])
    def test_every_monomial_and_derivative(self, d, degree):
        n, h = REPRODUCTION_SETUP[d]
        rng = np.random.default_rng(100 * d + degree)
        pts = rng.random((n, d))
        model = _model(pts, np.zeros(n), degree=degree, h=h)
        monomials = enumerate_multi_indices(d, degree)
        values = np.stack([beta.power(pts) for beta in monomials], axis=1)
        for x_hat in rng.uniform(0.3, 0.7, size=(100, d)):
            for alpha in monomials:
                nbrs, da = shape_function_derivatives(model, x_hat, alpha)
                got = da @ values[nbrs]
                expected = [_monomial_derivative(beta, alpha, x_hat) for beta in monomials]
                tol = 1e-9 if alpha.order == 0 else 1e-7
                np.testing.assert_allclose(got, expected, rtol=0, atol=tol)


class TestShapeFunctions:
    def test_normalization_does_not_change_shape_values(self, rng):
        pts = rng.random((300, 2))
        raw = _model(pts, np.zeros(300), degree=2, h=0.25, normalization="raw")
        per_count = _model(pts, np.zeros(300), degree=2, h=0.25)
        for x_hat in rng.uniform(0.1, 0.9, size=(20, 2)):
            a, b = local_fit(raw, x_hat), local_fit(per_count, x_hat)
            assert a.neighbor_indices.tolist() == b.neighbor_indices.tolist()
            np.testing.assert_allclose(a.shape_values, b.shape_values, rtol=1e-10, atol=1e-13)
            np.testing.assert_allclose(a.gram, b.gram * b.neighbor_indices.size, rtol=1e-12, atol=1e-16)
            for alpha in (DX, MultiIndex((1, 1))):
                _, da = shape_function_derivatives(raw, x_hat, alpha)
                _, db = shape_function_derivatives(per_count, x_hat, alpha)
                np.testing.assert_allclose(da, db, rtol=1e-9, atol=1e-10 * np.abs(db).max())

    def test_points_outside_the_support_do_not_matter(self, rng):
        pts = rng.random((200, 2))
        x_hat = np.array([0.3, 0.3])
        values = np.sin(3 * pts[:, 0]) + pts[:, 1]
        model = _model(pts, values, degree=2, h=0.2)
        far = [i for i in range(200) if np.linalg.norm(pts[i] - x_hat) > 0.5]
        moved = pts.copy()
        moved[far[0]] = [0.95, 0.95]
        moved[far[1]] = [0.9, 0.05]
        other = _model(moved, values, degree=2, h=0.2)
        a, b = local_fit(model, x_hat), local_fit(other, x_hat)
        assert a.neighbor_indices.tolist() == b.neighbor_indices.tolist()
        assert a.shape_values.tobytes() == b.shape_values.tobytes()
        assert mls_eval(model, x_hat) == mls_eval(other, x_hat)
        assert mls_eval_derivative(model, x_hat, DY) == mls_eval_derivative(other, x_hat, DY)

    @pytest.mark.parametrize("alpha,lower,axis", [
        ((1, 0), (0, 0), 0),
        ((0, 1), (0, 0), 1),
        ((2, 0), (1, 0), 0),
        ((1, 1), (0, 1), 0),
        ((1, 1), (1, 0), 1),
        ((0, 2), (0, 1), 1),
    ])
    def test_analytic_derivatives_match_finite_differences(self, rng, alpha, lower, axis):
        pts = rng.random((600, 2))
        model = _model(pts, np.zeros(600), degree=2, h=0.2)
        alpha, lower = MultiIndex(alpha), MultiIndex(lower)
        step = 1e-5
        e = np.zeros(2)
        e[axis] = step
        for x_hat in rng.uniform(0.25, 0.75, size=(50, 2)):
            nbrs, da = shape_function_derivatives(model, x_hat, alpha)
            analytic = _dense(model, nbrs, da)
            plus = _dense(model, *shape_function_derivatives(model, x_hat + e, lower))
            minus = _dense(model, *shape_function_derivatives(model, x_hat - e, lower))
            fd = (plus - minus) / (2 * step)
            np.testing.assert_allclose(analytic, fd, rtol=0, atol=1e-4 * np.abs(analytic).max())


class TestRandomizedOracles:
    def test_gram_matches_dense_sum(self, rng):
        for _ in range(200):
            d = int(rng.integers(1, 4))
            degree = int(rng.integers(0, 3))
            n = int(rng.integers(10, 80))
            h = float(rng.uniform(0.3, 0.8))
            pts = rng.random((n, d))
            x_hat = pts[int(rng.integers(n))] + rng.uniform(-0.05, 0.05, size=d)
            model = _model(pts, np.zeros(n), degree=degree, h=h)
            gram, nbrs = assemble_gram(model, x_hat)
            t = pts - x_hat
            inside = np.flatnonzero(np.linalg.norm(t, axis=1) <= h)
            assert nbrs == inside.tolist()
            indices = enumerate_multi_indices(d, degree)
            P = np.stack([np.prod(t[inside] ** np.array(a.entries), axis=1) / h ** a.order for a in indices], axis=1)
            theta = _bump(t[inside], h)
            expected = (P.T * theta) @ P / inside.size
            np.testing.assert_allclose(gram, expected, rtol=1e-12, atol=1e-15)

    def test_local_fit_matches_normal_equations(self, rng):
        checked = 0
        for _ in range(400):
            d = int(rng.integers(1, 3))
            degree = int(rng.integers(0, 3))
            n = int(rng.integers(40, 150))
            h = float(rng.uniform(0.4, 0.7))
            pts = rng.random((n, d))
            x_hat = rng.uniform(0.3, 0.7, size=d)
            model = _model(pts, np.zeros(n), degree=degree, h=h)
            try:
                fit = local_fit(model, x_hat)
            except (IllConditionedError, InsufficientDataError):
                continue
            if fit.lambda_min < 1e-6:
                continue
            t = pts[fit.neighbor_indices] - x_hat
            indices = enumerate_multi_indices(d, degree)
            P = np.stack([np.prod(t ** np.array(a.entries), axis=1) / h ** a.order for a in indices], axis=1)
            W = _bump(t, h)
            rhs = np.zeros(len(indices))
            rhs[0] = 1.0
            expected = W * (P @ np.linalg.solve((P.T * W) @ P, rhs))
            np.testing.assert_allclose(fit.shape_values, expected, rtol=1e-8, atol=1e-10)
            assert fit.lambda_min == pytest.approx(np.linalg.eigvalsh((P.T * W) @ P / t.shape[0])[0], rel=1e-8)
            checked += 1
            if checked == 200:
                break
        assert checked == 200
