import numpy as np
import pytest
from math import comb
from scipy import integrate
from scipy.interpolate import BSpline

from painmkl import bspline
from painmkl.bspline import LambdaPolicy, PenalizedSmoother, build_basis, eval_basis, smooth


def test_default_basis_layout():
    b = build_basis(4, 10, 0.0, 20.0)
    assert b.n_intervals == 7
    assert len(b.interior_knots) == 6
    assert b.n_coeffs == b.order + b.n_intervals - 1
    np.testing.assert_allclose(b.interior_knots, np.linspace(0, 20, 8)[1:-1])
    assert b.knots[:4] == (0.0,) * 4 and b.knots[-4:] == (20.0,) * 4


def test_constant_basis():
    b = build_basis(1, 1, 0.0, 1.0)
    np.testing.assert_array_equal(eval_basis(b, np.linspace(0, 1, 11)), np.ones((11, 1)))


def test_single_segment_is_bernstein():
    b = build_basis(4, 4, 0.0, 1.0)
    u = np.linspace(0, 1, 101)
    bern = np.stack([comb(3, k) * u**k * (1 - u) ** (3 - k) for k in range(4)], axis=1)
    np.testing.assert_allclose(eval_basis(b, u), bern, atol=1e-14)


def test_bernstein_midpoint():
    b = build_basis(4, 4, 0.0, 1.0)
    np.testing.assert_allclose(eval_basis(b, [0.5])[0], [0.125, 0.375, 0.375, 0.125], atol=1e-15)


def test_matches_scipy_bspline(rng):
    b = build_basis(4, 10, 0.0, 20.0)
    t = np.sort(rng.uniform(0, 20, 200))
    ours = eval_basis(b, t)
    for k in range(10):
        ref = BSpline.basis_element(b.knots[k : k + 5], extrapolate=False)(t)
        np.testing.assert_allclose(ours[:, k], np.nan_to_num(ref), atol=1e-12)


def test_partition_of_unity_and_support(rng):
    b = build_basis(4, 10, 0.0, 20.0)
    t = rng.uniform(0, 20, 1000)
    B = eval_basis(b, t)
    assert np.max(np.abs(B.sum(axis=1) - 1)) < 1e-10
    assert B.min() >= 0
    width = 20.0 / b.n_intervals
    for k in range(10):
        on = t[B[:, k] > 0]
        assert on.max() - on.min() <= b.order * width + 1e-9


def test_clamped_endpoints():
    b = build_basis(4, 10, 0.0, 20.0)
    B = eval_basis(b, [0.0, 20.0])
    np.testing.assert_allclose(B[0], np.eye(10)[0], atol=1e-15)
    np.testing.assert_allclose(B[1], np.eye(10)[-1], atol=1e-15)


def test_domain_errors():
    b = build_basis()
    with pytest.raises(ValueError):
        eval_basis(b, [-0.1])
    with pytest.raises(ValueError):
        build_basis(4, 3)
    with pytest.raises(ValueError):
        build_basis(4, 10, 1.0, 1.0)


def greville(b):
    k = np.asarray(b.knots)
    return np.array([k[j + 1 : j + b.order].mean() for j in range(b.n_coeffs)])


def test_roughness_null_space():
    b = build_basis(4, 10, 0.0, 20.0)
    R = bspline.roughness_matrix(b)
    np.testing.assert_allclose(R, R.T, atol=1e-12)
    assert np.linalg.eigvalsh(R).min() > -1e-10 * np.abs(R).max()
    ones = np.ones(10)
    assert abs(ones @ R @ ones) < 1e-10
    line = greville(b)  # coefficients of s(t) = t
    np.testing.assert_allclose(eval_basis(b, np.linspace(0, 20, 50)) @ line, np.linspace(0, 20, 50), atol=1e-12)
    assert abs(line @ R @ line) < 1e-10


def test_roughness_of_parabola():
    b = build_basis(4, 10, 0.0, 1.0)
    u = np.linspace(0, 1, 200)
    c, *_ = np.linalg.lstsq(eval_basis(b, u), u**2, rcond=None)
    assert c @ bspline.roughness_matrix(b) @ c == pytest.approx(4.0, abs=1e-8)


def test_roughness_against_quadrature():
    b = build_basis(4, 8, 0.0, 5.0)
    R = bspline.roughness_matrix(b)
    d2 = [BSpline(np.asarray(b.knots), np.eye(8)[k], 3).derivative(2) for k in range(8)]
    breaks = np.unique(b.knots)
    for j in (0, 2, 5):
        for k in (j, j + 1, 7):
            f = lambda x: d2[j](x) * d2[k](x)
            ref = sum(integrate.quad(f, lo, hi)[0] for lo, hi in zip(breaks[:-1], breaks[1:]))
            assert R[j, k] == pytest.approx(ref, rel=1e-9, abs=1e-12)


def test_roughness_needs_cubic_or_higher():
    with pytest.raises(ValueError):
        bspline.roughness_matrix(build_basis(2, 5))


T = np.linspace(0, 20, 500)


@pytest.mark.parametrize("lam", [0.0, 1e-3, 1.0, 1e4])
def test_constant_data_fits_exactly(lam):
    fit = smooth(build_basis(), np.full(500, 3.0), T, lam)
    np.testing.assert_allclose(eval_basis(build_basis(), T) @ fit.coefficients, 3.0, atol=1e-9)
    assert fit.sse < 1e-18 and fit.gcv < 1e-18


def test_cubic_reproduced_at_zero_lambda():
    w = 0.002 * T**3 - 0.05 * T**2 + T
    fit = smooth(build_basis(), w, T, 0.0)
    assert fit.sse < 1e-9 * (w @ w)
    assert fit.df == pytest.approx(10, abs=1e-8)


def test_huge_lambda_gives_straight_line(rng):
    w = 0.3 * T + 1 + rng.standard_normal(500)
    fit = smooth(build_basis(), w, T, 1e12)
    slope, intercept = np.polyfit(T, w, 1)
    fitted = eval_basis(build_basis(), T) @ fit.coefficients
    np.testing.assert_allclose(fitted, slope * T + intercept, atol=1e-3)
    assert fit.df == pytest.approx(2.0, abs=0.01)


def test_fit_fields_match_direct_formulas(rng):
    b = build_basis()
    w = np.sin(T / 3) + 0.3 * rng.standard_normal(500)
    Phi, R = eval_basis(b, T), bspline.roughness_matrix(b)
    for lam in (0.0, 0.01, 10.0):
        fit = smooth(b, w, T, lam)
        A = Phi.T @ Phi + lam * R
        c = np.linalg.solve(A, Phi.T @ w)
        H = Phi @ np.linalg.solve(A, Phi.T)
        np.testing.assert_allclose(fit.coefficients, c, rtol=1e-8, atol=1e-10)
        resid = w - Phi @ fit.coefficients
        assert fit.sse == pytest.approx(resid @ resid, rel=1e-8)
        assert fit.df == pytest.approx(np.trace(H), abs=1e-8)
        assert fit.gcv == pytest.approx(500 / (500 - fit.df) * fit.sse / (500 - fit.df), rel=1e-10)


def test_df_two_routes_agree_and_decrease():
    b = build_basis()
    sm = PenalizedSmoother(b, T)
    grid = [0.0] + [10.0**k for k in range(-6, 13)]
    dfs = [smooth(b, np.zeros(500), T, lam).df for lam in grid]
    for lam, df in zip(grid, dfs):
        assert sm.df(lam) == pytest.approx(df, abs=1e-8)
    assert all(a >= b_ - 1e-12 for a, b_ in zip(dfs, dfs[1:]))
    assert dfs[0] == pytest.approx(10, abs=0.01) and dfs[-1] == pytest.approx(2, abs=0.01)


def test_singular_system_and_infinite_gcv():
    b = build_basis()
    t = np.linspace(0, 20, 8)
    with pytest.raises(np.linalg.LinAlgError):
        smooth(b, np.ones(8), t, 0.0)
    t10 = np.linspace(0, 20, 10)
    fit = smooth(b, np.sin(t10), t10, 0.0)
    assert fit.gcv == np.inf
    with pytest.raises(ValueError):
        bspline.select_lambda(b, np.sin(t10), t10, [0.0])


def test_noiseless_signal_selection():
    b = build_basis()
    w = 0.002 * T**3 - 0.05 * T**2 + T
    grid = bspline.DEFAULT_LAMBDA_GRID
    lam, fit = bspline.select_lambda(b, w, T, grid)
    gcv = np.array([smooth(b, w, T, g).gcv for g in grid])
    tied = gcv <= gcv.min() + 1e-12 * max(1.0, gcv.min())
    assert lam == max(np.asarray(grid)[tied])
    assert fit.sse < 1e-9 * (w @ w)


def test_white_noise_is_smoothed(rng):
    b = build_basis()
    w = rng.standard_normal(500)
    lam, fit = bspline.select_lambda(b, w, T)
    gcv = [smooth(b, w, T, g).gcv for g in bspline.DEFAULT_LAMBDA_GRID]
    assert fit.gcv == pytest.approx(min(gcv), rel=1e-12)
    assert fit.df < 10


def test_gcv_tie_goes_to_larger_lambda():
    lam, _ = bspline.select_lambda(build_basis(), np.full(500, 2.0), T, [0.0, 1e-3, 5.0, 1.0])
    assert lam == 5.0
    assert bspline._pick(np.array([1.0, 1.0 + 1e-13, 2.0]), np.array([1.0, 10.0, 100.0])) == 1
    assert bspline._pick(np.array([1.0, 1.0 + 1e-9, 2.0]), np.array([1.0, 10.0, 100.0])) == 0


def test_batch_gcv_matches_scalar_selection(rng):
    b = build_basis()
    Y = np.cumsum(rng.standard_normal((5, 500)), axis=1) * 0.1 + rng.standard_normal((5, 500))
    coef, lams = PenalizedSmoother(b, T).fit_gcv(Y)
    for y, c, lam in zip(Y, coef, lams):
        lam_ref, fit = bspline.select_lambda(b, y, T)
        assert lam == lam_ref
        np.testing.assert_allclose(c, fit.coefficients, rtol=1e-7, atol=1e-9)


def test_spline_features_shape_and_linearity(rng):
    b = build_basis()
    window = rng.standard_normal((24, 500))
    F = bspline.spline_features(b, window)
    assert F.shape == (24, 10)
    np.testing.assert_array_equal(bspline.spline_features(b, np.zeros((24, 500))), 0.0)
    np.testing.assert_allclose(bspline.spline_features(b, 2 * window), 2 * F, rtol=1e-12, atol=1e-14)
    pol = LambdaPolicy(fixed=0.5)
    w2 = rng.standard_normal((24, 500))
    lhs = bspline.spline_features(b, 1.5 * window - 3 * w2, pol)
    rhs = 1.5 * bspline.spline_features(b, window, pol) - 3 * bspline.spline_features(b, w2, pol)
    assert np.linalg.norm(lhs - rhs) <= 1e-8 * np.linalg.norm(lhs)
