import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robustvol import corrvine
from robustvol.corrvine import CorrBounds, corr_penalty, cvine_build, cvine_build_vjp, cvine_pairwise


def partials(d):
    m = corrvine.n_partial(d)
    return st.lists(st.floats(-0.99, 0.99), min_size=m, max_size=m).map(np.array)


def test_zero_partials_give_identity():
    f = cvine_build(np.zeros(3))
    np.testing.assert_array_equal(f.L, np.eye(3))
    np.testing.assert_array_equal(cvine_pairwise(np.zeros(3)), np.eye(3))


def test_three_asset_closed_form():
    # rho23 = y23|1 sqrt((1 - rho12^2)(1 - rho13^2)) + rho12 rho13
    y12, y13, y23 = 0.3, -0.6, 0.45
    expected = y23 * np.sqrt((1 - y12 ** 2) * (1 - y13 ** 2)) + y12 * y13
    rho = cvine_build(np.array([y12, y13, y23])).rho
    assert rho[0, 1] == pytest.approx(y12, abs=1e-15)
    assert rho[0, 2] == pytest.approx(y13, abs=1e-15)
    assert rho[1, 2] == pytest.approx(expected, abs=1e-14)


def test_zero_conditional_term():
    rho = cvine_pairwise(np.array([0.5, 0.5, 0.0]))
    np.testing.assert_allclose([rho[0, 1], rho[0, 2], rho[1, 2]], [0.5, 0.5, 0.25], atol=1e-15)


def test_strong_partials_stay_positive_definite():
    rho = cvine_build(np.full(corrvine.n_partial(5), 0.9)).rho
    assert np.linalg.eigvalsh(rho).min() > 0


def test_two_assets_identity_on_single_entry():
    for y in (-0.7, 0.0, 0.123456789):
        assert cvine_pairwise(np.array([y]))[0, 1] == y


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 8).flatmap(partials))
def test_build_is_valid_correlation(y):
    f = cvine_build(y)
    rho = f.rho
    np.testing.assert_allclose(np.diag(rho), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.sum(f.L ** 2, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(rho, cvine_pairwise(y), atol=1e-12)
    assert np.all(np.diag(f.L) > 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 7).flatmap(partials))
def test_unbuild_inverts_build(y):
    back = corrvine.cvine_unbuild(cvine_build(y).rho)
    np.testing.assert_allclose(back, y, atol=1e-9)


def test_vjp_matches_finite_differences():
    rng = np.random.default_rng(3)
    d = 4
    y = rng.uniform(-0.8, 0.8, (2, corrvine.n_partial(d)))
    G = rng.standard_normal((2, d, d))
    analytic = cvine_build_vjp(y, G)
    h = 1e-6
    num = np.zeros_like(y)
    for b in range(2):
        for k in range(y.shape[1]):
            yp, ym = y.copy(), y.copy()
            yp[b, k] += h
            ym[b, k] -= h
            num[b, k] = np.sum((cvine_build(yp).L - cvine_build(ym).L)[b] * G[b]) / (2 * h)
    np.testing.assert_allclose(analytic, num, rtol=1e-6, atol=1e-8)


def test_domain_rejected():
    with pytest.raises(ValueError):
        cvine_build(np.array([1.0]))
    with pytest.raises(ValueError):
        cvine_build(np.array([np.nan, 0.0, 0.0]))
    with pytest.raises(ValueError):
        cvine_build(np.zeros(4))  # not a triangular count
    f = cvine_build(np.array([1.0]), clamp=True)
    assert np.all(np.isfinite(f.L))


def _rho2(v):
    return np.array([[1.0, v], [v, 1.0]])


def test_penalty_inside_bounds_is_zero():
    b = CorrBounds.uniform(3, -0.5, 0.5)
    rho = cvine_pairwise(np.array([0.2, -0.3, 0.1]))
    assert corr_penalty(rho, b)[()] == 0.0


def test_penalty_huber_branches():
    b = CorrBounds.uniform(2, -0.5, 0.5)
    # normalized violation v = (rho - 0.5)/1.0
    assert float(corr_penalty(_rho2(0.55), b, beta=10, delta=0.05)) == pytest.approx(0.25, rel=1e-12)
    assert float(corr_penalty(_rho2(0.60), b, beta=10, delta=0.05)) == pytest.approx(0.75, rel=1e-12)
    assert float(corr_penalty(_rho2(-0.60), b, beta=10, delta=0.05)) == pytest.approx(0.75, rel=1e-12)


def test_penalty_gradient_matches_finite_differences():
    b = CorrBounds.uniform(3, -0.2, 0.2)
    rho = cvine_pairwise(np.array([[0.5, -0.4, 0.3]]))
    val, g = corr_penalty(rho, b, with_grad=True)
    h = 1e-7
    for i, j in ((0, 1), (0, 2), (1, 2)):
        rp, rm = rho.copy(), rho.copy()
        rp[0, i, j] += h
        rm[0, i, j] -= h
        num = (corr_penalty(rp, b) - corr_penalty(rm, b))[0] / (2 * h)
        assert g[0, i, j] == pytest.approx(num, rel=1e-6, abs=1e-9)


def test_penalty_argument_checks():
    b = CorrBounds.uniform(2, -0.5, 0.5)
    with pytest.raises(ValueError):
        corr_penalty(_rho2(0.0), b, delta=0.0)
    with pytest.raises(ValueError):
        corr_penalty(_rho2(0.0), b, beta=-1.0)
    with pytest.raises(ValueError):
        CorrBounds.uniform(2, 0.5, -0.5)


def test_nearest_correlation_repairs_indefinite_matrix():
    bad = np.array([[1.0, 0.9, -0.9], [0.9, 1.0, 0.9], [-0.9, 0.9, 1.0]])
    assert np.linalg.eigvalsh(bad).min() < 0
    fixed = corrvine.nearest_correlation(bad)
    np.testing.assert_allclose(np.diag(fixed), 1.0, atol=1e-12)
    assert np.linalg.eigvalsh(fixed).min() > 0
    np.linalg.cholesky(fixed)
