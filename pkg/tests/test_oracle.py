import math

import numpy as np
import pytest
from scipy import integrate

from robustvol.model import ModelSpec
from robustvol.oracle import FdGrid, black_scholes_call, bsb1d_solve, dp_bruteforce, gauss_hermite


def call(k):
    return lambda x: np.maximum(np.asarray(x) - k, 0.0)


def spread(x):
    return np.maximum(x - 90, 0) - np.maximum(x - 110, 0)


def bs_by_integration(x, k, s, r, t):
    """Discounted call expectation by adaptive quadrature over the log-normal law."""
    def f(z):
        return max(x * math.exp((r - 0.5 * s * s) * t + s * math.sqrt(t) * z) - k, 0.0) * math.exp(-0.5 * z * z)
    zk = (math.log(k / x) - (r - 0.5 * s * s) * t) / (s * math.sqrt(t))
    val, _ = integrate.quad(f, zk, 12, epsabs=1e-13, epsrel=1e-13)
    return math.exp(-r * t) * val / math.sqrt(2 * math.pi)


def test_black_scholes_values():
    assert black_scholes_call(100, 100, 0.2, 0, 1) == pytest.approx(7.9656, abs=1e-4)
    for args in [(100, 100, 0.2, 0, 1), (90, 100, 0.3, 0.05, 2), (120, 100, 0.1, 0.01, 0.5)]:
        assert black_scholes_call(*args) == pytest.approx(bs_by_integration(*args), rel=1e-9)


def test_black_scholes_limits():
    assert black_scholes_call(110, 100, 0.2, 0, 0) == pytest.approx(10.0)
    assert black_scholes_call(90, 100, 0.0, 0, 1) == 0.0
    assert black_scholes_call(110, 100, 0.0, 0, 1) == pytest.approx(10.0)
    np.testing.assert_allclose(black_scholes_call([90, 110], 100, 1e-12, 0, 1), [0.0, 10.0], atol=1e-9)


def test_fd_constant_volatility_matches_closed_form():
    sol = bsb1d_solve(call(100), 0.2, 0.2, 0.0, 1.0)
    assert sol.value == pytest.approx(black_scholes_call(100, 100, 0.2, 0, 1), rel=1e-3)
    sol = bsb1d_solve(call(100), 0.15, 0.15, 0.03, 1.0)
    assert sol.value == pytest.approx(black_scholes_call(100, 100, 0.15, 0.03, 1), rel=1e-3)


def test_convex_payoff_takes_upper_volatility():
    sol = bsb1d_solve(call(100), 0.1, 0.2, 0.0, 1.0)
    assert sol.value == pytest.approx(black_scholes_call(100, 100, 0.2, 0, 1), rel=1e-3)


def test_concave_payoff_takes_lower_volatility():
    sol = bsb1d_solve(lambda x: -call(100)(x), 0.1, 0.2, 0.0, 1.0)
    assert sol.value == pytest.approx(-black_scholes_call(100, 100, 0.1, 0, 1), rel=1e-3)


def test_spread_lies_between_fixed_volatility_prices():
    sol = bsb1d_solve(spread, 0.1, 0.2, 0.0, 1.0)
    fixed = [black_scholes_call(100, 90, s, 0, 1) - black_scholes_call(100, 110, s, 0, 1) for s in (0.1, 0.2)]
    assert sol.value > max(fixed)
    coarse = bsb1d_solve(spread, 0.1, 0.2, 0.0, 1.0, FdGrid(space_nodes=801))
    assert abs(coarse.value - sol.value) < 5e-3


def test_stability_is_enforced():
    with pytest.raises(ValueError):
        bsb1d_solve(call(100), 0.1, 0.2, 0.0, 1.0, FdGrid(space_nodes=401, time_steps=10))
    with pytest.raises(ValueError):
        bsb1d_solve(call(100), 0.0, 0.2, 0.0, 1.0)
    with pytest.raises(ValueError):
        FdGrid(space_nodes=2)


def test_gauss_hermite_moments():
    z, w = gauss_hermite(64)
    assert w.sum() == pytest.approx(1.0, abs=1e-14)
    assert np.sum(w * z ** 2) == pytest.approx(1.0, abs=1e-13)
    assert np.sum(w * z ** 4) == pytest.approx(3.0, abs=1e-12)


def _one_action(s):
    return [(np.array([s]), np.ones((1, 1)))]


def test_dp_single_step_single_action_is_quadrature():
    spec = ModelSpec(dim=1, steps=1)
    bs = black_scholes_call(100, 100, 0.15, 0, 1)
    # a kinked integrand limits Gauss-Hermite to a few tenths of a percent at 64 nodes
    v = dp_bruteforce(spec, lambda x: call(100)(x[:, 0]), _one_action(0.15))
    assert v == pytest.approx(bs, rel=5e-3)
    v256 = dp_bruteforce(spec, lambda x: call(100)(x[:, 0]), _one_action(0.15), quadrature_nodes=256)
    assert abs(v256 - bs) < abs(v - bs)
    smooth = dp_bruteforce(spec, lambda x: x[:, 0] ** 2, _one_action(0.15))
    assert smooth == pytest.approx(1e4 * math.exp(0.15 ** 2), rel=1e-12)


def test_dp_convex_payoff_picks_upper_volatility():
    spec = ModelSpec(dim=1, steps=1)
    v = dp_bruteforce(spec, lambda x: call(100)(x[:, 0]))
    assert v == pytest.approx(dp_bruteforce(spec, lambda x: call(100)(x[:, 0]), _one_action(0.2)), rel=1e-14)


def test_dp_monotone_in_grid_and_envelope():
    spec = ModelSpec(dim=1, steps=2)
    g = lambda x: spread(x[:, 0])
    coarse = dp_bruteforce(spec, g, [(np.array([s]), np.ones((1, 1))) for s in (0.1, 0.2)])
    fine = dp_bruteforce(spec, g, [(np.array([s]), np.ones((1, 1))) for s in (0.1, 0.15, 0.2)])
    assert fine >= coarse - 1e-12
    for s in (0.1, 0.13, 0.2):
        assert coarse >= dp_bruteforce(spec, g, _one_action(s)) - 1e-12


def test_dp_matches_two_period_finite_differences():
    spec = ModelSpec(dim=1, steps=2)
    dp = dp_bruteforce(spec, lambda x: spread(x[:, 0]))
    fd = bsb1d_solve(spread, 0.1, 0.2, 0.0, 1.0, control_steps=2).value
    assert dp == pytest.approx(fd, rel=5e-3)


def test_dp_two_assets_fixed_action_matches_closed_form():
    # a geometric mean of two independent log-normals is log-normal with volatility s/sqrt(2)
    spec = ModelSpec(dim=2, steps=1)
    act = [(np.array([0.2, 0.2]), np.eye(2))]
    v = dp_bruteforce(spec, lambda x: call(100)(np.sqrt(x[:, 0] * x[:, 1])), act)
    s = 0.2 / math.sqrt(2)
    forward = 100 * math.exp(-0.5 * 0.04 + 0.5 * s * s)
    assert v == pytest.approx(black_scholes_call(forward, 100, s, 0, 1), rel=5e-3)


def test_dp_limits():
    with pytest.raises(ValueError):
        dp_bruteforce(ModelSpec(dim=3, steps=1), lambda x: x[:, 0])
    with pytest.raises(ValueError):
        dp_bruteforce(ModelSpec(dim=1, steps=4), lambda x: x[:, 0])
