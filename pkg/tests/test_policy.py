import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robustvol.corrvine import CorrBounds
from robustvol.model import ModelSpec
from robustvol.neural import init_mlp
from robustvol.policy import (
    BangBangAction, BernoulliPolicy, ContinuousAction, GaussianPolicy, bangbang_controls, bernoulli_entropy,
    bernoulli_entropy_grad, bernoulli_log_density, bernoulli_ratio, bernoulli_sample, gaussian_log_density,
    gaussian_ppo_ratio, gaussian_sample, latent_dim, n_bits, policy_from_bytes, policy_to_bytes, sigmoid,
    squash_map, squash_unmap,
)


def uncertain(d, lo=-1.0, hi=1.0):
    return ModelSpec(dim=d, corr_mode="uncertain", corr_bounds=CorrBounds.uniform(d, lo, hi))


def test_latent_and_bit_counts():
    assert latent_dim(ModelSpec(dim=3)) == 3
    assert latent_dim(uncertain(3)) == 6
    assert latent_dim(uncertain(2)) == 3
    assert n_bits(ModelSpec(dim=4)) == 4
    assert n_bits(uncertain(2)) == 3
    with pytest.raises(ValueError):
        n_bits(uncertain(3))


def test_zero_latent_gives_midpoint_and_identity():
    a = squash_map(np.zeros(6), uncertain(3))
    np.testing.assert_allclose(a.sigma, 0.15)
    np.testing.assert_allclose(a.rho[0], np.eye(3), atol=1e-15)


def test_large_latent_approaches_upper_bound():
    a = squash_map(np.array([40.0]), ModelSpec(dim=1))
    assert a.sigma[0, 0] == pytest.approx(0.2, abs=1e-15)
    assert a.sigma[0, 0] <= 0.2


def test_two_asset_unmap_example():
    spec = uncertain(2)
    r = math.tanh(1.0)
    L = np.array([[[1.0, 0.0], [r, math.sqrt(1 - r * r)]]])
    from robustvol.corrvine import CorrFactor
    act = ContinuousAction(np.array([[0.15, 0.15]]), CorrFactor(L), None)
    np.testing.assert_allclose(squash_unmap(act, spec), [[0.0, 0.0, 1.0]], atol=1e-12)


def test_two_asset_correlation_respects_bounds():
    spec = uncertain(2, -0.5, 0.5)
    a = squash_map(np.array([[0.0, 0.0, 50.0], [0.0, 0.0, -50.0]]), spec)
    np.testing.assert_allclose(a.rho[:, 0, 1], [0.5, -0.5])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=6, max_size=6))
def test_squash_round_trip(z):
    z = np.array([z])
    spec = uncertain(3)
    np.testing.assert_allclose(squash_unmap(squash_map(z, spec), spec), z, atol=1e-8)


def test_unmap_rejects_boundary():
    spec = ModelSpec(dim=1)
    from robustvol.corrvine import CorrFactor
    with pytest.raises(ValueError):
        squash_unmap(ContinuousAction(np.array([[0.2]]), CorrFactor(np.ones((1, 1))), None), spec)


def test_ppo_ratio_examples():
    assert gaussian_ppo_ratio([1.0], [0.0], [0.5], 1.0) == pytest.approx(1.0)
    rng = np.random.default_rng(0)
    m = rng.standard_normal((5, 4))
    np.testing.assert_array_equal(gaussian_ppo_ratio(m, m, rng.standard_normal((5, 4)), 0.3), 1.0)
    with pytest.raises(ValueError):
        gaussian_ppo_ratio(m, m, m, 0.0)


def test_ppo_ratio_equals_density_quotient():
    rng = np.random.default_rng(1)
    mn, mo, z = rng.standard_normal((3, 100, 3))
    lam = 0.4
    direct = np.exp(gaussian_log_density(z, mn, lam) - gaussian_log_density(z, mo, lam))
    np.testing.assert_allclose(gaussian_ppo_ratio(mn, mo, z, lam), direct, rtol=1e-10)


def _gaussian_policy(spec, temperature, seed=0):
    net = init_mlp(spec.dim, latent_dim(spec), 8, np.random.default_rng(seed))
    return GaussianPolicy(spec, net, temperature)


def test_gaussian_sample_moments_and_reproducibility():
    spec = ModelSpec(dim=2)
    pol = _gaussian_policy(spec, 0.5)
    x = np.full((100_000, 2), 105.0)
    m = pol.mean(x[:1])[0]
    rng = np.random.default_rng(7)
    z = m + math.sqrt(0.5) * rng.standard_normal((100_000, 2))
    se = z.std(0) / math.sqrt(len(z))
    assert np.all(np.abs(z.mean(0) - m) < 4 * se)
    a1 = gaussian_sample(pol, x[:10], np.random.default_rng(3))
    a2 = gaussian_sample(pol, x[:10], np.random.default_rng(3))
    np.testing.assert_array_equal(a1.sigma, a2.sigma)


def test_small_temperature_matches_deterministic():
    spec = uncertain(3)
    pol = _gaussian_policy(spec, 1e-14)
    x = np.array([[90.0, 100.0, 110.0]])
    a = gaussian_sample(pol, x, np.random.default_rng(0))
    b = pol.deterministic(x)
    np.testing.assert_allclose(a.sigma, b.sigma, atol=1e-8)
    np.testing.assert_allclose(a.rho, b.rho, atol=1e-8)


def test_bernoulli_density_examples():
    assert bernoulli_log_density(np.full(4, 0.5), np.array([1, 0, 1, 1.0])) == pytest.approx(-4 * math.log(2))
    assert bernoulli_log_density(np.array([0.3]), np.array([1.0])) == pytest.approx(math.log(0.3))


@pytest.mark.parametrize("d", [1, 4, 8])
def test_bernoulli_entropy_by_enumeration(d):
    q = np.random.default_rng(d).uniform(0.05, 0.95, d)
    bits = np.array(list(itertools.product((0.0, 1.0), repeat=d)))
    p = np.exp(bernoulli_log_density(np.broadcast_to(q, bits.shape), bits))
    assert math.fsum(p) == pytest.approx(1.0, abs=1e-12)
    assert bernoulli_entropy(q) == pytest.approx(-np.sum(p * np.log(p)), rel=1e-12)


def test_bernoulli_entropy_limits():
    assert bernoulli_entropy(np.full(3, 0.5)) == pytest.approx(3 * math.log(2))
    assert bernoulli_entropy(np.full(3, 1 - 1e-9)) < 1e-4


def test_entropy_gradient_matches_finite_differences():
    logits = np.array([-2.0, -0.3, 0.0, 1.7])
    h = 1e-6
    num = (bernoulli_entropy(sigmoid(logits + h)[:, None]) - bernoulli_entropy(sigmoid(logits - h)[:, None])) / (2 * h)
    np.testing.assert_allclose(bernoulli_entropy_grad(sigmoid(logits)), num, rtol=1e-6, atol=1e-10)


def test_bernoulli_ratio_is_one_at_old_probabilities():
    q = np.random.default_rng(0).uniform(0.1, 0.9, (20, 3))
    bits = (q > 0.5).astype(float)
    np.testing.assert_array_equal(bernoulli_ratio(q, q, bits), 1.0)


def test_bernoulli_sampling_frequencies():
    spec = ModelSpec(dim=2)
    net = init_mlp(2, 2, 4, np.random.default_rng(0))
    pol = BernoulliPolicy(spec, net)
    q = np.tile([0.3, 0.7], (100_000, 1))
    a = bernoulli_sample(pol, None, np.random.default_rng(5), q=q)
    se = np.sqrt(q[0] * (1 - q[0]) / len(q))
    assert np.all(np.abs(a.bits.mean(0) - q[0]) < 4 * se)
    b = bernoulli_sample(pol, None, np.random.default_rng(5), q=q[:50])
    c = bernoulli_sample(pol, None, np.random.default_rng(5), q=q[:50])
    np.testing.assert_array_equal(b.bits, c.bits)


def test_bangbang_threshold_and_controls():
    spec = uncertain(2, -0.5, 0.5)
    net = init_mlp(2, 3, 4, np.random.default_rng(0))
    net.W2[:] = 0.0
    net.b2[:] = np.log(np.array([0.49, 0.51, 0.7]) / (1 - np.array([0.49, 0.51, 0.7])))
    pol = BernoulliPolicy(spec, net)
    act = pol.deterministic(np.array([[100.0, 100.0]]))
    np.testing.assert_array_equal(act.bits, [[0, 1, 1]])
    sigma, L = bangbang_controls(act.bits, spec)
    np.testing.assert_allclose(sigma, [[0.1, 0.2]])
    assert (L[0] @ L[0].T)[0, 1] == pytest.approx(0.5)
    with pytest.raises(ValueError):
        BangBangAction(np.array([[0.5]]))


def test_policy_checkpoint_round_trip():
    spec = uncertain(3)
    pol = _gaussian_policy(spec, 0.25)
    back = policy_from_bytes(policy_to_bytes(pol), spec)
    assert isinstance(back, GaussianPolicy) and back.temperature == 0.25
    x = np.array([[95.0, 100.0, 105.0]])
    np.testing.assert_array_equal(back.mean(x), pol.mean(x))
    with pytest.raises(ValueError):
        policy_from_bytes(policy_to_bytes(pol), ModelSpec(dim=2))
