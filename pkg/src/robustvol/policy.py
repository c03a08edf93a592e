"""Stochastic policies over volatility/correlation controls.

Two families:

* ``GaussianPolicy``: a network outputs the mean of a Gaussian latent with
  isotropic variance ``temperature``; the latent is squashed onto the open
  control set (scaled tanh for volatilities, C-vine for correlations).
* ``BernoulliPolicy``: a network outputs logits of independent bits, each
  choosing the lower or upper volatility bound (and, for two assets with
  uncertain correlation, one extra bit for the correlation bound).

Both produce a control ``(sigma, L)`` consumed by :func:`dynamics.log_euler_step`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import corrvine
from .corrvine import CorrFactor
from .dynamics import state_features
from .model import ModelSpec
from .neural import MlpParams, forward, params_from_bytes, params_to_bytes

__all__ = [
    "ModelSpec", "ContinuousAction", "BangBangAction", "GaussianPolicy", "BernoulliPolicy",
    "latent_dim", "n_bits", "squash_map", "squash_unmap", "gaussian_sample", "gaussian_ppo_ratio",
    "bernoulli_sample", "bernoulli_log_density", "bernoulli_entropy", "deterministic_action",
]

Q_CLAMP = 1e-6
BOUNDARY_TOL = 1e-12   # unmap treats values this close to a bound as on it


def latent_dim(spec: ModelSpec) -> int:
    d = spec.dim
    return d * (d + 1) // 2 if spec.uncertain else d


def n_bits(spec: ModelSpec) -> int:
    if spec.uncertain:
        if spec.dim == 2:
            return 3
        raise ValueError("bang-bang policies with uncertain correlation are only defined for d <= 2")
    return spec.dim


@dataclass
class ContinuousAction:
    sigma: np.ndarray       # (batch, d)
    factor: CorrFactor      # L of shape (d, d) when shared, else (batch, d, d)
    latent: np.ndarray      # (batch, latent_dim)

    @property
    def rho(self) -> np.ndarray:
        return self.factor.rho


@dataclass
class BangBangAction:
    bits: np.ndarray        # (batch, n_bits) of 0/1

    def __post_init__(self):
        if not np.all((self.bits == 0) | (self.bits == 1)):
            raise ValueError("bang-bang bits must be 0 or 1")


def _two_asset_factor(rho12: np.ndarray) -> np.ndarray:
    L = np.zeros(rho12.shape + (2, 2))
    L[..., 0, 0] = 1.0
    L[..., 1, 0] = rho12
    L[..., 1, 1] = np.sqrt(1.0 - rho12 * rho12)
    return L


def _pair_bounds(spec: ModelSpec) -> tuple[float, float]:
    return float(spec.corr_bounds.lower[0, 1]), float(spec.corr_bounds.upper[0, 1])


def squash_map(z, spec: ModelSpec) -> ContinuousAction:
    """Latent vector(s) to a control in the open set.

    ``z[..., :d]`` drive the volatilities through ``mid + half * tanh``; the
    remaining entries become partial correlations (C-vine) for ``d >= 3``, or
    the single correlation rescaled into its bounds for ``d = 2``.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    d = spec.dim
    if z.shape[-1] != latent_dim(spec):
        raise ValueError(f"latent must have length {latent_dim(spec)}")
    mid = 0.5 * (spec.vol_hi + spec.vol_lo)
    half = 0.5 * (spec.vol_hi - spec.vol_lo)
    sigma = mid + half * np.tanh(z[:, :d])
    if not spec.uncertain:
        L = spec.fixed_factor if d > 1 else np.ones((1, 1))
    elif d == 2:
        lo, hi = _pair_bounds(spec)
        rho12 = 0.5 * (hi + lo) + 0.5 * (hi - lo) * np.tanh(z[:, 2])
        L = _two_asset_factor(np.clip(rho12, -corrvine.SQUASH_LIMIT, corrvine.SQUASH_LIMIT))
    else:
        L = corrvine.cvine_build(np.tanh(z[:, d:]), clamp=True).L
    return ContinuousAction(sigma, CorrFactor(L), z)


def squash_unmap(action: ContinuousAction, spec: ModelSpec) -> np.ndarray:
    """Inverse of :func:`squash_map` on its range; boundary values are rejected."""
    d = spec.dim
    sigma = np.atleast_2d(action.sigma)
    mid = 0.5 * (spec.vol_hi + spec.vol_lo)
    half = 0.5 * (spec.vol_hi - spec.vol_lo)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(half > 0, (sigma - mid) / np.where(half > 0, half, 1.0), 0.0)
    if np.any(np.abs(u) >= 1 - BOUNDARY_TOL):
        raise ValueError("volatility on or outside its bounds has no latent preimage")
    parts = [np.arctanh(u)]
    if spec.uncertain:
        rho = np.asarray(action.rho)
        if rho.ndim == 2:
            rho = np.broadcast_to(rho, (sigma.shape[0], d, d))
        if d == 2:
            lo, hi = _pair_bounds(spec)
            v = (rho[:, 0, 1] - 0.5 * (hi + lo)) / (0.5 * (hi - lo))
            if np.any(np.abs(v) >= 1 - BOUNDARY_TOL):
                raise ValueError("correlation on or outside its bounds has no latent preimage")
            parts.append(np.arctanh(v)[:, None])
        else:
            y = corrvine.cvine_unbuild(rho)
            if np.any(np.abs(y) >= 1):
                raise ValueError("partial correlation of modulus 1 has no latent preimage")
            parts.append(np.arctanh(y))
    return np.concatenate(parts, axis=1)


def bangbang_controls(bits: np.ndarray, spec: ModelSpec) -> tuple[np.ndarray, np.ndarray]:
    bits = np.atleast_2d(bits)
    d = spec.dim
    sigma = spec.vol_lo + bits[:, :d] * (spec.vol_hi - spec.vol_lo)
    if spec.uncertain:
        lo, hi = _pair_bounds(spec)
        L = _two_asset_factor(lo + bits[:, 2] * (hi - lo))
    else:
        L = spec.fixed_factor if d > 1 else np.ones((1, 1))
    return sigma, L


def action_controls(action, spec: ModelSpec) -> tuple[np.ndarray, np.ndarray]:
    """``(sigma, L)`` for either action type."""
    if isinstance(action, BangBangAction):
        return bangbang_controls(action.bits, spec)
    return action.sigma, action.factor.L


# -- Gaussian family -----------------------------------------------------------

class GaussianPolicy:
    family = "continuous"

    def __init__(self, spec: ModelSpec, net: MlpParams, temperature: float = 1.0):
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        self.spec = spec
        self.net = net
        self.temperature = float(temperature)

    @property
    def out_dim(self) -> int:
        return latent_dim(self.spec)

    def mean(self, x: np.ndarray) -> np.ndarray:
        return forward(self.net, state_features(x, self.spec))

    def sample(self, x: np.ndarray, rng) -> ContinuousAction:
        return gaussian_sample(self, x, rng)

    def deterministic(self, x: np.ndarray) -> ContinuousAction:
        return squash_map(self.mean(x), self.spec)

    def controls(self, x: np.ndarray):
        a = self.deterministic(x)
        return a.sigma, a.factor.L


def gaussian_sample(policy: GaussianPolicy, x: np.ndarray, rng, mean: np.ndarray | None = None) -> ContinuousAction:
    m = policy.mean(x) if mean is None else mean
    z = m + np.sqrt(policy.temperature) * rng.standard_normal(m.shape)
    return squash_map(z, policy.spec)


def gaussian_log_density(z, mean, lam: float) -> np.ndarray:
    """Log density of ``N(mean, lam I)`` at ``z`` (latent space)."""
    z = np.atleast_2d(z)
    k = z.shape[-1]
    r = z - mean
    return -0.5 * np.sum(r * r, axis=-1) / lam - 0.5 * k * np.log(2 * np.pi * lam)


def gaussian_ppo_ratio(new_mean, old_mean, latent, lam: float) -> np.ndarray:
    """Likelihood ratio of two isotropic Gaussians sharing the variance ``lam``.

    The Jacobian of the squashing map is common to both densities and
    cancels, leaving ``exp[(m_new - m_old) . (z - (m_new + m_old)/2) / lam]``.
    """
    if lam <= 0:
        raise ValueError("temperature must be positive")
    new_mean = np.asarray(new_mean, dtype=float)
    old_mean = np.asarray(old_mean, dtype=float)
    diff = new_mean - old_mean
    return np.exp(np.sum(diff * (np.asarray(latent) - 0.5 * (new_mean + old_mean)), axis=-1) / lam)


def gaussian_score(latent, mean, lam: float) -> np.ndarray:
    """Gradient of the log density with respect to the mean."""
    return (np.asarray(latent) - mean) / lam


# -- Bernoulli family ------------------------------------------------------------

def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


def clamp_q(q):
    return np.clip(q, Q_CLAMP, 1.0 - Q_CLAMP)


class BernoulliPolicy:
    family = "bangbang"

    def __init__(self, spec: ModelSpec, net: MlpParams):
        self.spec = spec
        self.net = net

    @property
    def out_dim(self) -> int:
        return n_bits(self.spec)

    def logits(self, x: np.ndarray) -> np.ndarray:
        out = forward(self.net, state_features(x, self.spec))
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("non-finite Bernoulli logits")
        return out

    def probs(self, x: np.ndarray) -> np.ndarray:
        return clamp_q(sigmoid(self.logits(x)))

    def sample(self, x: np.ndarray, rng) -> BangBangAction:
        return bernoulli_sample(self, x, rng)

    def deterministic(self, x: np.ndarray) -> BangBangAction:
        return BangBangAction((self.probs(x) >= 0.5).astype(float))

    def controls(self, x: np.ndarray):
        return bangbang_controls(self.deterministic(x).bits, self.spec)


def bernoulli_sample(policy: BernoulliPolicy, x: np.ndarray, rng, q: np.ndarray | None = None) -> BangBangAction:
    q = policy.probs(x) if q is None else q
    return BangBangAction((rng.random(q.shape) < q).astype(float))


def bernoulli_log_density(q, a) -> np.ndarray:
    q = clamp_q(np.asarray(q, dtype=float))
    bits = a.bits if isinstance(a, BangBangAction) else np.asarray(a, dtype=float)
    return np.sum(bits * np.log(q) + (1 - bits) * np.log1p(-q), axis=-1)


def bernoulli_entropy(q) -> np.ndarray:
    q = clamp_q(np.asarray(q, dtype=float))
    return np.sum(-q * np.log(q) - (1 - q) * np.log1p(-q), axis=-1)


def bernoulli_ratio(q_new, q_old, bits) -> np.ndarray:
    return np.exp(bernoulli_log_density(q_new, bits) - bernoulli_log_density(q_old, bits))


def bernoulli_score(q, bits) -> np.ndarray:
    """Gradient of the log density with respect to the logits (zero where clamped)."""
    q = np.asarray(q, dtype=float)
    live = (q > Q_CLAMP) & (q < 1 - Q_CLAMP)
    return (np.asarray(bits) - q) * live


def bernoulli_entropy_grad(q) -> np.ndarray:
    """Gradient of the entropy with respect to the logits (zero where clamped)."""
    q = np.asarray(q, dtype=float)
    live = (q > Q_CLAMP) & (q < 1 - Q_CLAMP)
    qc = clamp_q(q)
    return qc * (1 - qc) * np.log((1 - qc) / qc) * live


def deterministic_action(policy, x: np.ndarray, spec: ModelSpec | None = None):
    return policy.deterministic(x)


# -- checkpoints -------------------------------------------------------------------

def policy_to_bytes(policy) -> bytes:
    meta = {"family": policy.family, "out_dim": policy.out_dim, "dim": policy.spec.dim}
    if isinstance(policy, GaussianPolicy):
        meta["temperature"] = policy.temperature
    return params_to_bytes(policy.net, meta)


def policy_from_bytes(blob: bytes, spec: ModelSpec):
    net, meta = params_from_bytes(blob)
    if meta.get("dim") != spec.dim:
        raise ValueError("checkpoint dimension does not match the model")
    if meta.get("family") == "continuous":
        return GaussianPolicy(spec, net, meta.get("temperature", 1.0))
    if meta.get("family") == "bangbang":
        return BernoulliPolicy(spec, net)
    raise ValueError(f"unknown policy family {meta.get('family')!r}")
