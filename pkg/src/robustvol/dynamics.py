"""Controlled market simulation.

States are float arrays of shape ``(batch, d)``; path-dependent payoffs
append two columns ``(A1, A2)``: the running sum of squared monthly log
returns and the asset value at the last monitoring date.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelSpec

MONTHS_PER_YEAR = 12


@dataclass
class GaussianBatch:
    draws: np.ndarray
    antithetic: bool = False

    def __post_init__(self):
        if self.antithetic:
            b = self.draws.shape[0]
            if b % 2 or not np.array_equal(self.draws[b // 2:], -self.draws[: b // 2]):
                raise ValueError("antithetic batch must be (xi, -xi) halves")

    @property
    def halves(self) -> tuple[np.ndarray, np.ndarray]:
        b = self.draws.shape[0] // 2
        return self.draws[:b], self.draws[b:]


def draw_increments(batch: int, d: int, rng) -> GaussianBatch:
    if batch % 2:
        raise ValueError("antithetic batches need an even size")
    half = rng.standard_normal((batch // 2, d))
    return GaussianBatch(np.concatenate([half, -half]), antithetic=True)


def correlate(xi: np.ndarray, L) -> np.ndarray:
    """``L @ xi`` per row; ``L`` is None (identity), shared ``(d, d)`` or ``(batch, d, d)``."""
    if L is None:
        return xi
    L = np.asarray(L)
    if L.ndim == 2:
        return xi @ L.T
    return np.einsum("bij,bj->bi", L, xi)


def _row_sq_norms(L, d: int) -> np.ndarray:
    if L is None:
        return np.ones(d)
    return np.sum(np.asarray(L) ** 2, axis=-1)


def log_euler_step(x: np.ndarray, sigma: np.ndarray, L, xi, spec: ModelSpec) -> np.ndarray:
    """``x * exp((r - diag(a a^T)/2) dt + a sqrt(dt) xi)`` with ``a = diag(sigma) L``.

    Only the first ``d`` columns move; augmentation columns are carried over.
    """
    if isinstance(xi, GaussianBatch):
        xi = xi.draws
    d = spec.dim
    dt = spec.dt
    sigma = np.asarray(sigma, dtype=float)
    var = sigma * sigma * _row_sq_norms(L, d)
    expo = (spec.rate - 0.5 * var) * dt + sigma * np.sqrt(dt) * correlate(xi, L)
    out = np.array(x, dtype=float, copy=True)
    with np.errstate(over="ignore"):
        out[:, :d] = out[:, :d] * np.exp(expo)
    if not np.all(np.isfinite(out[:, :d])) or np.any(out[:, :d] <= 0):
        raise FloatingPointError("log-Euler step produced non-finite or non-positive prices")
    return out


def augment_path_state(x_new: np.ndarray, n: int, spec: ModelSpec) -> np.ndarray:
    """Update ``(A1, A2)`` after the step that lands on time index ``n``.

    At a monitoring date ``A1 += ln(X/A2)^2`` and ``A2 := X``; otherwise unchanged.
    Works in place and returns the array.
    """
    stride = spec.monitoring_stride(MONTHS_PER_YEAR)
    d = spec.dim
    if n > 0 and n % stride == 0:
        ret = np.log(x_new[:, 0] / x_new[:, d + 1])
        x_new[:, d] += ret * ret
        x_new[:, d + 1] = x_new[:, 0]
    return x_new


def initial_states(spec: ModelSpec, batch: int, augmented: bool = False) -> np.ndarray:
    x = np.tile(spec.spot, (batch, 1))
    if augmented:
        x = np.concatenate([x, np.zeros((batch, 1)), x[:, :1]], axis=1)
    return x


def sample_states(n: int, batch: int, spec: ModelSpec, rng, augmented: bool = False) -> np.ndarray:
    """Draw from the training distribution at time index ``n``.

    Each component is log-normal with its own volatility drawn uniformly in
    its bounds; components are independent. With ``augmented`` the monthly
    path is simulated under the same constant volatility so that
    ``(X, A1, A2)`` are jointly consistent.
    """
    if not 0 <= n <= spec.steps - 1:
        raise ValueError(f"time index {n} outside 0..{spec.steps - 1}")
    d = spec.dim
    t = spec.time(n)
    sig = rng.uniform(spec.vol_lo, spec.vol_hi, (batch, d))
    drift = spec.rate - 0.5 * sig * sig
    if not augmented:
        if n == 0:
            return initial_states(spec, batch)
        y = rng.standard_normal((batch, d))
        return spec.spot * np.exp(drift * t + sig * np.sqrt(t) * y)
    if d != 1:
        raise ValueError("path augmentation is only defined for a single asset")
    stride = spec.monitoring_stride(MONTHS_PER_YEAR)
    months = n // stride
    tau = 1.0 / MONTHS_PER_YEAR
    logs = np.zeros((batch, 1))
    a1 = np.zeros(batch)
    for _ in range(months):
        r = drift * tau + sig * np.sqrt(tau) * rng.standard_normal((batch, 1))
        a1 += r[:, 0] ** 2
        logs += r
    a2 = spec.spot * np.exp(logs)
    rest = t - months * stride * spec.dt
    x = a2 * np.exp(drift * rest + sig * np.sqrt(rest) * rng.standard_normal((batch, 1)))
    return np.concatenate([x, a1[:, None], a2], axis=1)


# -- network inputs -----------------------------------------------------------

def state_features(x: np.ndarray, spec: ModelSpec) -> np.ndarray:
    """Log-moneyness ``ln(x/x0)``; augmented states add ``A1`` and ``ln(A2/x0)``."""
    d = spec.dim
    feats = [np.log(x[:, :d] / spec.spot)]
    if x.shape[1] == d + 2:
        feats.append(x[:, d:d + 1])
        feats.append(np.log(x[:, d + 1:d + 2] / spec.spot[0]))
    return np.concatenate(feats, axis=1)


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(32)


def _sigma_average(f, lo: float, hi: float):
    """Average of ``f(sigma)`` over ``sigma ~ U[lo, hi]``."""
    if hi - lo < 1e-14:
        return f(np.array([lo]))[..., 0]
    s = 0.5 * (hi - lo) * _GL_NODES + 0.5 * (hi + lo)
    return 0.5 * np.sum(_GL_WEIGHTS * f(s), axis=-1)


def _log_return_moments(t: float, r: float, lo: float, hi: float) -> tuple[float, float]:
    m = _sigma_average(lambda s: (r - 0.5 * s * s) * t, lo, hi)
    m2 = _sigma_average(lambda s: ((r - 0.5 * s * s) * t) ** 2 + s * s * t, lo, hi)
    return float(m), float(max(m2 - m * m, 0.0))


def feature_stats(spec: ModelSpec, n: int, augmented: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Shift and scale for the features at step ``n``, from the sampler's analytic moments.

    At ``t=0`` the state is deterministic; the scale of the first step is
    used instead so that it stays O(1).
    """
    t = spec.time(max(n, 1))
    t_mean = spec.time(n)
    shift, scale = [], []
    for i in range(spec.dim):
        m, _ = _log_return_moments(t_mean, spec.rate, spec.vol_lo[i], spec.vol_hi[i])
        _, v = _log_return_moments(t, spec.rate, spec.vol_lo[i], spec.vol_hi[i])
        shift.append(m)
        scale.append(np.sqrt(v))
    if augmented:
        lo, hi, r = spec.vol_lo[0], spec.vol_hi[0], spec.rate
        tau = 1.0 / MONTHS_PER_YEAR
        stride = spec.monitoring_stride(MONTHS_PER_YEAR)
        k = n // stride
        k_scale = max(k, 1)

        def sq_mean(s):
            mu = (r - 0.5 * s * s) * tau
            return mu * mu + s * s * tau

        def sq_var(s):
            mu = (r - 0.5 * s * s) * tau
            return 2 * (s * s * tau) ** 2 + 4 * mu * mu * s * s * tau

        a1_mean = k * _sigma_average(sq_mean, lo, hi)
        e_cond = _sigma_average(lambda s: (k_scale * sq_mean(s)) ** 2, lo, hi)
        e_mean = k_scale * _sigma_average(sq_mean, lo, hi)
        a1_var = k_scale * _sigma_average(sq_var, lo, hi) + e_cond - e_mean ** 2
        m2, _ = _log_return_moments(k * tau, r, lo, hi)
        _, v2 = _log_return_moments(k_scale * tau, r, lo, hi)
        shift += [float(a1_mean), m2]
        scale += [float(np.sqrt(a1_var)), float(np.sqrt(v2))]
    return np.array(shift), np.array(scale)
