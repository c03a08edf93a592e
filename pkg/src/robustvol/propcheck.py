"""Property suite run by ``robustvol propcheck``.

Each check returns a :class:`Check`; the suite passes when all of them do.
The whole suite takes well under two minutes on one core.
"""
from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass

import numpy as np

from . import corrvine
from .dynamics import log_euler_step
from .model import ModelSpec
from .neural import backward, forward, init_mlp
from .policy import bernoulli_log_density, gaussian_log_density, gaussian_ppo_ratio


@dataclass
class Check:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _random_partials(rng, n: int, d: int, bound: float = 0.999) -> np.ndarray:
    return rng.uniform(-bound, bound, (n, corrvine.n_partial(d)))


def _heavy_partials(rng, n: int, d: int) -> np.ndarray:
    return np.tanh(3.0 * rng.standard_normal((n, corrvine.n_partial(d))))


def check_cvine_psd(rng, draws: int = 10_000, dims=range(2, 11)) -> Check:
    """Smallest eigenvalue of the assembled matrix, plus an exact certificate.

    Eigenvalues are checked on partials uniform in (-0.999, 0.999). Latents
    with heavy tails push the true smallest eigenvalue below double
    precision resolution, so there the check is the exact one: a triangular
    factor with a positive diagonal.
    """
    worst_eig, worst_diag, worst_pivot = np.inf, 0.0, np.inf
    for d in dims:
        rho = corrvine.cvine_build(_random_partials(rng, draws, d)).rho
        worst_eig = min(worst_eig, float(np.linalg.eigvalsh(rho)[:, 0].min()))
        worst_diag = max(worst_diag, float(np.abs(np.diagonal(rho, axis1=1, axis2=2) - 1).max()))
        L = corrvine.cvine_build(_heavy_partials(rng, draws, d)).L
        worst_pivot = min(worst_pivot, float(np.diagonal(L, axis1=1, axis2=2).min()))
    ok = worst_eig > 0 and worst_diag <= 1e-12 and worst_pivot > 0
    return Check("cvine_psd", ok, f"min eigenvalue {worst_eig:.3e}, max |diag-1| {worst_diag:.1e}, "
                                  f"min factor pivot (heavy tails) {worst_pivot:.1e}")


def check_cvine_reconstruction(rng, draws: int = 10_000, dims=range(2, 11)) -> Check:
    worst_norm, worst_rec = 0.0, 0.0
    for d in dims:
        y = _random_partials(rng, draws, d)
        L = corrvine.cvine_build(y).L
        worst_norm = max(worst_norm, float(np.abs(np.sum(L * L, axis=-1) - 1).max()))
        rec = L @ np.swapaxes(L, -1, -2)
        worst_rec = max(worst_rec, float(np.abs(rec - corrvine.cvine_pairwise(y)).max()))
    ok = worst_norm <= 1e-12 and worst_rec <= 1e-12
    return Check("cvine_reconstruction", ok, f"row-norm error {worst_norm:.1e}, LL^T vs vine recursion {worst_rec:.1e}")


def check_bernoulli_normalized(rng, max_dim: int = 10) -> Check:
    worst = 0.0
    for d in range(1, max_dim + 1):
        q = rng.uniform(0.01, 0.99, d)
        bits = np.array(list(itertools.product((0.0, 1.0), repeat=d)))
        total = math.fsum(np.exp(bernoulli_log_density(np.broadcast_to(q, bits.shape), bits)))
        worst = max(worst, abs(total - 1.0))
    return Check("bernoulli_normalized", worst < 1e-12, f"max |sum - 1| {worst:.1e}")


def check_ppo_ratio(rng, n: int = 10_000, k: int = 6) -> Check:
    lam = rng.uniform(0.05, 1.0)
    m_old = rng.standard_normal((n, k))
    m_new = m_old + 0.1 * rng.standard_normal((n, k))
    z = m_old + math.sqrt(lam) * rng.standard_normal((n, k))
    fast = gaussian_ppo_ratio(m_new, m_old, z, lam)
    direct = np.exp(gaussian_log_density(z, m_new, lam)) / np.exp(gaussian_log_density(z, m_old, lam))
    err = float(np.max(np.abs(fast / direct - 1)))
    return Check("ppo_gaussian_ratio", err < 1e-10, f"max relative error {err:.1e}")


def check_mlp_gradients(rng, h: float = 1e-6) -> Check:
    params = init_mlp(4, 3, 16, rng, rng.standard_normal(4), rng.uniform(0.5, 2, 4))
    x = rng.standard_normal((7, 4))
    up = rng.standard_normal((7, 3))
    grads = backward(params, x, up)
    worst = 0.0
    for name, g in grads.items():
        arr = getattr(params, name)
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            fp = np.sum(forward(params, x) * up)
            arr[idx] = old - h
            fm = np.sum(forward(params, x) * up)
            arr[idx] = old
            num[idx] = (fp - fm) / (2 * h)
        worst = max(worst, float(np.linalg.norm(g - num) / max(np.linalg.norm(num), 1e-12)))
    return Check("mlp_gradients", worst < 1e-5, f"max relative error {worst:.1e}")


def check_score_zero_mean(rng, n: int = 100_000) -> Check:
    lam = 0.3
    m = rng.standard_normal(3)
    z = m + math.sqrt(lam) * rng.standard_normal((n, 3))
    score = (z - m) / lam
    t_gauss = np.abs(score.mean(0)) / (score.std(0, ddof=1) / math.sqrt(n))
    q = rng.uniform(0.1, 0.9, 3)
    a = (rng.random((n, 3)) < q).astype(float)
    sb = a - q
    t_bern = np.abs(sb.mean(0)) / (sb.std(0, ddof=1) / math.sqrt(n))
    worst = float(max(t_gauss.max(), t_bern.max()))
    return Check("score_zero_mean", worst < 5.0, f"max |mean|/SE {worst:.2f} (limit 5)")


def check_martingale(rng, n_paths: int = 1_000_000, d: int = 3) -> Check:
    spec = ModelSpec(dim=d, rate=0.0, steps=4)
    sigma = rng.uniform(spec.vol_lo, spec.vol_hi, d)
    L = corrvine.cvine_build(_random_partials(rng, 1, d)).L[0]
    half = n_paths // 2
    xi = rng.standard_normal((half, d))
    x0 = np.tile(spec.spot, (half, 1))
    pair = 0.5 * (log_euler_step(x0, sigma, L, xi, spec) + log_euler_step(x0, sigma, L, -xi, spec))
    se = pair.std(0, ddof=1) / math.sqrt(half)
    t = np.abs(pair.mean(0) - spec.spot) / se
    worst = float(t.max())
    return Check("log_euler_martingale", worst < 4.0, f"max |mean - x0|/SE {worst:.2f} (limit 4)")


CHECKS = (check_cvine_psd, check_cvine_reconstruction, check_bernoulli_normalized, check_ppo_ratio,
          check_mlp_gradients, check_score_zero_mean, check_martingale)


def run_all(seed: int = 0) -> list[Check]:
    out = []
    for i, fn in enumerate(CHECKS):
        rng = np.random.default_rng([seed, i])
        t0 = time.perf_counter()
        res = fn(rng)
        res.seconds = time.perf_counter() - t0
        out.append(res)
    return out
