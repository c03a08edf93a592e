"""C-vine parameterization of correlation matrices.

A vector of ``d(d-1)/2`` partial correlations in ``(-1, 1)`` is mapped to a
positive definite correlation matrix. Entries are ordered level-major: all
pairs of vine level 1 first, ``(1,2), (1,3), ..., (1,d)``, then level 2,
``(2,3|1), (2,4|1), ...``, and so on; within a level pairs are lexicographic.
For ``d=3`` the ordering is ``(y12, y13, y23|1)``.

The lower-triangular factor ``L`` with ``rho = L @ L.T`` is assembled row by
row from the partial correlations, no numerical factorization involved.
Pairwise correlations are computed separately by the classical vine
recursion so that the two routes can check each other.

All functions accept a leading batch axis: ``y`` has shape ``(..., m)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# tanh outputs are clamped to this before entering the vine
SQUASH_LIMIT = 1.0 - 1e-7

DEFAULT_DELTA = 0.05
DEFAULT_BETA = 10.0


def n_partial(d: int) -> int:
    return d * (d - 1) // 2


def dim_from_length(m: int) -> int:
    """Recover ``d`` from the number of partial correlations."""
    d = int(round((1 + np.sqrt(1 + 8 * m)) / 2))
    if n_partial(d) != m:
        raise ValueError(f"{m} is not a valid number of partial correlations")
    return d


def vine_pairs(d: int) -> list[tuple[int, int]]:
    """(level, column) index pairs in storage order, zero-based.

    Entry ``(k, i)`` is the partial correlation of assets ``k`` and ``i``
    given assets ``0..k-1``.
    """
    return [(k, i) for k in range(d - 1) for i in range(k + 1, d)]


def _to_table(y: np.ndarray, d: int) -> np.ndarray:
    """Scatter the flat vector into an upper-triangular table P[..., k, i]."""
    table = np.zeros(y.shape[:-1] + (d, d))
    for idx, (k, i) in enumerate(vine_pairs(d)):
        table[..., k, i] = y[..., idx]
    return table


def _check_domain(y: np.ndarray) -> None:
    if not np.all(np.isfinite(y)):
        raise ValueError("partial correlations must be finite")
    if np.any(np.abs(y) >= 1.0):
        raise ValueError("partial correlations must lie strictly inside (-1, 1)")


@dataclass(frozen=True)
class CorrBounds:
    """Pairwise correlation bounds; only the strict upper triangle is used."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 2 or lo.shape[0] != lo.shape[1]:
            raise ValueError("correlation bounds must be two square arrays of equal shape")
        iu = np.triu_indices(lo.shape[0], 1)
        if np.any(lo[iu] < -1) or np.any(hi[iu] > 1):
            raise ValueError("correlation bounds must lie in [-1, 1]")
        if np.any(lo[iu] > hi[iu]):
            raise ValueError("lower correlation bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def uniform(cls, d: int, lo: float, hi: float) -> "CorrBounds":
        return cls(np.full((d, d), float(lo)), np.full((d, d), float(hi)))

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def pair_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Bounds of the strict upper triangle, row-major."""
        iu = np.triu_indices(self.dim, 1)
        return self.lower[iu], self.upper[iu]

    def contains(self, rho: np.ndarray, tol: float = 0.0) -> np.ndarray:
        iu = np.triu_indices(self.dim, 1)
        r = np.asarray(rho)[..., iu[0], iu[1]]
        lo, hi = self.pair_arrays()
        return np.all((r >= lo - tol) & (r <= hi + tol), axis=-1)


@dataclass(frozen=True)
class CorrFactor:
    """Lower-triangular factor of a correlation matrix, possibly batched."""

    L: np.ndarray

    @property
    def dim(self) -> int:
        return self.L.shape[-1]

    @property
    def rho(self) -> np.ndarray:
        return self.L @ np.swapaxes(self.L, -1, -2)


def cvine_build(y, clamp: bool = False) -> CorrFactor:
    """Cholesky factor of the C-vine correlation matrix.

    Row ``i`` is ``(p_0, p_1 s_0, p_2 s_0 s_1, ..., s_0 ... s_{i-1})`` where
    ``p_k`` is the level-``k`` partial correlation of asset ``i`` and
    ``s_k = sqrt(1 - p_k^2)``; rows therefore have unit norm.

    With ``clamp=True`` entries are first clipped to ``|y| <= 1 - 1e-7``,
    which is how squashed network outputs are fed in.
    """
    y = np.asarray(y, dtype=float)
    if clamp:
        y = np.clip(y, -SQUASH_LIMIT, SQUASH_LIMIT)
    _check_domain(y)
    d = dim_from_length(y.shape[-1])
    P = _to_table(y, d)
    L = np.zeros(y.shape[:-1] + (d, d))
    L[..., 0, 0] = 1.0
    for i in range(1, d):
        carry = np.ones(y.shape[:-1])
        for k in range(i):
            p = P[..., k, i]
            L[..., i, k] = p * carry
            carry = carry * np.sqrt(1.0 - p * p)
        L[..., i, i] = carry
    return CorrFactor(L)


def cvine_build_vjp(y, grad_L: np.ndarray) -> np.ndarray:
    """Pull a gradient with respect to ``L`` back to the partial correlations.

    ``y`` must already be inside the open domain (clamp first if needed).
    """
    y = np.asarray(y, dtype=float)
    d = dim_from_length(y.shape[-1])
    P = _to_table(y, d)
    S = np.sqrt(1.0 - P * P)
    gP = np.zeros_like(P)
    for i in range(1, d):
        # prefix products c_j = prod_{l<j} s_l for this row
        c = [np.ones(y.shape[:-1])]
        for k in range(i):
            c.append(c[-1] * S[..., k, i])
        # gradient reaching each c_j
        gc = [grad_L[..., i, j] * P[..., j, i] for j in range(i)] + [grad_L[..., i, i]]
        for k in range(i):
            g = grad_L[..., i, k] * c[k]
            # c_j for j > k contains s_k as a factor
            acc = np.zeros(y.shape[:-1])
            for j in range(k + 1, i + 1):
                acc = acc + gc[j] * c[j]
            s = S[..., k, i]
            g = g + acc / s * (-P[..., k, i] / s)
            gP[..., k, i] = g
    return np.stack([gP[..., k, i] for k, i in vine_pairs(d)], axis=-1)


def cvine_pairwise(y, clamp: bool = False) -> np.ndarray:
    """Correlation matrix from partial correlations by the vine recursion.

    ``rho_{ki} = p_{ki|<k} * sqrt((1-rho_{li|<l}^2)(1-rho_{lk|<l}^2)) + ...``
    unwound from level ``k-1`` down to level 0.
    """
    y = np.asarray(y, dtype=float)
    if clamp:
        y = np.clip(y, -SQUASH_LIMIT, SQUASH_LIMIT)
    _check_domain(y)
    d = dim_from_length(y.shape[-1])
    P = _to_table(y, d)
    R = np.zeros(y.shape[:-1] + (d, d))
    idx = np.arange(d)
    R[..., idx, idx] = 1.0
    for k, i in vine_pairs(d):
        p = P[..., k, i]
        for l in range(k - 1, -1, -1):
            p = p * np.sqrt((1.0 - P[..., l, i] ** 2) * (1.0 - P[..., l, k] ** 2)) + P[..., l, i] * P[..., l, k]
        R[..., k, i] = p
        R[..., i, k] = p
    return R


def cvine_unbuild(rho) -> np.ndarray:
    """Partial correlations of a positive definite correlation matrix.

    Inverse of :func:`cvine_pairwise`; reads them off the Cholesky factor.
    """
    rho = np.asarray(rho, dtype=float)
    L = np.linalg.cholesky(rho)
    d = rho.shape[-1]
    out = []
    for k, i in vine_pairs(d):
        # L[i, k] = p_k * prod_{l<k} s_l and the prefix product is the norm of the remaining tail
        tail = np.sqrt(np.clip(1.0 - np.sum(L[..., i, :k] ** 2, axis=-1), 0.0, None))
        out.append(L[..., i, k] / tail)
    return np.stack(out, axis=-1)


def huber(v, delta: float = DEFAULT_DELTA) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return np.where(v <= delta, v * v / (2 * delta), v - delta / 2)


def huber_grad(v, delta: float = DEFAULT_DELTA) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return np.where(v <= delta, v / delta, 1.0)


def corr_penalty(rho, bounds: CorrBounds, beta: float = DEFAULT_BETA,
                 delta: float = DEFAULT_DELTA, with_grad: bool = False):
    """Averaged Huber penalty on pairwise correlation-bound violations.

    Violations are normalized by the width of each bound interval. Returns
    one value per matrix in the batch; with ``with_grad`` also the gradient
    with respect to the strict upper triangle of ``rho`` (shape ``(..., d, d)``,
    zero elsewhere).
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    rho = np.asarray(rho, dtype=float)
    d = rho.shape[-1]
    if d != bounds.dim:
        raise ValueError("correlation matrix and bounds have different dimensions")
    if d < 2:
        zero = np.zeros(rho.shape[:-2])
        return (zero, np.zeros_like(rho)) if with_grad else zero
    lo, hi = bounds.pair_arrays()
    width = hi - lo
    if np.any(width <= 0):
        raise ValueError("degenerate correlation bounds (lower == upper) cannot be normalized")
    iu = np.triu_indices(d, 1)
    r = rho[..., iu[0], iu[1]]
    above = np.maximum(r - hi, 0.0) / width
    below = np.maximum(lo - r, 0.0) / width
    scale = beta * 2.0 / (d * (d - 1))
    value = scale * np.sum(huber(above, delta) + huber(below, delta), axis=-1)
    if not with_grad:
        return value
    g_pairs = scale * (huber_grad(above, delta) * (r > hi) - huber_grad(below, delta) * (r < lo)) / width
    grad = np.zeros_like(rho)
    grad[..., iu[0], iu[1]] = g_pairs
    return value, grad


def nearest_correlation(rho, floor: float = 1e-10) -> np.ndarray:
    """Repair a symmetric matrix into a positive definite correlation matrix.

    Eigenvalues are floored and the result rescaled back to unit diagonal.
    One pass; enough for the small projections this is used for.
    """
    rho = np.asarray(rho, dtype=float)
    sym = 0.5 * (rho + np.swapaxes(rho, -1, -2))
    w, V = np.linalg.eigh(sym)
    w = np.maximum(w, floor)
    fixed = (V * w[..., None, :]) @ np.swapaxes(V, -1, -2)
    s = np.sqrt(np.diagonal(fixed, axis1=-2, axis2=-1))
    fixed = fixed / s[..., :, None] / s[..., None, :]
    idx = np.arange(rho.shape[-1])
    fixed[..., idx, idx] = 1.0
    return fixed
