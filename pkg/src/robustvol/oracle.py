"""Reference solvers used to validate the learned prices.

* :func:`bsb1d_solve` explicit finite differences for the one-dimensional
  Black-Scholes-Barenblatt equation in log-price;
* :func:`black_scholes_call` the closed form;
* :func:`dp_bruteforce` the discrete dynamic programming recursion over a
  finite action grid with Gauss-Hermite quadrature, for tiny instances.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.special import ndtr

from .model import ModelSpec

log = logging.getLogger(__name__)


# -- closed form ----------------------------------------------------------------

def black_scholes_call(x, K, sigma, r, T):
    """European call; the ``sigma sqrt(T) -> 0`` limit is the discounted forward intrinsic value."""
    args = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (x, K, sigma, r, T)))
    scalar = args[0].ndim == 0
    x, K, sigma, r, T = (np.atleast_1d(a) for a in args)
    disc_k = K * np.exp(-r * T)
    vol = sigma * np.sqrt(T)
    out = np.maximum(x - disc_k, 0.0)
    live = vol > 0
    if np.any(live):
        v = vol[live]
        d1 = (np.log(x[live] / K[live]) + r[live] * T[live]) / v + 0.5 * v
        out[live] = x[live] * ndtr(d1) - disc_k[live] * ndtr(d1 - v)
    return float(out[0]) if scalar else out


# -- finite differences ------------------------------------------------------------

@dataclass(frozen=True)
class FdGrid:
    space_nodes: int = 2001
    width: float = 6.0           # half-width in multiples of sigma_max sqrt(T)
    time_steps: int | None = None  # None: smallest stable count
    boundary: str = "linear"

    def __post_init__(self):
        if self.space_nodes < 3:
            raise ValueError("need at least three space nodes")
        if self.width <= 0:
            raise ValueError("domain width must be positive")
        if self.boundary != "linear":
            raise ValueError("only the asymptotically linear boundary is supported")


@dataclass
class FdSolution:
    x: np.ndarray
    values: np.ndarray
    x0: float

    def at(self, x) -> np.ndarray:
        return np.interp(np.log(x), np.log(self.x), self.values)

    @property
    def value(self) -> float:
        return float(self.at(self.x0))


def stable_time_steps(dy: float, sigma_hi: float, r: float, T: float) -> int:
    return int(math.ceil(T * (sigma_hi ** 2 / dy ** 2 + r) * (1 + 1e-9)))


def _explicit_march(v, y, x, sigma_lo, sigma_hi, r, tau, steps, fixed_sigma=None):
    """March ``steps`` explicit steps over a time span ``tau``."""
    dt = tau / steps
    dy = y[1] - y[0]
    for _ in range(steps):
        vy = (v[2:] - v[:-2]) / (2 * dy)
        vyy = (v[2:] - 2 * v[1:-1] + v[:-2]) / (dy * dy)
        gamma = vyy - vy
        if fixed_sigma is None:
            s2 = np.where(gamma >= 0, sigma_hi ** 2, sigma_lo ** 2)
        else:
            s2 = fixed_sigma ** 2
        new = v.copy()
        new[1:-1] = v[1:-1] + dt * (0.5 * s2 * gamma + r * vy - r * v[1:-1])
        # linear in x at both ends
        new[0] = new[1] + (new[1] - new[2]) * (x[1] - x[0]) / (x[2] - x[1])
        new[-1] = new[-2] + (new[-2] - new[-3]) * (x[-1] - x[-2]) / (x[-2] - x[-3])
        v = new
    return v


def bsb1d_solve(payoff_1d, sigma_lo: float, sigma_hi: float, r: float, T: float, grid: FdGrid = FdGrid(),
                x0: float = 100.0, control_steps: int | None = None, action_grid=None) -> FdSolution:
    """Sup-price of ``payoff_1d(x)`` with volatility in ``[sigma_lo, sigma_hi]``.

    By default the volatility is chosen per node and per time step from the
    sign of ``V_yy - V_y`` (the continuous-time problem). With
    ``control_steps=K`` the volatility is constant over each of ``K`` equal
    periods, chosen per node at the start of the period from ``action_grid``
    (default the two bounds): the discrete-time problem.
    """
    if not 0 < sigma_lo <= sigma_hi:
        raise ValueError("need 0 < sigma_lo <= sigma_hi")
    if T <= 0 or r < 0:
        raise ValueError("need T > 0 and r >= 0")
    half = grid.width * sigma_hi * math.sqrt(T)
    nodes = grid.space_nodes if grid.space_nodes % 2 else grid.space_nodes + 1  # x0 on a node
    y = math.log(x0) + np.linspace(-half, half, nodes)
    x = np.exp(y)
    dy = y[1] - y[0]
    need = stable_time_steps(dy, sigma_hi, r, T)
    steps = need if grid.time_steps is None else grid.time_steps
    if steps < need:
        raise ValueError(f"explicit scheme unstable with {steps} time steps; need at least {need}")
    if sigma_hi ** 2 < abs(r - 0.5 * sigma_lo ** 2) * dy:
        raise ValueError("grid too coarse for a monotone central difference")
    v = np.asarray(payoff_1d(x), dtype=float).copy()
    if control_steps is None:
        v = _explicit_march(v, y, x, sigma_lo, sigma_hi, r, T, steps)
    else:
        if control_steps < 1:
            raise ValueError("control_steps must be positive")
        acts = np.unique(np.asarray([sigma_lo, sigma_hi] if action_grid is None else action_grid, dtype=float))
        if np.any(acts < sigma_lo - 1e-15) or np.any(acts > sigma_hi + 1e-15):
            raise ValueError("actions outside the volatility bounds")
        per = int(math.ceil(steps / control_steps))
        for _ in range(control_steps):
            cands = [_explicit_march(v, y, x, sigma_lo, sigma_hi, r, T / control_steps, per, s) for s in acts]
            v = np.max(cands, axis=0)
    return FdSolution(x, v, x0)


# -- brute-force dynamic programming -----------------------------------------------

def gauss_hermite(nodes: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights for expectations under the standard normal."""
    if not 1 <= nodes <= 300:
        raise ValueError("Gauss-Hermite node count must be in 1..300 (the recurrence overflows beyond)")
    z, w = np.polynomial.hermite_e.hermegauss(nodes)
    return z, w / math.sqrt(2 * math.pi)


def default_action_grid(spec: ModelSpec, vol_levels: int = 2, corr_levels: int = 2) -> list:
    """Tensor grid of ``(sigma, L)`` actions including the bounds."""
    d = spec.dim
    vols = [np.linspace(spec.vol_lo[i], spec.vol_hi[i], vol_levels) for i in range(d)]
    if spec.uncertain:
        lo, hi = spec.corr_bounds.lower[0, 1], spec.corr_bounds.upper[0, 1]
        rhos = np.linspace(lo, hi, corr_levels)
    else:
        rhos = [None]
    out = []
    for sig in itertools.product(*vols):
        for rho in rhos:
            if rho is None:
                L = spec.fixed_factor
            else:
                rc = float(np.clip(rho, -1 + 1e-12, 1 - 1e-12))
                L = np.array([[1.0, 0.0], [rc, math.sqrt(1 - rc * rc)]])
            out.append((np.array(sig), L))
    return out


class _GridFunction:
    """Piecewise-linear interpolant in log-price with flat extrapolation."""

    def __init__(self, axes, values):
        self.axes = axes
        self.values = values
        self.lo = np.array([a[0] for a in axes])
        self.hi = np.array([a[-1] for a in axes])
        if len(axes) > 1:
            self._rgi = RegularGridInterpolator(axes, values, bounds_error=False, fill_value=None)

    def __call__(self, logx: np.ndarray) -> np.ndarray:
        outside = np.any((logx < self.lo) | (logx > self.hi), axis=-1)
        if np.any(outside):
            log.debug("flat extrapolation on %d of %d points", int(outside.sum()), outside.size)
        c = np.clip(logx, self.lo, self.hi)
        if len(self.axes) == 1:
            return np.interp(c[..., 0], self.axes[0], self.values)
        return self._rgi(c.reshape(-1, c.shape[-1])).reshape(c.shape[:-1])


def dp_bruteforce(spec: ModelSpec, payoff, action_grid=None, quadrature_nodes: int = 64,
                  grid_points: int | None = None, width: float = 7.0) -> float:
    """``V_0(x0)`` of the discrete recursion over a finite action grid.

    ``V_n(x) = max_a exp(-r dt) E[V_{n+1}(F(x, a, xi))]`` with the expectation
    by tensor Gauss-Hermite quadrature. Intermediate values live on a tensor
    log-price grid and are interpolated linearly; the terminal payoff is
    evaluated exactly.
    """
    d, N = spec.dim, spec.steps
    if d > 2 or N > 3:
        raise ValueError("brute-force oracle is limited to d <= 2 and N <= 3")
    acts = default_action_grid(spec) if action_grid is None else list(action_grid)
    if not acts:
        raise ValueError("empty action grid")
    z1, w1 = gauss_hermite(quadrature_nodes)
    xi = np.array(list(itertools.product(z1, repeat=d)))
    wq = np.prod(np.array(list(itertools.product(w1, repeat=d))), axis=1)
    dt = spec.dt
    disc = spec.step_discount
    if grid_points is None:
        grid_points = 1201 if d == 1 else 81
    log_x0 = np.log(spec.spot)

    def continuation(logx, nxt_fn):
        # logx: (P, d) -> (P,) max over actions of the discounted quadrature
        best = np.full(len(logx), -np.inf)
        for sigma, L in acts:
            sigma = np.asarray(sigma, dtype=float)
            var = sigma ** 2 * np.sum(np.asarray(L) ** 2, axis=-1)
            shock = (spec.rate - 0.5 * var) * dt + sigma * math.sqrt(dt) * (xi @ np.asarray(L).T)
            vals = np.empty(len(logx))
            step = max(1, 2 ** 20 // len(xi))
            for s in range(0, len(logx), step):
                lx = logx[s:s + step, None, :] + shock[None]
                vals[s:s + step] = nxt_fn(lx) @ wq
            best = np.maximum(best, disc * vals)
        return best

    def terminal(lx):
        shp = lx.shape[:-1]
        return np.asarray(payoff(np.exp(lx.reshape(-1, d))), dtype=float).reshape(shp)

    nxt = terminal
    for n in range(N - 1, 0, -1):
        sd = width * spec.vol_hi * math.sqrt(spec.time(n))
        axes = [log_x0[i] + np.linspace(-sd[i], sd[i], grid_points) for i in range(d)]
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
        vals = continuation(mesh, nxt).reshape((grid_points,) * d)
        nxt = _GridFunction(axes, vals)
    return float(continuation(log_x0[None, :], nxt)[0])
