"""Terminal payoffs of the tested claims.

Each payoff maps a terminal state batch ``(batch, state_dim)`` to a vector of
nonnegative values. Geometric means are taken in log space.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

KINDS = ("call", "geo_outperformer", "outperformer_spread", "best_of_butterfly", "geo_call_spread", "call_sharpe")

_STRIKE_COUNT = {
    "call": 1,                    # on the geometric mean; a vanilla call when d=1
    "geo_outperformer": 0,
    "outperformer_spread": 2,     # the two ratios, default (0.9, 1.1)
    "best_of_butterfly": 2,
    "geo_call_spread": 2,
    "call_sharpe": 1,
}


@dataclass(frozen=True)
class PayoffSpec:
    kind: str
    dim: int
    strikes: tuple = field(default_factory=tuple)
    horizon: float = 1.0
    # value returned for an in-the-money call Sharpe path whose realized variance is zero
    sharpe_cap: float = 1e6

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown payoff kind {self.kind!r}; expected one of {KINDS}")
        strikes = tuple(float(k) for k in self.strikes)
        if self.kind == "outperformer_spread" and not strikes:
            strikes = (0.9, 1.1)
        if len(strikes) != _STRIKE_COUNT[self.kind]:
            raise ValueError(f"{self.kind} needs {_STRIKE_COUNT[self.kind]} strike(s), got {len(strikes)}")
        if len(strikes) == 2 and not strikes[0] < strikes[1]:
            raise ValueError("strikes must satisfy K1 < K2")
        if self.kind == "geo_outperformer" and self.dim < 2:
            raise ValueError("geo_outperformer needs at least two assets")
        if self.kind in ("outperformer_spread", "best_of_butterfly") and self.dim != 2:
            raise ValueError(f"{self.kind} is a two-asset payoff")
        if self.kind == "call_sharpe" and self.dim != 1:
            raise ValueError("call_sharpe is a single-asset payoff")
        object.__setattr__(self, "strikes", strikes)

    @property
    def augmented(self) -> bool:
        return self.kind == "call_sharpe"

    def __call__(self, terminal: np.ndarray) -> np.ndarray:
        return evaluate(self, terminal)


def payoff_dimension(spec: PayoffSpec) -> int:
    return spec.dim + 2 if spec.augmented else spec.dim


def _geomean(x: np.ndarray) -> np.ndarray:
    if x.shape[1] == 1:
        return x[:, 0].copy()
    return np.exp(np.mean(np.log(x), axis=1))


def _call(x, k):
    return np.maximum(x - k, 0.0)


def evaluate(spec: PayoffSpec, terminal) -> np.ndarray:
    x = np.atleast_2d(np.asarray(terminal, dtype=float))
    if x.shape[1] != payoff_dimension(spec):
        raise ValueError(f"{spec.kind} expects states of width {payoff_dimension(spec)}, got {x.shape[1]}")
    kind = spec.kind
    if kind == "call":
        return _call(_geomean(x), spec.strikes[0])
    if kind == "geo_outperformer":
        # written relative to the first leg so that equal legs give exactly zero
        x1 = x[:, 0]
        return x1 * np.maximum(_geomean(x[:, 1:] / x1[:, None]) - 1.0, 0.0)
    if kind == "outperformer_spread":
        a, b = spec.strikes
        return _call(x[:, 1], a * x[:, 0]) - _call(x[:, 1], b * x[:, 0])
    if kind == "best_of_butterfly":
        k1, k2 = spec.strikes
        xm = x.max(axis=1)
        return _call(xm, k1) - 2 * _call(xm, 0.5 * (k1 + k2)) + _call(xm, k2)
    if kind == "geo_call_spread":
        k1, k2 = spec.strikes
        g = _geomean(x)
        return _call(g, k1) - _call(g, k2)
    # call_sharpe
    (k,) = spec.strikes
    intrinsic = _call(x[:, 0], k)
    var = x[:, 1] / spec.horizon
    out = np.zeros_like(intrinsic)
    pos = var > 0
    out[pos] = intrinsic[pos] / np.sqrt(var[pos])
    bad = ~pos & (intrinsic > 0)
    if np.any(bad):
        log.warning("call_sharpe: %d in-the-money path(s) with zero realized variance, capped", int(bad.sum()))
        out[bad] = spec.sharpe_cap
    return out
