"""Market model data shared by every module."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .corrvine import CorrBounds

CORR_MODES = ("uncertain", "fixed")


def _vec(v, d: int, name: str) -> np.ndarray:
    a = np.asarray(v, dtype=float)
    if a.ndim == 0:
        a = np.full(d, float(a))
    if a.shape != (d,):
        raise ValueError(f"{name} must have length {d}")
    return a


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Asset count, spot, rate, horizon, time grid and the volatility/correlation bounds.

    ``corr_mode="fixed"`` pins the correlation to ``corr_fixed`` (identity by
    default); ``"uncertain"`` lets the control pick it inside ``corr_bounds``.
    """

    dim: int
    spot: np.ndarray = 100.0
    rate: float = 0.0
    horizon: float = 1.0
    steps: int = 32
    vol_lo: np.ndarray = 0.1
    vol_hi: np.ndarray = 0.2
    corr_bounds: CorrBounds | None = None
    corr_mode: str = "fixed"
    corr_fixed: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        d = int(self.dim)
        if d < 1:
            raise ValueError("dimension must be at least 1")
        object.__setattr__(self, "dim", d)
        object.__setattr__(self, "spot", _vec(self.spot, d, "spot"))
        object.__setattr__(self, "vol_lo", _vec(self.vol_lo, d, "vol_lo"))
        object.__setattr__(self, "vol_hi", _vec(self.vol_hi, d, "vol_hi"))
        if np.any(self.spot <= 0):
            raise ValueError("spot prices must be positive")
        if np.any(self.vol_lo <= 0) or np.any(self.vol_lo > self.vol_hi):
            raise ValueError("volatility bounds need 0 < vol_lo <= vol_hi")
        if self.rate < 0 or self.horizon <= 0 or int(self.steps) < 1:
            raise ValueError("need rate >= 0, horizon > 0 and steps >= 1")
        object.__setattr__(self, "steps", int(self.steps))
        if self.corr_mode not in CORR_MODES:
            raise ValueError(f"corr_mode must be one of {CORR_MODES}")
        if self.corr_bounds is None:
            object.__setattr__(self, "corr_bounds", CorrBounds.uniform(d, -1.0, 1.0))
        if self.corr_bounds.dim != d:
            raise ValueError("correlation bounds have the wrong dimension")
        if self.corr_fixed is None:
            object.__setattr__(self, "corr_fixed", np.eye(d))
        rho = np.asarray(self.corr_fixed, dtype=float)
        if rho.shape != (d, d) or not np.allclose(rho, rho.T) or not np.allclose(np.diag(rho), 1.0):
            raise ValueError("fixed correlation must be a symmetric unit-diagonal matrix")
        if np.linalg.eigvalsh(rho).min() < -1e-12:
            raise ValueError("fixed correlation matrix is not positive semidefinite")
        object.__setattr__(self, "corr_fixed", rho)

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def step_discount(self) -> float:
        return float(np.exp(-self.rate * self.dt))

    @property
    def uncertain(self) -> bool:
        return self.corr_mode == "uncertain" and self.dim >= 2

    @cached_property
    def fixed_factor(self) -> np.ndarray:
        """Cholesky factor of the fixed correlation, computed once."""
        rho = self.corr_fixed
        try:
            return np.linalg.cholesky(rho)
        except np.linalg.LinAlgError:
            # singular but PSD: eigen square root, then re-triangularize via QR
            w, V = np.linalg.eigh(rho)
            root = V * np.sqrt(np.clip(w, 0, None))
            _, r = np.linalg.qr(root.T)
            r = r * np.sign(np.diag(r))[:, None]
            return r.T

    def time(self, n: int) -> float:
        return n * self.dt

    def replace(self, **kw) -> "ModelSpec":
        fields = dict(dim=self.dim, spot=self.spot, rate=self.rate, horizon=self.horizon, steps=self.steps,
                      vol_lo=self.vol_lo, vol_hi=self.vol_hi, corr_bounds=self.corr_bounds,
                      corr_mode=self.corr_mode, corr_fixed=self.corr_fixed, extra=dict(self.extra))
        fields.update(kw)
        return ModelSpec(**fields)

    # monitoring grid for path-dependent payoffs (monthly dates)
    def monitoring_stride(self, per_year: int = 12) -> int:
        count = per_year * self.horizon
        n_dates = int(round(count))
        if n_dates < 1 or abs(count - n_dates) > 1e-9:
            raise ValueError("horizon must contain a whole number of monitoring periods")
        if self.steps % n_dates:
            raise ValueError(f"steps={self.steps} is not a multiple of the {n_dates} monitoring dates")
        return self.steps // n_dates
