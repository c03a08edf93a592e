"""Prices from trained artifacts.

The actor price simulates antithetic paths under the deterministic policy
and is a statistical lower bound of the discrete-time value. The critic
price reads the step-0 value network at ``x0`` and carries no bound.
"""
from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import asdict, dataclass

import numpy as np

from .corrvine import nearest_correlation
from .dynamics import augment_path_state, initial_states, log_euler_step
from .model import ModelSpec
from .policy import GaussianPolicy

log = logging.getLogger(__name__)

PRICE_DOMAIN = 1
Z95 = 1.96
DEFAULT_PATHS = 2 ** 19
RESULTS_SCHEMA = "robustvol-results-v1"
RESULT_COLUMNS = ("option", "d", "policy_family", "corr_mode", "N", "actor_price", "ci_halfwidth",
                  "critic_price", "reference", "runtime_s", "seed", "violation_impact")


@dataclass
class PriceReport:
    actor_price: float
    ci_halfwidth: float
    critic_price: float
    n_paths: int
    runtime_seconds: float
    seed: int
    violation_impact: float | None = None

    def __post_init__(self):
        if self.ci_halfwidth < 0:
            raise ValueError("CI halfwidth must be nonnegative")
        if self.n_paths < 2 or self.n_paths % 2:
            raise ValueError("path count must be even and at least 2")

    @property
    def std_error(self) -> float:
        return self.ci_halfwidth / Z95

    def to_dict(self) -> dict:
        return asdict(self)


class PsdRepairError(RuntimeError):
    pass


def clamp_factor(L: np.ndarray, spec: ModelSpec) -> np.ndarray:
    """Project pairwise correlations onto their bounds and refactor.

    Projection can leave the matrix indefinite; such matrices are replaced by
    the nearest correlation matrix before the Cholesky factorization.
    """
    rho = L @ np.swapaxes(L, -1, -2)
    b = spec.corr_bounds
    clipped = np.clip(rho, b.lower, b.upper)
    idx = np.arange(spec.dim)
    clipped[..., idx, idx] = 1.0
    changed = np.any(clipped != rho, axis=(-2, -1))
    out = np.array(L, copy=True)
    if not np.any(changed):
        return out
    sub = clipped[changed]
    w = np.linalg.eigvalsh(sub)
    bad = w[:, 0] <= 1e-12
    if np.any(bad):
        log.warning("clamped correlation not positive definite on %d state(s); repairing", int(bad.sum()))
        sub[bad] = nearest_correlation(sub[bad])
    try:
        out[changed] = np.linalg.cholesky(sub)
    except np.linalg.LinAlgError as exc:
        raise PsdRepairError("could not repair projected correlation matrices") from exc
    return out


def _controls(art, x, clamp: bool, spec: ModelSpec):
    sigma, L = art.actor.controls(x)
    if clamp and spec.uncertain and isinstance(art.actor, GaussianPolicy) and np.ndim(L) == 3:
        L = clamp_factor(L, spec)
    return sigma, L


def simulate_pair_means(artifacts, spec: ModelSpec, payoff, n_paths: int, seed: int,
                        chunk: int = 2 ** 16, clamp: bool = False) -> np.ndarray:
    """Discounted payoff averaged over each antithetic pair; one entry per pair."""
    if n_paths < 2 or n_paths % 2:
        raise ValueError("path count must be even and at least 2")
    if len(artifacts) != spec.steps or any(a is None for a in artifacts):
        raise ValueError("artifacts must cover every time step")
    augmented = bool(getattr(payoff, "augmented", False))
    rng = np.random.default_rng([seed, PRICE_DOMAIN])
    disc = math.exp(-spec.rate * spec.horizon)
    half_total = n_paths // 2
    out = np.empty(half_total)
    chunk_pairs = max(chunk // 2, 1)
    for start in range(0, half_total, chunk_pairs):
        m = min(chunk_pairs, half_total - start)
        legs = [initial_states(spec, m, augmented), initial_states(spec, m, augmented)]
        for n in range(spec.steps):
            xi = rng.standard_normal((m, spec.dim))
            for k, sign in enumerate((1.0, -1.0)):
                sigma, L = _controls(artifacts[n], legs[k], clamp, spec)
                nxt = log_euler_step(legs[k], sigma, L, sign * xi, spec)
                if augmented:
                    augment_path_state(nxt, n + 1, spec)
                legs[k] = nxt
        out[start:start + m] = disc * 0.5 * (payoff(legs[0]) + payoff(legs[1]))
    return out


def actor_price(artifacts, spec: ModelSpec, payoff, n_paths: int = DEFAULT_PATHS, seed: int = 0,
                clamp: bool = False) -> tuple[float, float]:
    """Mean discounted payoff under the deterministic policy and its 95% CI halfwidth."""
    pairs = simulate_pair_means(artifacts, spec, payoff, n_paths, seed, clamp=clamp)
    half = Z95 * float(np.std(pairs, ddof=1)) / math.sqrt(len(pairs)) if len(pairs) > 1 else 0.0
    return float(pairs.mean()), half


def critic_price(artifacts, spec: ModelSpec, augmented: bool = False) -> float:
    """Step-0 critic at the initial state. No bound property is claimed for it."""
    x0 = initial_states(spec, 1, augmented)
    return float(artifacts[0].value()(x0)[0])


def clamped_price_impact(artifacts, spec: ModelSpec, payoff, n_paths: int = DEFAULT_PATHS, seed: int = 0,
                         reference: float | None = None, unclamped: float | None = None) -> float:
    """``(unclamped - clamped) / reference`` with common random numbers.

    Only meaningful for continuous policies with uncertain correlation in
    dimension three or more. ``reference`` defaults to the unclamped price.
    """
    if not (spec.uncertain and spec.dim >= 3 and isinstance(artifacts[0].actor, GaussianPolicy)):
        raise ValueError("clamped impact needs a continuous policy with uncertain correlation and d >= 3")
    log.warning("projecting pairwise correlations onto their bounds does not guarantee a "
                "positive semidefinite matrix; indefinite projections are repaired")
    if unclamped is None:
        unclamped, _ = actor_price(artifacts, spec, payoff, n_paths, seed)
    clamped, _ = actor_price(artifacts, spec, payoff, n_paths, seed, clamp=True)
    ref = unclamped if reference is None else reference
    return (unclamped - clamped) / ref


def price(artifacts, spec: ModelSpec, payoff, n_paths: int = DEFAULT_PATHS, seed: int = 0,
          with_impact: bool = False, reference: float | None = None) -> PriceReport:
    t0 = time.perf_counter()
    mean, half = actor_price(artifacts, spec, payoff, n_paths, seed)
    crit = critic_price(artifacts, spec, bool(getattr(payoff, "augmented", False)))
    impact = None
    if with_impact:
        try:
            impact = clamped_price_impact(artifacts, spec, payoff, n_paths, seed, reference, unclamped=mean)
        except PsdRepairError as exc:
            log.error("clamped diagnostic aborted: %s", exc)
    return PriceReport(mean, half, crit, n_paths, time.perf_counter() - t0, seed, impact)


def append_results(path, rows) -> None:
    """Append rows (dicts keyed by ``RESULT_COLUMNS``) to a versioned results CSV."""
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "a", newline="") as fh:
        if new:
            fh.write(f"# schema: {RESULTS_SCHEMA}\n")
        w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, extrasaction="ignore")
        if new:
            w.writeheader()
        for row in rows:
            w.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in RESULT_COLUMNS})


def read_results(path) -> list[dict]:
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("# schema:"):
            raise ValueError("results file lacks a schema tag")
        tag = first.split(":", 1)[1].strip()
        if tag != RESULTS_SCHEMA:
            raise ValueError(f"unsupported results schema {tag!r}")
        return list(csv.DictReader(fh))
