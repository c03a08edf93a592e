"""End-to-end acceptance criteria.

Each test trains at the reduced budgets (200 outer and 10 inner epochs with
2^14 samples per epoch), prices with 2^18 antithetic paths and prints one
PASS/FAIL line. Trained runs are cached so criteria sharing a configuration
reuse it. The whole module takes roughly half an hour on one core.
"""
import dataclasses
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from robustvol.config import preset
from robustvol.dynamics import sample_states
from robustvol.oracle import black_scholes_call, bsb1d_solve, dp_bruteforce
from robustvol.pricer import clamped_price_impact, price
from robustvol.propcheck import run_all
from robustvol.trainer import train_backward

pytestmark = pytest.mark.slow

PATHS = 2 ** 18
CALL_REF = black_scholes_call(100.0, 100.0, 0.2, 0.0, 1.0)
_RUNS = {}


def report(k, ok, detail):
    line = f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def trained(name, steps=None, family="continuous", seed=0, beta=None):
    key = (name, steps, family, seed, beta)
    if key not in _RUNS:
        cfg = preset(name, family=family)
        if steps is not None:
            cfg = cfg.replace(model=dataclasses.replace(cfg.model, steps=steps))
        if beta is not None:
            cfg = cfg.replace(schedule=dataclasses.replace(cfg.schedule, penalty_beta=beta))
        cfg = cfg.replace(seed=seed).validate()
        spec, pay = cfg.model_spec(), cfg.payoff_spec()
        t0 = time.perf_counter()
        arts = train_backward(spec, pay, cfg.schedule, family, seed)
        rep = price(arts, spec, pay, PATHS, seed)
        _RUNS[key] = dict(spec=spec, payoff=pay, arts=arts, report=rep, ref=cfg.reference,
                          seconds=time.perf_counter() - t0)
    return _RUNS[key]


def rel(x, ref):
    return abs(x - ref) / ref


def test_criterion_1_property_suite():
    t0 = time.perf_counter()
    checks = run_all(0)
    secs = time.perf_counter() - t0
    failed = [c.name for c in checks if not c.passed]
    ok = not failed and secs < 120
    report(1, ok, f"{len(checks)} properties, failed={failed or 'none'}, {secs:.1f}s (limit 120s)")
    assert ok


def test_criterion_2_oracle_consistency():
    t0 = time.perf_counter()
    call = lambda x: np.maximum(x - 100.0, 0.0)
    flat = bsb1d_solve(call, 0.2, 0.2, 0.0, 1.0).value
    convex = bsb1d_solve(call, 0.1, 0.2, 0.0, 1.0).value
    spread = lambda x: np.maximum(x - 90.0, 0.0) - np.maximum(x - 110.0, 0.0)
    from robustvol.model import ModelSpec
    dp = dp_bruteforce(ModelSpec(dim=1, steps=2), lambda x: spread(x[:, 0]))
    fd2 = bsb1d_solve(spread, 0.1, 0.2, 0.0, 1.0, control_steps=2).value
    secs = time.perf_counter() - t0
    e1, e2, e3 = rel(flat, CALL_REF), rel(convex, CALL_REF), rel(dp, fd2)
    ok = e1 < 1e-3 and e2 < 1e-3 and e3 < 5e-3 and secs < 300
    report(2, ok, f"flat-vol FD err {e1:.2e}, convex FD vs BS(max) {e2:.2e} (tol 1e-3); "
                  f"dp N=2 {dp:.5f} vs 2-step FD {fd2:.5f} err {e3:.2e} (tol 5e-3); {secs:.0f}s")
    assert ok


def test_criterion_3_one_dimensional_call():
    parts, ok = [], True
    for fam in ("continuous", "bangbang"):
        run = trained("call_1d", family=fam)
        e = rel(run["report"].actor_price, CALL_REF)
        ok &= e <= 0.01 and run["seconds"] <= 600
        parts.append(f"{fam} {run['report'].actor_price:.4f} (err {e:.2%}, {run['seconds']:.0f}s)")
    run = trained("call_1d", family="bangbang")
    spec = run["spec"]
    rng = np.random.default_rng(123)
    hits = total = 0
    for art in run["arts"]:
        x = sample_states(art.n, 4096, spec, rng)
        bits = art.actor.deterministic(x).bits
        hits += int(bits.sum())
        total += bits.size
    share = hits / total
    ok &= share >= 0.99
    report(3, ok, f"reference {CALL_REF:.4f} tol 1%: " + ", ".join(parts) + f"; sigma_max share {share:.2%} (>= 99%)")
    assert ok


def test_criterion_4_geo_call_spread_d2():
    run = trained("geo_call_spread_d2")
    r = run["report"]
    ea, ec = rel(r.actor_price, 10.50), rel(r.critic_price, 10.50)
    ok = ea <= 0.015 and ec <= 0.015 and run["seconds"] <= 1200
    report(4, ok, f"actor {r.actor_price:.4f} (err {ea:.2%}), critic {r.critic_price:.4f} (err {ec:.2%}), "
                  f"reference 10.50 tol 1.5%, {run['seconds']:.0f}s")
    assert ok


def test_criterion_5_geo_outperformer_uncertain():
    parts, ok = [], True
    for fam in ("continuous", "bangbang"):
        r = trained("geo_outperformer_d2", family=fam)["report"]
        e = rel(r.actor_price, 13.75)
        ok &= e <= 0.02
        parts.append(f"{fam} {r.actor_price:.4f} (err {e:.2%})")
    bounds = []
    for seed in (0, 1, 2):
        r = trained("geo_outperformer_d2", seed=seed)["report"]
        lb = r.actor_price - 2 * r.std_error
        bounds.append(lb)
        ok &= lb <= 13.75 * 1.02
    report(5, ok, "reference 13.75 tol 2%: " + ", ".join(parts)
           + "; actor - 2SE over seeds 0-2: " + ", ".join(f"{b:.4f}" for b in bounds) + f" (<= {13.75 * 1.02:.4f})")
    assert ok


def test_criterion_6_geo_call_spread_d20():
    run = trained("geo_call_spread_d20")
    r = run["report"]
    e = rel(r.actor_price, 9.53)
    ok = e <= 0.01 and run["seconds"] <= 1800
    report(6, ok, f"actor {r.actor_price:.4f} (err {e:.2%}), reference 9.53 tol 1%, {run['seconds']:.0f}s")
    assert ok


def test_criterion_7_penalty_strength():
    impacts = {}
    for beta in (0.1, 10.0):
        run = trained("geo_outperformer_d3", steps=32, beta=beta)
        impacts[beta] = clamped_price_impact(run["arts"], run["spec"], run["payoff"], PATHS, 0,
                                             unclamped=run["report"].actor_price)
    ok = impacts[0.1] > 0.01 and impacts[10.0] < 0.005
    report(7, ok, f"clamped impact beta=0.1: {impacts[0.1]:.2%} (> 1%), beta=10: {impacts[10.0]:.2%} (< 0.5%)")
    assert ok


def _trend_ok(errors, halfwidths, ref):
    """Nonincreasing errors with at most one inversion, which must lie within the combined CI."""
    inversions = 0
    for k in range(len(errors) - 1):
        if errors[k + 1] > errors[k]:
            inversions += 1
            if errors[k + 1] - errors[k] > (halfwidths[k] + halfwidths[k + 1]) / ref:
                return False
    return inversions <= 1


def test_criterion_8_convergence_in_steps():
    ok, parts = True, []
    for name, ref in (("call_1d", CALL_REF), ("geo_call_spread_d2", 10.50)):
        reps = [trained(name, steps=n)["report"] for n in (8, 16, 32, 64)]
        half = [r.ci_halfwidth for r in reps]
        ea = [rel(r.actor_price, ref) for r in reps]
        ec = [rel(r.critic_price, ref) for r in reps]
        below = all(r.actor_price - 2 * r.std_error <= ref for r in reps)
        ta, tc = _trend_ok(ea, half, ref), _trend_ok(ec, half, ref)
        ok &= ta and tc and below
        parts.append(f"{name}: actor errs " + "/".join(f"{e:.2%}" for e in ea) + f" trend {'ok' if ta else 'FAIL'}"
                     + ", critic errs " + "/".join(f"{e:.2%}" for e in ec) + f" trend {'ok' if tc else 'FAIL'}"
                     + f", from below {'ok' if below else 'FAIL'}")
    report(8, ok, "N=8/16/32/64; " + "; ".join(parts))
    assert ok
