"""Command line driver: ``robustvol {price,sweep,oracle,propcheck}``.

Every run writes into ``--out`` (default: the config's output directory)::

    results.csv          one row per priced experiment, schema-tagged
    learning_curves.csv  per-epoch training records
    checkpoints/         actor and critic weights per time step
    run-metadata.txt     git revision, seed and the config snapshot
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import math
import os
import subprocess
import sys
import time

import numpy as np

from . import config as cfgmod
from .config import ConfigError, ExperimentConfig
from .oracle import FdGrid, black_scholes_call, bsb1d_solve, dp_bruteforce
from .pricer import append_results, price
from .propcheck import run_all
from .trainer import TrainingError, train_backward

log = logging.getLogger("robustvol")

CURVE_SCHEMA = "robustvol-curves-v1"
CURVE_COLUMNS = ("step", "epoch", "critic_loss", "actor_objective", "penalty", "entropy", "clip_fraction",
                 "lr", "lambda_or_gamma")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_TRAINING = 0, 1, 2, 3


def git_revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=os.path.dirname(os.path.abspath(__file__)))
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_metadata(out_dir: str, cfg: ExperimentConfig, extra: dict | None = None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run-metadata.txt"), "w") as fh:
        # header lines are comments so the file can be fed back through --config
        fh.write(f"# git_revision: {git_revision()}\n")
        fh.write(f"# seed: {cfg.seed}\n")
        fh.write(f"# started: {time.strftime('%Y-%m-%dT%H:%M:%S')}\n")
        for k, v in (extra or {}).items():
            fh.write(f"# {k}: {v}\n")
        fh.write("\n# config snapshot\n")
        fh.write(cfgmod.dumps(cfg))


def append_curves(path: str, artifacts, label: dict | None = None) -> None:
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    cols = tuple(label or {}) + CURVE_COLUMNS
    with open(path, "a", newline="") as fh:
        if new:
            fh.write(f"# schema: {CURVE_SCHEMA}\n")
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        if new:
            w.writeheader()
        for art in sorted(artifacts, key=lambda a: -a.n):
            for rec in art.learning_curve:
                w.writerow({**(label or {}), **rec})


def _progress(n, art, elapsed):
    last = art.learning_curve[-1] if art.learning_curve else {}
    log.info("step %d done (%.0fs), critic loss %.4g", n, elapsed, last.get("critic_loss", float("nan")))


def run_price(cfg: ExperimentConfig, out_dir: str, label: dict | None = None) -> dict:
    """Train, price and record one experiment; returns the results row."""
    spec = cfg.model_spec()
    pay = cfg.payoff_spec()
    ckpt = os.path.join(out_dir, "checkpoints", *[f"{k}={v}" for k, v in (label or {}).items()])
    t0 = time.perf_counter()
    arts = train_backward(spec, pay, cfg.schedule, cfg.policy_family, cfg.seed, ckpt, _progress)
    impact = spec.uncertain and spec.dim >= 3 and cfg.policy_family == "continuous"
    ref = None if math.isnan(cfg.reference) else cfg.reference
    rep = price(arts, spec, pay, cfg.paths, cfg.seed, with_impact=impact, reference=ref)
    runtime = time.perf_counter() - t0
    append_curves(os.path.join(out_dir, "learning_curves.csv"), arts, label)
    row = dict(option=pay.kind, d=spec.dim, policy_family=cfg.policy_family, corr_mode=spec.corr_mode,
               N=spec.steps, actor_price=rep.actor_price, ci_halfwidth=rep.ci_halfwidth,
               critic_price=rep.critic_price, reference=ref, runtime_s=round(runtime, 2), seed=cfg.seed,
               violation_impact=rep.violation_impact)
    append_results(os.path.join(out_dir, "results.csv"), [row])
    return row


_SWEEPS = {
    "sweep_N": ("N", lambda c, v: c.replace(model=dataclasses.replace(c.model, steps=int(v)))),
    "sweep_beta": ("beta", lambda c, v: c.replace(schedule=dataclasses.replace(c.schedule, penalty_beta=float(v)))),
    "sweep_E": ("E", lambda c, v: c.replace(schedule=dataclasses.replace(c.schedule, inner_epochs=int(v)))),
}


def run_sweep(cfg: ExperimentConfig, out_dir: str) -> list[dict]:
    name, apply = _SWEEPS[cfg.mode]
    rows = []
    for v in cfg.sweep_values:
        sub = apply(cfg, v).validate()
        log.info("sweep %s = %s", name, v)
        rows.append(run_price(sub, out_dir, {name: f"{v:g}"}))
    return rows


def run_oracle(cfg: ExperimentConfig, out_dir: str) -> list[dict]:
    """Reference values for the configured model; one-asset or tiny discrete instances only."""
    spec = cfg.model_spec()
    pay = cfg.payoff_spec()
    rows = []
    base = dict(option=pay.kind, d=spec.dim, corr_mode=spec.corr_mode, ci_halfwidth=0.0, critic_price=None,
                reference=None if math.isnan(cfg.reference) else cfg.reference, seed=cfg.seed)
    if spec.dim == 1 and not pay.augmented:
        t0 = time.perf_counter()
        sol = bsb1d_solve(lambda x: pay(x[:, None]), spec.vol_lo[0], spec.vol_hi[0], spec.rate, spec.horizon,
                          FdGrid(), float(spec.spot[0]))
        rows.append({**base, "policy_family": "oracle:bsb1d", "N": "inf", "actor_price": sol.value,
                     "runtime_s": round(time.perf_counter() - t0, 2)})
        if pay.kind == "call":
            for s in (spec.vol_lo[0], spec.vol_hi[0]):
                bs = black_scholes_call(spec.spot[0], pay.strikes[0], s, spec.rate, spec.horizon)
                rows.append({**base, "policy_family": f"oracle:black_scholes(sigma={s})", "N": "inf",
                             "actor_price": bs, "runtime_s": 0.0})
    if spec.dim <= 2 and spec.steps <= 3:
        t0 = time.perf_counter()
        v = dp_bruteforce(spec, pay)
        rows.append({**base, "policy_family": "oracle:dp_bruteforce", "N": spec.steps, "actor_price": v,
                     "runtime_s": round(time.perf_counter() - t0, 2)})
    if not rows:
        raise ConfigError("model", "no reference solver covers this configuration "
                                   "(need d=1, or d<=2 with at most 3 steps)")
    append_results(os.path.join(out_dir, "results.csv"), rows)
    return rows


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="robustvol", description="Robust option pricing under uncertain volatility.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", metavar="PATH", help="experiment config file (key = value lines)")
        sp.add_argument("--preset", choices=sorted(cfgmod.PRESETS), help="builtin experiment")
        sp.add_argument("--family", choices=("continuous", "bangbang"), help="policy family override")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--paths", type=int, help="Monte Carlo paths for the actor price")
        sp.add_argument("--paper-scale", action="store_true", help="full training budgets and time grids")
        sp.add_argument("--out", metavar="DIR", help="output directory")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")

    common(sub.add_parser("price", help="train and price one experiment"))
    sw = sub.add_parser("sweep", help="repeat an experiment over N, beta or the inner epoch budget")
    common(sw)
    sw.add_argument("--param", choices=("N", "beta", "E"), required=True)
    sw.add_argument("--values", required=True, help="comma separated values")
    common(sub.add_parser("oracle", help="reference solvers"))
    pc = sub.add_parser("propcheck", help="run the property suite")
    pc.add_argument("--seed", type=int, default=0)
    return p


def resolve_config(args) -> ExperimentConfig:
    if args.preset:
        cfg = cfgmod.preset(args.preset, args.paper_scale, args.family)
    else:
        cfg = ExperimentConfig()
        if args.paper_scale:
            cfg.schedule = dataclasses.replace(cfg.schedule, **cfgmod.PAPER)
    if args.config:
        cfg = cfgmod.load(args.config, cfg)
    if args.family:
        cfg.policy_family = args.family
    sched = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(item, "overrides must look like key=value")
        k, v = item.split("=", 1)
        cfgmod.set_value(cfg, k.strip(), v, sched)
    if sched:
        try:
            cfg.schedule = dataclasses.replace(cfg.schedule, **sched)
        except ValueError as exc:
            raise ConfigError("schedule", str(exc)) from exc
    if args.seed is not None:
        cfg.seed = args.seed
    if args.paths is not None:
        cfg.paths = args.paths
    if args.out:
        cfg.output_dir = args.out
    cmd = args.command
    if cmd == "sweep":
        cfg.mode = {"N": "sweep_N", "beta": "sweep_beta", "E": "sweep_E"}[args.param]
        try:
            cfg.sweep_values = tuple(float(x) for x in args.values.split(",") if x.strip())
        except ValueError as exc:
            raise ConfigError("sweep.values", str(exc)) from exc
    else:
        cfg.mode = cmd
    return cfg.validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "propcheck":
        results = run_all(args.seed)
        for r in results:
            print(r.line())
        ok = all(r.passed for r in results)
        print("propcheck:", "all passed" if ok else "FAILED")
        return EXIT_OK if ok else EXIT_FAIL
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = cfg.output_dir
    write_metadata(out, cfg)
    np.seterr(over="ignore", under="ignore")
    try:
        if cfg.mode == "price":
            rows = [run_price(cfg, out)]
        elif cfg.mode.startswith("sweep"):
            rows = run_sweep(cfg, out)
        else:
            rows = run_oracle(cfg, out)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    for row in rows:
        ci = row.get("ci_halfwidth") or 0.0
        critic = row.get("critic_price")
        extra = "" if critic is None else f"  critic {critic:.4f}"
        print(f"{row['option']} d={row['d']} N={row['N']} {row['policy_family']}: "
              f"{row['actor_price']:.4f} +- {ci:.4f}{extra}")
    print(f"results written to {os.path.join(out, 'results.csv')}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
