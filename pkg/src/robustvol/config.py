"""Experiment configuration.

Configs are flat ``key = value`` text files with dotted section names::

    mode = price
    model.dim = 2
    payoff.kind = geo_call_spread
    payoff.strikes = 90, 110
    schedule.outer_epochs = 200

Volatility and correlation bounds are homogeneous across assets, as in all
tabulated experiments. Unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .corrvine import CorrBounds
from .model import ModelSpec
from .payoffs import PayoffSpec
from .pricer import DEFAULT_PATHS
from .trainer import FAMILIES, TrainSchedule

MODES = ("price", "sweep_N", "sweep_beta", "sweep_E", "oracle", "propcheck")


class ConfigError(ValueError):
    def __init__(self, key: str, msg: str):
        super().__init__(f"{key}: {msg}")
        self.key = key


@dataclass
class ModelConfig:
    dim: int = 1
    spot: float = 100.0
    rate: float = 0.0
    horizon: float = 1.0
    steps: int = 32
    vol_lo: float = 0.1
    vol_hi: float = 0.2
    corr_mode: str = "fixed"
    corr_lo: float = -0.5
    corr_hi: float = 0.5
    corr_fixed: float = 0.0      # common off-diagonal value

    def build(self) -> ModelSpec:
        d = self.dim
        fixed = np.full((d, d), self.corr_fixed)
        np.fill_diagonal(fixed, 1.0)
        return ModelSpec(dim=d, spot=self.spot, rate=self.rate, horizon=self.horizon, steps=self.steps,
                         vol_lo=self.vol_lo, vol_hi=self.vol_hi, corr_mode=self.corr_mode,
                         corr_bounds=CorrBounds.uniform(d, self.corr_lo, self.corr_hi), corr_fixed=fixed)


@dataclass
class PayoffConfig:
    kind: str = "call"
    strikes: tuple = (100.0,)
    sharpe_cap: float = 1e6

    def build(self, model: ModelConfig) -> PayoffSpec:
        return PayoffSpec(self.kind, model.dim, tuple(self.strikes), model.horizon, self.sharpe_cap)


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    payoff: PayoffConfig = field(default_factory=PayoffConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    policy_family: str = "continuous"
    seed: int = 0
    output_dir: str = "runs/default"
    mode: str = "price"
    paths: int = DEFAULT_PATHS
    sweep_values: tuple = ()
    reference: float = float("nan")
    meta: dict = field(default_factory=dict)

    def validate(self) -> "ExperimentConfig":
        if self.mode not in MODES:
            raise ConfigError("mode", f"must be one of {MODES}")
        if self.policy_family not in FAMILIES:
            raise ConfigError("policy_family", f"must be one of {FAMILIES}")
        if self.paths < 2 or self.paths % 2:
            raise ConfigError("paths", "must be even and at least 2")
        try:
            spec = self.model.build()
        except ValueError as exc:
            raise ConfigError("model", str(exc)) from exc
        try:
            pay = self.payoff.build(self.model)
        except ValueError as exc:
            raise ConfigError("payoff", str(exc)) from exc
        if self.policy_family == "bangbang" and spec.uncertain and spec.dim >= 3:
            raise ConfigError("policy_family", "bang-bang policies need fixed correlation when d >= 3")
        if pay.augmented:
            try:
                spec.monitoring_stride()
            except ValueError as exc:
                raise ConfigError("model.steps", str(exc)) from exc
        if self.mode.startswith("sweep") and not self.sweep_values:
            raise ConfigError("sweep.values", "sweep modes need at least one value")
        return self

    def model_spec(self) -> ModelSpec:
        return self.model.build()

    def payoff_spec(self) -> PayoffSpec:
        return self.payoff.build(self.model)

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


# -- text format -----------------------------------------------------------------

_TOP = {"policy_family": "policy_family", "seed": "seed", "output_dir": "output_dir", "mode": "mode",
        "pricing.paths": "paths", "sweep.values": "sweep_values", "reference": "reference"}
_SECTIONS = {"model": ModelConfig, "payoff": PayoffConfig, "schedule": TrainSchedule}


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(key: str, raw: str, like):
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            if raw.lower() not in ("true", "false"):
                raise ValueError("expected true or false")
            return raw.lower() == "true"
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            return tuple(float(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(key, f"cannot parse {raw!r}: {exc}") from exc


def dumps(cfg: ExperimentConfig) -> str:
    lines = []
    for key, attr in _TOP.items():
        lines.append(f"{key} = {_format(getattr(cfg, attr))}")
    for sec, _ in _SECTIONS.items():
        obj = getattr(cfg, sec)
        for f in dataclasses.fields(obj):
            lines.append(f"{sec}.{f.name} = {_format(getattr(obj, f.name))}")
    for k, v in sorted(cfg.meta.items()):
        lines.append(f"meta.{k} = {v}")
    return "\n".join(lines) + "\n"


def loads(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse config text; keys not present keep the values of ``base``."""
    cfg = dataclasses.replace(base) if base is not None else ExperimentConfig()
    cfg.model = dataclasses.replace(cfg.model)
    cfg.payoff = dataclasses.replace(cfg.payoff)
    cfg.schedule = dataclasses.replace(cfg.schedule)
    cfg.meta = dict(cfg.meta)
    sched = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", "expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        set_value(cfg, key, raw, sched)
    if sched:
        try:
            cfg.schedule = dataclasses.replace(cfg.schedule, **sched)
        except ValueError as exc:
            raise ConfigError("schedule", str(exc)) from exc
    return cfg


def set_value(cfg: ExperimentConfig, key: str, raw: str, sched: dict | None = None) -> None:
    if key in _TOP:
        attr = _TOP[key]
        setattr(cfg, attr, _coerce(key, raw, getattr(cfg, attr)))
        return
    sec, _, name = key.partition(".")
    if sec == "meta" and name:
        cfg.meta[name] = raw.strip()
        return
    if sec not in _SECTIONS or not name:
        raise ConfigError(key, "unknown key")
    obj = getattr(cfg, sec)
    if name not in {f.name for f in dataclasses.fields(obj)}:
        raise ConfigError(key, "unknown key")
    val = _coerce(key, raw, getattr(obj, name))
    if sec == "schedule" and sched is not None:
        sched[name] = val        # validated together once all keys are read
    elif sec == "schedule":
        try:
            cfg.schedule = dataclasses.replace(cfg.schedule, **{name: val})
        except ValueError as exc:
            raise ConfigError(key, str(exc)) from exc
    else:
        setattr(obj, name, val)


def load(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    with open(path) as fh:
        return loads(fh.read(), base)


def same(a: ExperimentConfig, b: ExperimentConfig) -> bool:
    """Field-wise equality treating NaN as equal to NaN."""
    return dumps(a) == dumps(b)


# -- presets ---------------------------------------------------------------------

REDUCED = dict(outer_epochs=200, inner_epochs=10, mc_samples=2 ** 14)
PAPER = dict(outer_epochs=500, inner_epochs=10, mc_samples=2 ** 15)


def _preset(model: dict, payoff: dict, table: str, reference: float, paper_steps: int | None = None,
            family: str = "continuous", note: str = ""):
    return dict(model=model, payoff=payoff, table=table, reference=reference,
                paper_steps=paper_steps or model.get("steps"), family=family, note=note)


_FIXED_TABLE = "Fixed-correlation tests"
_UNC_TABLE = "Uncertain-correlation tests"
_BUTTERFLY_MODEL = dict(vol_lo=0.3, vol_hi=0.5, corr_lo=0.3, corr_hi=0.5, horizon=0.25, rate=0.05)

PRESETS = {
    "call_1d": _preset(dict(dim=1, steps=32), dict(kind="call", strikes=(100.0,)),
                       "none (closed form at the upper volatility)", 7.965567455405804,
                       note="reference is the Black-Scholes call at sigma=0.2"),
    "geo_call_spread_d2": _preset(dict(dim=2, steps=64), dict(kind="geo_call_spread", strikes=(90.0, 110.0)),
                                  f"{_FIXED_TABLE}, d=2", 10.50),
    "geo_call_spread_d5": _preset(dict(dim=5, steps=64), dict(kind="geo_call_spread", strikes=(90.0, 110.0)),
                                  f"{_FIXED_TABLE}, d=5", 9.70),
    "geo_call_spread_d10": _preset(dict(dim=10, steps=64), dict(kind="geo_call_spread", strikes=(90.0, 110.0)),
                                   f"{_FIXED_TABLE}, d=10", 9.55),
    "geo_call_spread_d20": _preset(dict(dim=20, steps=32), dict(kind="geo_call_spread", strikes=(90.0, 110.0)),
                                   f"{_FIXED_TABLE}, d=20", 9.53),
    "geo_call_spread_d40": _preset(dict(dim=40, steps=32), dict(kind="geo_call_spread", strikes=(90.0, 110.0)),
                                   f"{_FIXED_TABLE}, d=40", 9.51),
    "geo_call_spread_d80": _preset(dict(dim=80, steps=32), dict(kind="geo_call_spread", strikes=(90.0, 110.0)),
                                   f"{_FIXED_TABLE}, d=80", 9.51),
    "call_sharpe": _preset(dict(dim=1, steps=192), dict(kind="call_sharpe", strikes=(100.0,)),
                           f"{_FIXED_TABLE}, call Sharpe", 58.40),
    "geo_outperformer_d2": _preset(dict(dim=2, steps=64, corr_mode="uncertain"), dict(kind="geo_outperformer", strikes=()),
                                   f"{_UNC_TABLE}, d=2", 13.75, paper_steps=128),
    "geo_outperformer_d3": _preset(dict(dim=3, steps=64, corr_mode="uncertain"), dict(kind="geo_outperformer", strikes=()),
                                   f"{_UNC_TABLE}, d=3", 12.96, paper_steps=128),
    "geo_outperformer_d4": _preset(dict(dim=4, steps=64, corr_mode="uncertain"), dict(kind="geo_outperformer", strikes=()),
                                   f"{_UNC_TABLE}, d=4", 12.73, paper_steps=128),
    "geo_outperformer_d5": _preset(dict(dim=5, steps=64, corr_mode="uncertain"), dict(kind="geo_outperformer", strikes=()),
                                   f"{_UNC_TABLE}, d=5", 12.64, paper_steps=128),
    "outperformer_spread_d2": _preset(dict(dim=2, steps=64, corr_mode="uncertain"),
                                      dict(kind="outperformer_spread", strikes=(0.9, 1.1)),
                                      f"{_UNC_TABLE}, outperformer spread", 12.83, paper_steps=128),
    "best_of_butterfly_d2": _preset(dict(dim=2, steps=64, corr_mode="uncertain", **_BUTTERFLY_MODEL),
                                    dict(kind="best_of_butterfly", strikes=(85.0, 115.0)),
                                    f"{_UNC_TABLE}, best-of butterfly", 6.70, paper_steps=128),
}


def preset(name: str, paper_scale: bool = False, family: str | None = None) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError("preset", f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    p = PRESETS[name]
    model = ModelConfig(**p["model"])
    if paper_scale:
        model.steps = p["paper_steps"]
    budget = PAPER if paper_scale else REDUCED
    cfg = ExperimentConfig(
        model=model,
        payoff=PayoffConfig(kind=p["payoff"]["kind"], strikes=tuple(p["payoff"]["strikes"])),
        schedule=TrainSchedule(**budget),
        policy_family=family or p["family"],
        output_dir=f"runs/{name}",
        reference=float(p["reference"]),
        meta={"preset": name, "table_row": p["table"], "reference_price": f"{p['reference']}",
              "scale": "paper" if paper_scale else "reduced"},
    )
    if p["note"]:
        cfg.meta["note"] = p["note"]
    return cfg


def is_nan(v) -> bool:
    return isinstance(v, float) and math.isnan(v)
