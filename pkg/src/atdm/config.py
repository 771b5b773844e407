"""YAML run configuration with the parameter names of the base-case table.

Example::

    seed: 0
    data:
      sensors: sensors.csv   # boundary series (and the stretch, if no params file)
      params: params.csv     # optional identified stretch
      demand: demand.csv     # or omit all three and set synthetic: true
    p_EV: 0.05
    lT: 100                  # seconds
    T_h: 15
    W: 3
    delta_bar: 100
    u_bar: 4.16
    incentive: 0.25

Units follow the table: lT and gamma in seconds, prices in EUR/kWh, energy in
kWh. Relative paths are resolved against the config file's directory.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from pathlib import Path

import yaml

from . import ctm
from .errors import DataFormatError, DomainError
from .game import GameConfig
from .identification import read_sensor_csv
from .pricing import DemandProfile, PriceModel
from .scenario import (CAPACITY_POOL_KWH, AgentPools, ScenarioConfig, config_from_sensors,
                       schedule_from_name, synthetic_base_case)

TABLE_KEYS = ("x_ref", "p_EV", "lT", "T_h", "C_pool", "eta", "delta_bar", "u_max", "u_bar",
              "c1", "c2", "c3", "p_bar", "beta0", "beta1", "W", "gamma", "upsilon",
              "mu_alpha", "sigma_alpha", "incentive")
EXTRA_KEYS = ("seed", "data", "u_min", "soc_range", "incentive_schedule", "step_s",
              "home_price", "eps", "max_sweeps")

DEFAULTS = {
    "x_ref": [0.25, 0.35],
    "p_EV": 0.05,
    "lT": 100.0,
    "T_h": 15,
    "C_pool": list(CAPACITY_POOL_KWH),
    "eta": [0.85, 0.99],
    "delta_bar": 100,
    "u_max": None,
    "u_bar": 4.16,
    "c1": 5.07e-5,
    "c2": 5.07e-5,
    "c3": 0.33,
    "p_bar": 0.205,
    "beta0": 0.0,
    "beta1": 0.3315,
    "W": 3,
    "gamma": 1.79,
    "upsilon": 1.0,
    "mu_alpha": 0.05,
    "sigma_alpha": 0.03,
    "incentive": 0.25,
    "seed": 0,
    "data": {"synthetic": True},
    "u_min": None,
    "soc_range": [0.35, 0.8],
    "incentive_schedule": "constant",
    "step_s": 10.0,
    "home_price": 0.205,
    "eps": 1e-6,
    "max_sweeps": 100,
}


@dataclass(frozen=True)
class LoadedConfig:
    scenario: ScenarioConfig
    raw: dict
    digest: str
    source: Path | None


def _pair(raw, key):
    v = raw[key]
    if not (isinstance(v, (list, tuple)) and len(v) == 2):
        raise DomainError(f"{key} must be a [low, high] pair")
    return float(v[0]), float(v[1])


def _resolve(base: Path | None, p) -> Path:
    path = Path(p)
    return path if path.is_absolute() or base is None else base / path


def parse(raw: dict, base_dir: Path | None = None) -> ScenarioConfig:
    """Build a ScenarioConfig from a mapping with table key names."""
    unknown = set(raw) - set(TABLE_KEYS) - set(EXTRA_KEYS)
    if unknown:
        raise DomainError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    cfg = {**DEFAULTS, **raw}

    step_s = float(cfg["step_s"])
    lT_s = float(cfg["lT"])
    u_bar = float(cfg["u_bar"])
    u_min = u_bar if cfg["u_min"] is None else float(cfg["u_min"])
    game = GameConfig(
        horizon_intervals=int(cfg["T_h"]), half_width=int(cfg["W"]), interval_h=lT_s / 3600.0,
        spots=int(cfg["delta_bar"]),
        station_max_kwh=None if cfg["u_max"] is None else float(cfg["u_max"]),
        u_min_kwh=u_min, u_max_kwh=u_bar, idle_weight=float(cfg["upsilon"]),
        s2r_scale_h=float(cfg["gamma"]) / 3600.0, eps=float(cfg["eps"]),
        max_sweeps=int(cfg["max_sweeps"]))
    price = PriceModel(c1=float(cfg["c1"]), c2=float(cfg["c2"]), c3=float(cfg["c3"]),
                       beta0=float(cfg["beta0"]), beta1=float(cfg["beta1"]),
                       avg_price=float(cfg["p_bar"]))
    pools = AgentPools(capacity_kwh=tuple(float(c) for c in cfg["C_pool"]),
                       efficiency=_pair(cfg, "eta"), soc_ref=_pair(cfg, "x_ref"),
                       soc=_pair(cfg, "soc_range"), home_price=float(cfg["home_price"]))
    incentive = None if cfg["incentive"] is None else \
        schedule_from_name(str(cfg["incentive_schedule"]), float(cfg["incentive"]))
    common = dict(price=price, game=game, incentive=incentive, pev_share=float(cfg["p_EV"]),
                  alpha_mean=float(cfg["mu_alpha"]), alpha_std=float(cfg["sigma_alpha"]),
                  pools=pools, seed=int(cfg["seed"]))

    data = cfg["data"] or {}
    if not isinstance(data, dict):
        raise DomainError("data must be a mapping")
    if data.get("synthetic"):
        base = synthetic_base_case(int(cfg["seed"]))
        return replace(base, **common)
    if "sensors" not in data or "demand" not in data:
        raise DomainError("data needs sensors and demand files (or synthetic: true)")
    frame = read_sensor_csv(_resolve(base_dir, data["sensors"]))
    demand = DemandProfile.read_csv(_resolve(base_dir, data["demand"]))
    if "params" in data:
        from .identification import boundary_from_sensors

        params = ctm.read_params_csv(_resolve(base_dir, data["params"]))
        if abs(params.step_s - step_s) > 1e-9:
            raise DataFormatError(f"params file uses a {params.step_s} s step, config {step_s} s")
        bounds = boundary_from_sensors(frame, params)
        return ScenarioConfig(params, bounds.inflow_vehh, bounds.exit_supply_vehh, demand,
                              start_h=bounds.start_h, **common)
    return config_from_sensors(frame, demand, step_s=step_s, **common)


def load(path) -> LoadedConfig:
    path = Path(path)
    try:
        text = path.read_bytes()
    except OSError as exc:
        raise DataFormatError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise DataFormatError(f"config {path} is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise DataFormatError(f"config {path} must be a mapping")
    return LoadedConfig(parse(raw, path.parent), raw, hashlib.sha256(text).hexdigest(), path)


def dump_defaults() -> str:
    return yaml.safe_dump({k: DEFAULTS[k] for k in (*TABLE_KEYS, *EXTRA_KEYS)}, sort_keys=False)
