"""Closed-loop day: traffic on the CTM clock, PEV decisions on the game clock.

Every game interval (l CTM steps) the loop

1. spawns new PEV agents from the previous interval's cell-1 outflow,
2. forecasts per-cell extra times with the CTM (current inflow and exit
   supply held constant, no station coupling) and turns them into the
   predicted price and the road term xi,
3. solves the charging game for new agents and agents already charging,
4. injects stoppers (r2s) and re-entries (s2r) as flows that stay
   constant over the interval, and advances the CTM,
5. records the interval means and realises the price.

The baseline is the same CTM replay without the station.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from . import ctm, game
from .ctm import StretchParams
from .errors import DomainError, GameNotConverged, UndefinedIndexError
from .game import NO_STOP, GameConfig
from .kernels import F_CELL1_OUT, F_EXIT, F_INFLOW, F_R2S, F_S2R
from .pricing import (DemandProfile, IncentiveSchedule, PriceModel, calibrated,
                      price_components, predicted_price)

log = logging.getLogger(__name__)

CAPACITY_POOL_KWH = (12.0, 17.6, 24.0, 28.0, 40.0, 42.0, 52.0, 58.0, 64.0, 75.0, 77.0,
                     93.4, 100.0)
SWEEP_AXES = ("spots", "incentive", "pev_share", "alpha_std", "incentive_schedule")


@dataclass(frozen=True)
class AgentPools:
    capacity_kwh: tuple[float, ...] = CAPACITY_POOL_KWH
    efficiency: tuple[float, float] = (0.85, 0.99)
    soc_ref: tuple[float, float] = (0.25, 0.35)
    soc: tuple[float, float] = (0.35, 0.8)
    home_price: float = 0.205

    def __post_init__(self):
        if not self.capacity_kwh or any(not 12 <= c <= 100 for c in self.capacity_kwh):
            raise DomainError("battery capacities must lie in [12, 100] kWh")
        for lo, hi in (self.efficiency, self.soc_ref, self.soc):
            if not 0 <= lo <= hi <= 1:
                raise DomainError("pool ranges must be ordered and inside [0, 1]")


@dataclass(frozen=True)
class ScenarioConfig:
    params: StretchParams
    inflow_vehh: np.ndarray = field(repr=False)
    exit_supply_vehh: np.ndarray = field(repr=False)
    demand: DemandProfile = field(repr=False)
    price: PriceModel = PriceModel()
    game: GameConfig = GameConfig()
    incentive: IncentiveSchedule | None = IncentiveSchedule.constant(0.25)
    pev_share: float = 0.05
    alpha_mean: float = 0.05
    alpha_std: float = 0.03
    pools: AgentPools = AgentPools()
    seed: int = 0
    start_h: float = 7.0
    s2r_first: bool = True

    def __post_init__(self):
        inflow = np.array(self.inflow_vehh, dtype=float)
        supply = np.array(self.exit_supply_vehh, dtype=float)
        if inflow.ndim != 1 or inflow.shape != supply.shape:
            raise DomainError("inflow and exit supply must be series of equal length")
        if np.any(inflow < 0) or np.any(supply < 0):
            raise DomainError("boundary flows must be nonnegative")
        for a in (inflow, supply):
            a.setflags(write=False)
        object.__setattr__(self, "inflow_vehh", inflow)
        object.__setattr__(self, "exit_supply_vehh", supply)
        if not 0 <= self.pev_share <= 1:
            raise DomainError("PEV share must lie in [0, 1]")
        if self.alpha_std < 0 or not 0 < self.alpha_mean < 1:
            raise DomainError("alpha needs a mean in (0, 1) and a nonnegative spread")
        ratio = self.game.interval_h * 3600.0 / self.params.step_s
        if abs(ratio - round(ratio)) > 1e-6 or round(ratio) < 1:
            raise DomainError("the game interval must be a whole number of CTM steps")
        if self.n_intervals < 1:
            raise DomainError("the day is shorter than one game interval")

    @property
    def steps_per_interval(self) -> int:
        return int(round(self.game.interval_h * 3600.0 / self.params.step_s))

    @property
    def n_intervals(self) -> int:
        return self.inflow_vehh.size // self.steps_per_interval

    def interval_times_h(self) -> np.ndarray:
        return self.start_h + np.arange(self.n_intervals) * self.game.interval_h

    def with_axis(self, name: str, value) -> "ScenarioConfig":
        """Copy with one sweep axis set."""
        if name == "spots":
            g = self.game
            station = None if g.station_max_kwh is None else int(value) * g.u_max_kwh
            return replace(self, game=replace(g, spots=int(value), station_max_kwh=station))
        if name == "incentive":
            base = self.incentive or IncentiveSchedule.constant(0.0)
            return replace(self, incentive=replace(base, fraction=float(value)))
        if name == "pev_share":
            return replace(self, pev_share=float(value))
        if name == "alpha_std":
            return replace(self, alpha_std=float(value))
        if name == "incentive_schedule":
            frac = self.incentive.fraction if self.incentive else 0.0
            return replace(self, incentive=schedule_from_name(str(value), frac))
        raise DomainError(f"unknown sweep axis {name!r}; known: {', '.join(SWEEP_AXES)}")


def schedule_from_name(name: str, fraction: float) -> IncentiveSchedule:
    if name == "constant":
        return IncentiveSchedule.constant(fraction)
    if name == "two_band":
        return IncentiveSchedule.two_band(fraction)
    raise DomainError(f"unknown incentive schedule {name!r} (constant, two_band)")


# ---------------------------------------------------------------- agents

@dataclass
class AgentBatch:
    """Structure-of-arrays agent population (one row per PEV)."""
    agent_id: np.ndarray
    capacity: np.ndarray
    eta: np.ndarray
    soc: np.ndarray
    soc_ref: np.ndarray
    alpha: np.ndarray
    home_price: np.ndarray

    def __len__(self):
        return self.agent_id.size

    @classmethod
    def empty(cls) -> "AgentBatch":
        return cls(np.zeros(0, dtype=np.int64), *(np.zeros(0) for _ in range(6)))

    def take(self, idx) -> "AgentBatch":
        return AgentBatch(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))

    @staticmethod
    def concat(a: "AgentBatch", b: "AgentBatch") -> "AgentBatch":
        return AgentBatch(*(np.concatenate((getattr(a, f), getattr(b, f)))
                            for f in AgentBatch.__dataclass_fields__))


def _truncated_normal(rng, mean, std, n) -> np.ndarray:
    """Normal draws restricted to (0, 1) by rejection."""
    if std == 0:
        return np.full(n, mean)
    out = np.empty(n)
    filled = 0
    while filled < n:
        x = rng.normal(mean, std, size=max(2 * (n - filled), 16))
        x = x[(x > 0) & (x < 1)]
        take = min(x.size, n - filled)
        out[filled: filled + take] = x[:take]
        filled += take
    return out


def spawn_agents(outflow_vehh: float, interval_h: float, pev_share: float, rng,
                 pools: AgentPools = AgentPools(), alpha_mean: float = 0.05,
                 alpha_std: float = 0.03, first_id: int = 0) -> AgentBatch:
    """New PEVs among the vehicles leaving cell 1 in one interval.

    The vehicle count flow*lT is stochastically rounded, then each vehicle
    is a PEV with probability ``pev_share``.
    """
    if outflow_vehh < 0:
        raise DomainError("flow must be nonnegative")
    vehicles = outflow_vehh * interval_h
    whole = math.floor(vehicles)
    n_veh = whole + int(rng.random() < vehicles - whole)
    n = int(rng.binomial(n_veh, pev_share)) if pev_share > 0 else 0
    if n == 0:
        return AgentBatch.empty()
    return AgentBatch(
        agent_id=np.arange(first_id, first_id + n, dtype=np.int64),
        capacity=rng.choice(np.asarray(pools.capacity_kwh, dtype=float), size=n),
        eta=rng.uniform(*pools.efficiency, size=n),
        soc=rng.uniform(*pools.soc, size=n),
        soc_ref=rng.uniform(*pools.soc_ref, size=n),
        alpha=_truncated_normal(rng, alpha_mean, alpha_std, n),
        home_price=np.full(n, pools.home_price),
    )


# ---------------------------------------------------------------- results

@dataclass
class Baseline:
    delta_h: np.ndarray        # (K, N) interval means without the station
    flows: np.ndarray          # (K, 5) interval means of the kernel flow columns

    @property
    def total(self) -> np.ndarray:
        return self.delta_h.sum(axis=1)

    @property
    def downstream(self) -> np.ndarray:
        return self.delta_h[:, 1:].sum(axis=1)


@dataclass
class ScenarioResult:
    times_h: np.ndarray
    delta_h: np.ndarray
    delta0_h: np.ndarray
    r2s_vehh: np.ndarray
    s2r_vehh: np.ndarray
    inflow_vehh: np.ndarray
    exit_vehh: np.ndarray
    occupancy: np.ndarray
    energy_kwh: np.ndarray
    price: np.ndarray
    discount: np.ndarray
    demand_part: np.ndarray
    n_new: np.ndarray
    n_stop: np.ndarray
    n_exit: np.ndarray
    sweeps: np.ndarray
    stays: list = field(default_factory=list)
    at_station_end: int = 0
    c3: float = 0.0
    beta1: float = 0.0
    spots: int = 0
    station_max_kwh: float = 0.0
    pi: float = 0.0

    @property
    def delta_total(self) -> np.ndarray:
        return self.delta_h.sum(axis=1)

    @property
    def delta0_total(self) -> np.ndarray:
        return self.delta0_h.sum(axis=1)

    def violations(self, half_width: int, tol: float = 1e-9) -> list[str]:
        """Coupling and per-agent constraint breaches recorded over the day."""
        out = []
        for k in np.flatnonzero(self.occupancy > self.spots + tol):
            out.append(f"interval {k}: occupancy {self.occupancy[k]:g} > {self.spots}")
        for k in np.flatnonzero(self.energy_kwh > self.station_max_kwh + tol):
            out.append(f"interval {k}: energy {self.energy_kwh[k]:g} > {self.station_max_kwh:g}")
        for s in self.stays:
            if s["stay"] < 2 * half_width + 1:
                out.append(f"agent {s['agent_id']}: stay {s['stay']} < {2 * half_width + 1}")
            if s["soc_out"] < s["soc_ref"] - tol:
                out.append(f"agent {s['agent_id']}: left at SoC {s['soc_out']:.4f} "
                           f"< {s['soc_ref']:.4f}")
        return out

    def summary(self) -> dict:
        d0, d = self.delta0_total, self.delta_total
        k = int(np.argmax(d0))
        return {
            "pi": self.pi,
            "peak_interval": k,
            "peak_time_h": float(self.times_h[k]),
            "peak_delta0_h": float(d0[k]),
            "peak_delta_h": float(d[k]),
            "peak_cut_pct": float((d0[k] - d[k]) / d0[k] * 100) if d0[k] > 0 else 0.0,
            "sum_delta0_h": float(d0.sum()),
            "sum_delta_h": float(d.sum()),
            "c3": self.c3,
            "beta1": self.beta1,
            "agents_spawned": int(self.n_new.sum()),
            "agents_stopped": int(self.n_stop.sum()),
            "agents_reentered": int(self.n_exit.sum()),
            "agents_at_station_end": self.at_station_end,
            "max_occupancy": float(self.occupancy.max(initial=0)),
            "max_energy_kwh": float(self.energy_kwh.max(initial=0)),
            "game_max_sweeps": int(self.sweeps.max(initial=0)),
            "game_mean_sweeps": float(self.sweeps[self.sweeps > 0].mean())
            if np.any(self.sweeps > 0) else 0.0,
            "game_all_converged": True,
        }


def performance_index(delta0, delta) -> float:
    """Percentage cut of the summed extra travel time against the baseline."""
    d0 = np.asarray(delta0, dtype=float)
    d = np.asarray(delta, dtype=float)
    if d0.shape != d.shape:
        raise DomainError("baseline and controlled series differ in length")
    total0 = d0.sum()
    if not total0 > 0:
        raise UndefinedIndexError("baseline has no extra travel time; the index is undefined")
    return float((total0 - d.sum()) / total0 * 100.0)


# ---------------------------------------------------------------- runs

def _interval_means(x: np.ndarray, l: int, k: int) -> np.ndarray:
    return x[: k * l].reshape(k, l, *x.shape[1:]).mean(axis=1)


def run_baseline(config: ScenarioConfig) -> Baseline:
    """CTM replay of the day with no station coupling."""
    l, K = config.steps_per_interval, config.n_intervals
    n = K * l
    _, delta, flows, _ = ctm.run(config.params, np.zeros(config.params.n_cells),
                                 config.inflow_vehh[:n], config.exit_supply_vehh[:n])
    return Baseline(_interval_means(delta, l, K), _interval_means(flows, l, K))


def price_model_for(config: ScenarioConfig, baseline: Baseline) -> PriceModel:
    """Price law with c3 and beta1 calibrated on the baseline peak when an incentive is set."""
    if config.incentive is None:
        return config.price
    return calibrated(config.price, config.incentive, float(baseline.downstream.max()))


def run_atdm(config: ScenarioConfig, baseline: Baseline | None = None,
             trace: list | None = None) -> ScenarioResult:
    """Closed-loop day with the charging game; ``trace`` collects per-agent decisions."""
    baseline = baseline or run_baseline(config)
    model = price_model_for(config, baseline)
    params, g = config.params, config.game
    l, K, H = config.steps_per_interval, config.n_intervals, g.horizon_intervals
    lT = g.interval_h
    rng = np.random.default_rng(config.seed)
    times = config.interval_times_h()
    N = params.n_cells

    rho = np.zeros(N)
    backlog = np.zeros(3)
    out = {name: np.zeros(K) for name in ("r2s", "s2r", "inflow", "exit", "occ", "energy",
                                          "price", "discount", "demand", "n_new", "n_stop",
                                          "n_exit", "sweeps")}
    delta = np.zeros((K, N))
    stays = []

    station = AgentBatch.empty()
    st_elapsed = np.zeros(0, dtype=np.int64)
    st_r = np.zeros(0, dtype=np.int64)
    st_u = np.zeros((0, g.n_slots))
    next_id = 0
    prev_outflow = 0.0

    for k in range(K):
        new = spawn_agents(prev_outflow, lT, config.pev_share, rng, config.pools,
                           config.alpha_mean, config.alpha_std, next_id)
        next_id += len(new)
        agents = AgentBatch.concat(station, new)
        n_old, n_all = len(station), len(agents)
        elapsed = np.concatenate((st_elapsed, np.zeros(len(new), dtype=np.int64)))
        plan_r = np.concatenate((st_r, np.full(len(new), NO_STOP, dtype=np.int64)))
        plan_u = np.vstack((st_u, np.zeros((len(new), g.n_slots))))

        s0 = k * l
        tod = times[k] + np.arange(H + 1) * lT
        if n_all:
            forecast = ctm.predict(params, ctm.CtmState(rho), config.inflow_vehh[s0], H + 1, l,
                                   config.exit_supply_vehh[s0])
            xi = game.xi_from_oracle(forecast)
            p_hat = predicted_price(model, config.demand.window(k, H + 1), xi, tod)
            arrays = {"alpha": agents.alpha, "capacity": agents.capacity, "eta": agents.eta,
                      "soc": agents.soc, "soc_ref": agents.soc_ref,
                      "home_price": agents.home_price, "elapsed": elapsed,
                      "is_new": elapsed == 0}
            converged, sweeps, _, cp, ct = game.solve_arrays(arrays, plan_r, plan_u, g,
                                                             p_hat, xi)
            out["sweeps"][k] = sweeps
            if not converged:
                raise GameNotConverged(f"interval {k}: no equilibrium after {sweeps} sweeps",
                                       interval=k)
            if trace is not None:
                for i in range(n_all):
                    trace.append((k, int(agents.agent_id[i]), int(elapsed[i]), int(plan_r[i]),
                                  float(plan_u[i, 0]), float(cp[i]), float(ct[i])))

        stopping_new = plan_r[n_old:] >= 1
        leaving = (plan_r[:n_old] == 0)
        charging = plan_r >= 1
        u_now = plan_u[:, 0]
        out["n_new"][k] = len(new)
        out["n_stop"][k] = int(stopping_new.sum())
        out["n_exit"][k] = int(leaving.sum())
        out["occ"][k] = int(charging.sum())
        out["energy"][k] = float(u_now.sum())

        for i in np.flatnonzero(leaving):
            stays.append({"agent_id": int(agents.agent_id[i]), "exit_interval": k,
                          "stay": int(elapsed[i]), "soc_out": float(agents.soc[i]),
                          "soc_ref": float(agents.soc_ref[i])})

        r2s = np.full(l, out["n_stop"][k] / lT)
        s2r = np.full(l, out["n_exit"][k] / lT)
        sl = slice(s0, s0 + l)
        traj, d_steps, flows, backlog = ctm.run(params, rho, config.inflow_vehh[sl],
                                                config.exit_supply_vehh[sl], r2s, s2r,
                                                backlog, config.s2r_first)
        rho = traj[-1]
        delta[k] = d_steps.mean(axis=0)
        fm = flows.mean(axis=0)
        out["r2s"][k], out["s2r"][k] = fm[F_R2S], fm[F_S2R]
        out["inflow"][k], out["exit"][k] = fm[F_INFLOW], fm[F_EXIT]
        prev_outflow = float(fm[F_CELL1_OUT])

        price, dem_part, disc = price_components(model, config.demand.window(k, 1)[0],
                                                 out["energy"][k], delta[k, 1:].sum(),
                                                 times[k])
        out["price"][k], out["demand"][k], out["discount"][k] = price, dem_part, disc

        # charge this interval, then carry the agents still at the station
        agents.soc = agents.soc + agents.eta * u_now / agents.capacity
        keep = charging
        station = agents.take(keep)
        st_elapsed = elapsed[keep] + 1
        st_r = plan_r[keep] - 1
        st_u = np.hstack((plan_u[keep, 1:], np.zeros((int(keep.sum()), 1))))

    result = ScenarioResult(
        times, delta, baseline.delta_h, out["r2s"], out["s2r"], out["inflow"], out["exit"],
        out["occ"], out["energy"], out["price"], out["discount"], out["demand"],
        out["n_new"].astype(int), out["n_stop"].astype(int), out["n_exit"].astype(int),
        out["sweeps"].astype(int), stays, len(station), model.c3, model.beta1, g.spots,
        g.station_max)
    result.pi = performance_index(result.delta0_total, result.delta_total)
    return result


# ---------------------------------------------------------------- sweeps

@dataclass(frozen=True)
class SweepSpec:
    axes: dict
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self):
        if not self.axes:
            raise DomainError("a sweep needs at least one axis")
        for name, values in self.axes.items():
            if name not in SWEEP_AXES:
                raise DomainError(f"unknown sweep axis {name!r}; known: {', '.join(SWEEP_AXES)}")
            if len(values) == 0:
                raise DomainError(f"sweep axis {name!r} has no values")
        if not self.seeds:
            raise DomainError("a sweep needs at least one seed")

    def points(self) -> list[dict]:
        names = list(self.axes)
        return [dict(zip(names, combo)) for combo in itertools.product(*self.axes.values())]


def _run_point(args):
    config, baseline, point, seed = args
    try:
        cfg = replace(config, seed=seed)
        for name, value in point.items():
            cfg = cfg.with_axis(name, value)
        res = run_atdm(cfg, baseline)
        return {**point, "seed": seed, "pi": res.pi, "status": "ok", "error": ""}
    except Exception as exc:  # a failing point is reported, the sweep goes on
        return {**point, "seed": seed, "pi": float("nan"), "status": "failed",
                "error": f"{type(exc).__name__}: {exc}"}


def sweep(spec: SweepSpec, config: ScenarioConfig, workers: int = 1) -> pd.DataFrame:
    """Long-format table of pi per grid point and seed.

    None of the sweepable axes touches the traffic replay, so one baseline
    serves the whole grid.
    """
    baseline = run_baseline(config)
    jobs = [(config, baseline, p, s) for p in spec.points() for s in spec.seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_point, jobs))
    else:
        rows = [_run_point(j) for j in jobs]
    for r in rows:
        if r["status"] != "ok":
            log.warning("sweep point %s seed %s failed: %s", {k: r[k] for k in spec.axes},
                        r["seed"], r["error"])
    return pd.DataFrame(rows, columns=[*spec.axes, "seed", "pi", "status", "error"])


# ---------------------------------------------------------------- output

def _fmt(x) -> str:
    return repr(float(x))


def _write_frame(path: Path, columns: dict) -> None:
    frame = pd.DataFrame(columns)
    frame.to_csv(path, index=False, float_format="%.17g")


def write_baseline(baseline: Baseline, times_h, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    cols = {"interval_index": np.arange(len(times_h)), "time_h": times_h,
            "delta0_h": baseline.total}
    for ell in range(baseline.delta_h.shape[1]):
        cols[f"delta0_cell{ell + 1}_h"] = baseline.delta_h[:, ell]
    path = out_dir / "delta.csv"
    _write_frame(path, cols)
    return [path]


def write_result(result: ScenarioResult, out_dir, trace: list | None = None) -> list[Path]:
    """Plot-ready CSVs of every series plus ``summary.json``."""
    out_dir = Path(out_dir)
    idx = np.arange(result.times_h.size)
    t = result.times_h
    delta_cols = {"interval_index": idx, "time_h": t, "delta_h": result.delta_total,
                  "delta0_h": result.delta0_total}
    for ell in range(result.delta_h.shape[1]):
        delta_cols[f"delta_cell{ell + 1}_h"] = result.delta_h[:, ell]
        delta_cols[f"delta0_cell{ell + 1}_h"] = result.delta0_h[:, ell]
    files = {
        "delta.csv": delta_cols,
        "flows.csv": {"interval_index": idx, "time_h": t, "r2s_vehh": result.r2s_vehh,
                      "s2r_vehh": result.s2r_vehh, "inflow_vehh": result.inflow_vehh,
                      "exit_vehh": result.exit_vehh, "new_pevs": result.n_new,
                      "stopping_pevs": result.n_stop, "reentering_pevs": result.n_exit},
        "price.csv": {"interval_index": idx, "time_h": t, "price": result.price,
                      "discount_component": result.discount,
                      "demand_component": result.demand_part},
        "occupancy.csv": {"interval_index": idx, "time_h": t, "occupancy": result.occupancy,
                          "spots": np.full(idx.size, result.spots)},
        "energy.csv": {"interval_index": idx, "time_h": t, "u_pev_kwh": result.energy_kwh,
                       "u_max_kwh": np.full(idx.size, result.station_max_kwh)},
    }
    paths = []
    for name, cols in files.items():
        _write_frame(out_dir / name, cols)
        paths.append(out_dir / name)
    if trace is not None:
        path = out_dir / "decisions.csv"
        pd.DataFrame(trace, columns=["interval_index", "agent_id", "elapsed", "block",
                                     "energy_now_kwh", "cost_price", "cost_time"]
                     ).to_csv(path, index=False, float_format="%.17g")
        paths.append(path)
    path = out_dir / "summary.json"
    with open(path, "w") as fh:
        json.dump(result.summary(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    paths.append(path)
    return paths


def config_from_sensors(frame: pd.DataFrame, demand: DemandProfile, lengths_km=None,
                        step_s: float = 10.0, **overrides) -> ScenarioConfig:
    """Identify the stretch from a sensor day and set up the scenario on it."""
    from .identification import boundary_from_sensors, identify_stretch

    ident = identify_stretch(frame, lengths_km, step_s)
    bounds = boundary_from_sensors(frame, ident.params)
    return ScenarioConfig(ident.params, bounds.inflow_vehh, bounds.exit_supply_vehh, demand,
                          start_h=bounds.start_h, **overrides)


def synthetic_base_case(seed: int = 0, noise: float = 0.0, **overrides) -> ScenarioConfig:
    """Base case on a generated day: sensors -> identification -> scenario.

    ``seed`` drives the sensor noise, the demand wiggle and the agent stream.
    """
    from .synthdata import default_truth, generate_day, generate_demand

    frame = generate_day(default_truth(noise), seed)
    overrides.setdefault("seed", seed)
    return config_from_sensors(frame, generate_demand(seed), **overrides)
