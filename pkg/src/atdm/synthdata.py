"""Synthetic loop-detector days and grid demand from known ground truth.

The generator runs the CTM on a triangular-diagram stretch with a two-peak
inflow and a downstream capacity drop, then reads eight virtual sensors:
sensor j sits at the entrance of cell j and sensor N+1 at the exit.
A sensor reports the interface flow and the speed implied by the receiving
cell's fundamental diagram: free-branch speed when the flow is limited by
upstream demand, congested-branch speed when it is limited by the receiving
supply. Counts are summed and speeds harmonic-averaged per minute, so a
regime-pure minute lands exactly on one branch.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from . import ctm
from .ctm import StretchParams
from .errors import DomainError
from .kernels import F_EXIT, F_INFLOW
from .pricing import DemandProfile

SENSOR_COLUMNS = ("timestamp_utc", "sensor_id", "vehicle_count", "avg_speed_kmh", "period_s")
DEMAND_RANGE_KWH = (3940.0, 4160.0)
FLAT_DEMAND_KWH = 4050.0


@dataclass(frozen=True)
class Bump:
    """Raised-cosine pulse: full ``amount`` for ``plateau_h`` around ``center_h``."""
    center_h: float
    plateau_h: float
    ramp_h: float
    amount: float

    def shape(self, t_h) -> np.ndarray:
        d = np.abs(np.asarray(t_h, dtype=float) - self.center_h) - self.plateau_h / 2
        x = np.clip(d / self.ramp_h, 0.0, 1.0) if self.ramp_h > 0 else (d > 0).astype(float)
        return 0.5 * (1.0 + np.cos(np.pi * x))


@dataclass(frozen=True)
class DayScenario:
    """Boundary conditions of the synthetic day.

    Inflow is a base level plus bumps; the exit supply is the last cell's
    capacity minus dips. The defaults give a one-hour jam around 08:00 and
    a three-hour one around 18:00. Every jam is fed below the flow at which
    congested speeds would pass 70 km/h, and clears before the capacity
    comes back, so congested readings never look like free flow.
    """
    start_h: float = 7.0
    end_h: float = 20.0
    base_inflow_vehh: float = 82_000.0
    inflow_bumps: tuple[Bump, ...] = (
        Bump(8.0, 0.6, 0.25, 26_000.0),
        Bump(18.0, 2.8, 0.3, 30_000.0),
    )
    # a shallow long dip holds capacity under the inflow peak until the queue
    # has cleared; the deep V on top sweeps the jam across the congested branch
    supply_dips: tuple[Bump, ...] = (
        Bump(8.0, 1.8, 0.2, 26_000.0),
        Bump(8.0, 0.0, 0.7, 45_000.0),
        Bump(18.0, 3.8, 0.2, 26_000.0),
        Bump(18.0, 0.0, 1.5, 58_000.0),
    )
    date: str = "2019-10-15"

    def __post_init__(self):
        if not self.end_h > self.start_h:
            raise DomainError("day must end after it starts")

    def times_h(self, step_s: float) -> np.ndarray:
        n = int(round((self.end_h - self.start_h) * 3600.0 / step_s))
        return self.start_h + np.arange(n) * step_s / 3600.0

    def inflow(self, t_h) -> np.ndarray:
        out = np.full(np.shape(t_h), self.base_inflow_vehh, dtype=float)
        for b in self.inflow_bumps:
            out += b.amount * b.shape(t_h)
        return np.maximum(out, 0.0)

    def exit_supply(self, t_h, capacity_vehh: float) -> np.ndarray:
        out = np.full(np.shape(t_h), capacity_vehh, dtype=float)
        for b in self.supply_dips:
            out -= b.amount * b.shape(t_h)
        return np.maximum(out, 0.0)


def default_stretch(step_s: float = 10.0) -> StretchParams:
    """Published cell geometry and branch slopes with a triangular diagram."""
    base = ctm.table2_stretch(step_s)
    return replace(base, cells=tuple(ctm.triangular(c) for c in base.cells))


@dataclass(frozen=True)
class GroundTruth:
    params: StretchParams = field(default_factory=default_stretch)
    scenario: DayScenario = field(default_factory=DayScenario)
    speed_noise: float = 0.0
    count_noise: float = 0.0
    sample_period_s: float = 60.0

    def __post_init__(self):
        if self.speed_noise < 0 or self.count_noise < 0:
            raise DomainError("noise levels must be nonnegative")
        per = self.sample_period_s / self.params.step_s
        if abs(per - round(per)) > 1e-9 or round(per) < 1:
            raise DomainError("sample period must be a multiple of the CTM step")

    @property
    def steps_per_sample(self) -> int:
        return int(round(self.sample_period_s / self.params.step_s))


def default_truth(noise: float = 0.0) -> GroundTruth:
    """Two-peak day on the default stretch; ``noise`` is a fraction (0.02 = 2%)."""
    return GroundTruth(speed_noise=noise, count_noise=noise)


@dataclass(frozen=True)
class SimulatedDay:
    times_h: np.ndarray
    inflow_vehh: np.ndarray
    exit_supply_vehh: np.ndarray
    densities: np.ndarray
    delta_h: np.ndarray
    interface_flow: np.ndarray
    congested: np.ndarray


def simulate(truth: GroundTruth) -> SimulatedDay:
    """Baseline CTM run of the truth day with interface flows and regimes per step."""
    params = truth.params
    t = truth.scenario.times_h(params.step_s)
    inflow = truth.scenario.inflow(t)
    exit_supply = truth.scenario.exit_supply(t, params.cells[-1].max_capacity_vehh)
    traj, delta, flows, _ = ctm.run(params, np.zeros(params.n_cells), inflow, exit_supply,
                                   queue_upstream=False)
    L, v, w, q, rm = params.arrays()
    rho = traj[:-1]
    dem = np.minimum(v * rho, q)
    sup = np.maximum(np.minimum(w * (rm - rho), q), 0.0)
    n = params.n_cells
    phi = np.empty((t.size, n + 1))
    phi[:, 0] = flows[:, F_INFLOW]
    phi[:, 1:n] = np.minimum(dem[:, :-1], sup[:, 1:])
    phi[:, n] = flows[:, F_EXIT]
    # the receiving side limits the flow below its capacity -> congested reading
    recv = np.concatenate((sup, exit_supply[:, None]), axis=1)
    qrecv = np.concatenate((q, q[-1:]))
    congested = (phi >= recv * (1 - 1e-12)) & (recv < qrecv * (1 - 1e-12))
    return SimulatedDay(t, inflow, exit_supply, traj, delta, phi, congested)


def _branch_density(truth: GroundTruth, flow, congested) -> np.ndarray:
    """Density on the branch of each sensor's reference cell for ``flow``."""
    L, v, w, q, rm = truth.params.arrays()
    # the exit sensor reads with the last cell's diagram
    v, w, rm = (np.append(a, a[-1]) for a in (v, w, rm))
    return np.where(congested, rm - flow / w, flow / v)


def generate_day(truth: GroundTruth, seed: int = 0) -> pd.DataFrame:
    """Per-minute counts and harmonic-mean speeds for N+1 sensors, NDW-shaped.

    A minute spent in one regime reports the exact harmonic mean. A minute
    straddling a jam front is reported on the branch where it spent most of
    its steps (ties count as free), so noiseless samples sit on the diagram.
    """
    day = simulate(truth)
    m = truth.steps_per_sample
    n_samples = day.times_h.size // m
    n_sensors = truth.params.n_cells + 1
    dt_h = truth.params.step_h
    phi = day.interface_flow[: n_samples * m].reshape(n_samples, m, n_sensors)
    jam = day.congested[: n_samples * m].reshape(n_samples, m, n_sensors)
    counts = phi.sum(axis=1) * dt_h
    mean_flow = phi.mean(axis=1)
    rho = _branch_density(truth, mean_flow, 2 * jam.sum(axis=1) > m)
    vfree = np.append(truth.params.arrays()[1], truth.params.cells[-1].free_flow_speed_kmh)
    with np.errstate(divide="ignore", invalid="ignore"):
        speed = np.where(counts > 0, mean_flow / rho, vfree[None, :])

    rng = np.random.default_rng(seed)
    if truth.count_noise > 0:
        counts = counts * np.maximum(1.0 + truth.count_noise * rng.standard_normal(counts.shape), 0.0)
    if truth.speed_noise > 0:
        speed = speed * np.maximum(1.0 + truth.speed_noise * rng.standard_normal(speed.shape), 0.0)

    start = pd.Timestamp(truth.scenario.date, tz="UTC") + pd.Timedelta(hours=truth.scenario.start_h)
    stamps = start + pd.to_timedelta(np.arange(n_samples) * truth.sample_period_s, unit="s")
    frame = pd.DataFrame({
        "timestamp_utc": np.repeat(stamps.strftime("%Y-%m-%dT%H:%M:%SZ"), n_sensors),
        "sensor_id": np.tile(np.arange(1, n_sensors + 1), n_samples),
        "vehicle_count": counts.ravel(),
        "avg_speed_kmh": speed.ravel(),
        "period_s": truth.sample_period_s,
    })
    return frame.loc[:, list(SENSOR_COLUMNS)]


def congestion_episodes(series, times_h, rel_threshold: float = 0.01) -> list[tuple[float, float]]:
    """(start_h, end_h) of runs where ``series`` exceeds ``rel_threshold`` of its max."""
    x = np.asarray(series, dtype=float)
    t = np.asarray(times_h, dtype=float)
    if x.size == 0 or not x.max() > 0:
        return []
    on = np.concatenate(([False], x > rel_threshold * x.max(), [False]))
    edges = np.flatnonzero(np.diff(on.astype(int)))
    step = t[1] - t[0] if t.size > 1 else 0.0
    return [(float(t[a]), float(t[b - 1] + step)) for a, b in zip(edges[::2], edges[1::2])]


def write_sensor_csv(frame: pd.DataFrame, path) -> None:
    frame.to_csv(path, index=False, float_format="%.17g")


def generate_demand(seed: int = 0, n_intervals: int = 468, start_h: float = 7.0,
                    interval_h: float = 100.0 / 3600.0, flat: bool = False) -> DemandProfile:
    """Grid base demand per interval in kWh, inside [3940, 4160].

    A morning and an evening hump over a midday dip, lightly perturbed by a
    seeded smooth wiggle; ``flat`` returns the midpoint everywhere.
    """
    if flat:
        return DemandProfile(np.full(n_intervals, FLAT_DEMAND_KWH))
    lo, hi = DEMAND_RANGE_KWH
    t = start_h + (np.arange(n_intervals) + 0.5) * interval_h
    shape = (0.55 * np.exp(-0.5 * ((t - 8.5) / 1.2) ** 2)
             + 1.0 * np.exp(-0.5 * ((t - 18.5) / 1.5) ** 2))
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0, 2 * np.pi, 3)
    wiggle = sum(np.sin(2 * np.pi * t / per + ph) for per, ph in zip((3.0, 1.7, 1.1), phase))
    shape = shape + 0.04 * wiggle
    shape = (shape - shape.min()) / (shape.max() - shape.min())
    margin = 0.02 * (hi - lo)
    return DemandProfile(lo + margin + shape * (hi - lo - 2 * margin))
