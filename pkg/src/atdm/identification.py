"""Fundamental-diagram identification from per-minute loop-detector data.

Pipeline per cell l, fed by sensor l at its entrance:
flow = count / period, density = flow / speed, regime split on a speed
threshold, free-flow slope by least squares through the origin, congested
branch by quantile regression, then the branch intersection gives qmax and
the congested x-intercept gives rho_max.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.optimize import linprog

from .ctm import CellParams, StretchParams, cfl_ratio, table2_stretch
from .errors import DataFormatError, DomainError, IdentificationError
from .synthdata import SENSOR_COLUMNS

DEFAULT_THRESHOLD_KMH = 70.0
DEFAULT_QUANTILE = 0.5
FREE, CONGESTED = "free", "congested"


@dataclass(frozen=True)
class SensorSample:
    timestamp: pd.Timestamp
    sensor_id: int
    vehicle_count: float
    avg_speed_kmh: float
    period_s: float

    def __post_init__(self):
        if self.vehicle_count < 0 or self.avg_speed_kmh < 0 or not self.period_s > 0:
            raise DomainError("counts and speeds must be nonnegative and the period positive")


@dataclass(frozen=True)
class FundamentalSample:
    density_vehkm: float
    flow_vehh: float
    regime: str


@dataclass(frozen=True)
class FundamentalSamples:
    """Array form of a sequence of (density, flow, regime) points."""
    density_vehkm: np.ndarray
    flow_vehh: np.ndarray
    free: np.ndarray

    def __len__(self):
        return self.density_vehkm.size

    def __getitem__(self, i) -> FundamentalSample:
        return FundamentalSample(float(self.density_vehkm[i]), float(self.flow_vehh[i]),
                                 FREE if self.free[i] else CONGESTED)

    @property
    def regime(self) -> np.ndarray:
        return np.where(self.free, FREE, CONGESTED)

    def subset(self, free: bool) -> tuple[np.ndarray, np.ndarray]:
        mask = self.free if free else ~self.free
        return self.density_vehkm[mask], self.flow_vehh[mask]


@dataclass(frozen=True)
class DiagramFit:
    free_slope: float
    congested_slope: float
    congested_intercept: float
    rho_max: float
    q_max: float
    quantile_used: float
    n_free: int = 0
    n_congested: int = 0
    dropped: int = 0

    def __post_init__(self):
        if not self.free_slope > 0:
            raise IdentificationError(f"free-flow slope {self.free_slope:g} is not positive")
        if not self.congested_slope < 0:
            raise IdentificationError(f"congested slope {self.congested_slope:g} is not negative")
        if not self.rho_max > self.q_max / self.free_slope:
            raise IdentificationError("branch intersection lies beyond the jam density")

    @property
    def critical_density(self) -> float:
        return self.q_max / self.free_slope


# ---------------------------------------------------------------- raw data

def read_sensor_csv(path) -> pd.DataFrame:
    frame = pd.read_csv(path)
    return validate_sensor_frame(frame)


def validate_sensor_frame(frame: pd.DataFrame) -> pd.DataFrame:
    missing = [c for c in SENSOR_COLUMNS if c not in frame.columns]
    if missing:
        raise DataFormatError(f"sensor data missing column(s): {', '.join(missing)}")
    out = frame.loc[:, list(SENSOR_COLUMNS)].copy()
    try:
        out["timestamp_utc"] = pd.to_datetime(out["timestamp_utc"], utc=True)
        out["sensor_id"] = out["sensor_id"].astype(int)
        for c in ("vehicle_count", "avg_speed_kmh", "period_s"):
            out[c] = out[c].astype(float)
    except (ValueError, TypeError) as exc:
        raise DataFormatError(f"sensor data has unparsable values: {exc}") from exc
    if out.empty:
        raise DataFormatError("sensor data is empty")
    if (out["vehicle_count"] < 0).any() or (out["avg_speed_kmh"] < 0).any():
        raise DataFormatError("negative vehicle count or speed in sensor data")
    if not (out["period_s"] > 0).all():
        raise DataFormatError("sensor periods must be positive")
    return out


def flows_from_counts(counts, period_s, timestamps=None) -> np.ndarray:
    """Vehicles per sample to veh/h. Timestamps, when given, must increase."""
    counts = np.asarray(counts, dtype=float)
    if timestamps is not None:
        ts = pd.to_datetime(pd.Series(timestamps), utc=True)
        if not ts.is_monotonic_increasing or ts.duplicated().any():
            raise DataFormatError("timestamps of one sensor must be strictly increasing")
    if np.any(counts < 0):
        raise DomainError("vehicle counts must be nonnegative")
    return counts * 3600.0 / np.asarray(period_s, dtype=float)


def density_from_speed(flow_vehh, speed_kmh) -> tuple[np.ndarray, np.ndarray]:
    """(density, dropped): rho = flow / speed, zero where there is no flow.

    Positive flow at zero speed is not a measurable state; those samples get
    NaN density and are flagged in ``dropped``.
    """
    flow = np.asarray(flow_vehh, dtype=float)
    speed = np.asarray(speed_kmh, dtype=float)
    dropped = (flow > 0) & ~(speed > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        rho = np.where(flow > 0, flow / speed, 0.0)
    rho = np.where(dropped, np.nan, rho)
    return rho, dropped


def interpolate_to_step(counts, speeds, source_period_s: float, target_step_s: float
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Refine a sample series to ``target_step_s``.

    Speeds are linearly interpolated between sample midpoints. Counts follow
    the linearly interpolated rate, rescaled so each source period keeps its
    exact total (uniform split when the interpolated rate vanishes there).
    """
    counts = np.asarray(counts, dtype=float)
    speeds = np.asarray(speeds, dtype=float)
    if counts.size == 0:
        raise DataFormatError("cannot interpolate an empty series")
    if counts.shape != speeds.shape:
        raise DomainError("counts and speeds must have the same length")
    ratio = source_period_s / target_step_s
    m = int(round(ratio))
    if m < 1 or abs(ratio - m) > 1e-9:
        raise DomainError("target step must subdivide the source period")
    n = counts.size
    src_mid = (np.arange(n) + 0.5) * source_period_s
    fine_mid = (np.arange(n * m) + 0.5) * target_step_s
    speed_fine = np.interp(fine_mid, src_mid, speeds)
    rate = np.interp(fine_mid, src_mid, counts).reshape(n, m)
    sums = rate.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        share = np.where(sums > 0, rate / sums, 1.0 / m)
    fine = share * counts[:, None]
    return fine.ravel(), speed_fine


def classify_regime(density, flow, speed, threshold_kmh: float = DEFAULT_THRESHOLD_KMH
                    ) -> FundamentalSamples:
    """Free iff the reported speed is at or above the threshold."""
    if not threshold_kmh > 0:
        raise DomainError("speed threshold must be positive")
    return FundamentalSamples(np.asarray(density, dtype=float), np.asarray(flow, dtype=float),
                              np.asarray(speed, dtype=float) >= threshold_kmh)


# ---------------------------------------------------------------- fitting

def _distinct(x) -> int:
    return np.unique(np.round(np.asarray(x, dtype=float), 12)).size


def fit_free_flow(density, flow) -> float:
    """Least-squares slope of flow on density through the origin."""
    rho = np.asarray(density, dtype=float)
    phi = np.asarray(flow, dtype=float)
    if rho.size < 2 or _distinct(rho) < 2:
        raise IdentificationError("free-flow fit needs at least two distinct densities")
    return float(rho @ phi / (rho @ rho))


def pinball_loss(residual, q: float) -> float:
    r = np.asarray(residual, dtype=float)
    return float(np.sum(np.where(r >= 0, q * r, (q - 1) * r)))


def quantile_line(x, y, q: float) -> tuple[float, float]:
    """(slope, intercept) minimising the pinball loss, via its linear program.

    Variables are (a, b, r+, r-) with a + b*x + r+ - r- = y. Data are scaled
    to unit spread first so the solver sees a well-conditioned problem.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.size
    sx, sy = max(np.abs(x).max(), 1.0), max(np.abs(y).max(), 1.0)
    xs, ys = x / sx, y / sy
    c = np.concatenate(([0.0, 0.0], np.full(n, q), np.full(n, 1.0 - q)))
    eye = sparse.identity(n, format="csr")
    a_eq = sparse.hstack((np.ones((n, 1)), xs[:, None], eye, -eye), format="csr")
    bounds = [(None, None), (None, None)] + [(0, None)] * (2 * n)
    res = linprog(c, A_eq=a_eq, b_eq=ys, bounds=bounds, method="highs")
    if not res.success:
        raise IdentificationError(f"quantile regression failed: {res.message}")
    a, b = res.x[:2]
    slope, intercept = b * sy / sx, a * sy
    return float(slope), float(intercept)


def fit_congested(density, flow, q: float = DEFAULT_QUANTILE) -> tuple[float, float]:
    """Quantile-regression line of the congested branch: (slope, intercept)."""
    if not 0 < q < 1:
        raise DomainError(f"quantile must lie in (0, 1), got {q}")
    rho = np.asarray(density, dtype=float)
    phi = np.asarray(flow, dtype=float)
    if rho.size < 2 or _distinct(rho) < 2:
        raise IdentificationError("congested fit needs at least two distinct densities")
    slope, intercept = quantile_line(rho, phi, q)
    if not slope < 0:
        raise IdentificationError(f"congested branch slope {slope:g} is not negative; "
                                  "the data do not look congested")
    return slope, intercept


def derive_cell_params(free_slope: float, congested_slope: float, congested_intercept: float,
                       length_km: float, quantile: float = DEFAULT_QUANTILE,
                       counts: tuple[int, int, int] = (0, 0, 0)) -> tuple[CellParams, DiagramFit]:
    """Cell parameters from the two branch lines (intersection and x-intercept)."""
    if not free_slope > 0 > congested_slope:
        raise IdentificationError("need a positive free slope and a negative congested slope")
    gap = free_slope - congested_slope
    if abs(gap) < 1e-12 * max(abs(free_slope), 1.0):
        raise IdentificationError("branch lines are parallel")
    rho_star = congested_intercept / gap
    q_max = free_slope * rho_star
    if not (rho_star > 0 and q_max > 0):
        raise IdentificationError("branch lines intersect at a nonpositive density or flow")
    rho_max = -congested_intercept / congested_slope
    fit = DiagramFit(free_slope, congested_slope, congested_intercept, rho_max, q_max,
                     quantile, *counts)
    try:
        cell = CellParams(length_km, free_slope, -congested_slope, q_max, rho_max)
    except DomainError as exc:
        raise IdentificationError(str(exc)) from exc
    return cell, fit


def identify_cell(counts, speeds, period_s, length_km: float,
                  threshold_kmh: float = DEFAULT_THRESHOLD_KMH,
                  quantile: float = DEFAULT_QUANTILE) -> tuple[CellParams, DiagramFit]:
    flow = flows_from_counts(counts, period_s)
    rho, dropped = density_from_speed(flow, speeds)
    keep = ~dropped
    pts = classify_regime(rho[keep], flow[keep], np.asarray(speeds, dtype=float)[keep],
                          threshold_kmh)
    rho_f, phi_f = pts.subset(free=True)
    rho_c, phi_c = pts.subset(free=False)
    if rho_c.size == 0:
        raise IdentificationError("no congested samples")
    v = fit_free_flow(rho_f, phi_f)
    slope, intercept = fit_congested(rho_c, phi_c, quantile)
    return derive_cell_params(v, slope, intercept, length_km, quantile,
                              (int(rho_f.size), int(rho_c.size), int(dropped.sum())))


# ---------------------------------------------------------------- stretch

@dataclass
class IdentificationResult:
    params: StretchParams
    fits: list[DiagramFit]
    threshold_kmh: float
    quantile: float
    sensor_ids: list[int] = field(default_factory=list)

    def report(self) -> dict:
        cells = []
        for ell, fit in enumerate(self.fits, start=1):
            d = asdict(fit)
            d["cell"] = ell
            d["sensor_id"] = self.sensor_ids[ell - 1] if self.sensor_ids else ell
            cells.append(d)
        return {
            "quantile": self.quantile,
            "speed_threshold_kmh": self.threshold_kmh,
            "step_s": self.params.step_s,
            "max_cfl_ratio": cfl_ratio(self.params)[1],
            "cells": cells,
        }

    def write_report(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.report(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def default_lengths() -> tuple[float, ...]:
    return tuple(c.length_km for c in table2_stretch().cells)


def sensor_table(frame: pd.DataFrame) -> dict[int, pd.DataFrame]:
    """Per-sensor time-sorted samples; rejects duplicated timestamps."""
    out = {}
    for sid, grp in frame.groupby("sensor_id", sort=True):
        grp = grp.sort_values("timestamp_utc", kind="stable")
        if grp["timestamp_utc"].duplicated().any():
            raise DataFormatError(f"sensor {sid} has duplicated timestamps")
        out[int(sid)] = grp.reset_index(drop=True)
    return out


def identify_stretch(frame: pd.DataFrame, lengths_km=None, step_s: float = 10.0,
                     threshold_kmh: float = DEFAULT_THRESHOLD_KMH,
                     quantile: float = DEFAULT_QUANTILE) -> IdentificationResult:
    """Identify every cell; sensor j (in id order) feeds cell j."""
    if not 0 < quantile < 1:
        raise DomainError(f"quantile must lie in (0, 1), got {quantile}")
    frame = validate_sensor_frame(frame)
    lengths = tuple(default_lengths() if lengths_km is None else lengths_km)
    sensors = sensor_table(frame)
    ids = sorted(sensors)
    if len(ids) < len(lengths) + 1:
        raise IdentificationError(f"{len(lengths)} cells need {len(lengths) + 1} sensors, "
                                  f"got {len(ids)}")
    spans = {(g["timestamp_utc"].iloc[0], g["timestamp_utc"].iloc[-1]) for g in sensors.values()}
    if len(spans) != 1:
        raise DataFormatError("sensors do not cover the same time range")

    cells, fits = [], []
    for ell, length in enumerate(lengths, start=1):
        g = sensors[ids[ell - 1]]
        try:
            cell, fit = identify_cell(g["vehicle_count"].to_numpy(), g["avg_speed_kmh"].to_numpy(),
                                      g["period_s"].to_numpy(), length, threshold_kmh, quantile)
        except IdentificationError as exc:
            raise IdentificationError(f"cell {ell}: {exc}", cell=ell) from exc
        cells.append(cell)
        fits.append(fit)
    try:
        params = StretchParams(tuple(cells), step_s)
    except DomainError as exc:
        raise IdentificationError(f"identified stretch rejected: {exc}") from exc
    return IdentificationResult(params, fits, threshold_kmh, quantile, ids[: len(lengths)])


@dataclass(frozen=True)
class BoundarySeries:
    """Inflow and downstream supply at the CTM step, plus the start hour."""
    inflow_vehh: np.ndarray
    exit_supply_vehh: np.ndarray
    start_h: float
    step_s: float


def boundary_from_sensors(frame: pd.DataFrame, params: StretchParams,
                          threshold_kmh: float = DEFAULT_THRESHOLD_KMH) -> BoundarySeries:
    """CTM boundary series from the first and last sensor.

    The inflow is the refined count rate of the first sensor. The exit sees
    the last sensor's flow as its supply while that sensor reads congested
    speeds, and the last cell's capacity otherwise.
    """
    frame = validate_sensor_frame(frame)
    sensors = sensor_table(frame)
    ids = sorted(sensors)
    first, last = sensors[ids[0]], sensors[ids[-1]]
    period = float(first["period_s"].iloc[0])
    dt = params.step_s

    def refined(g):
        fine_counts, fine_speed = interpolate_to_step(g["vehicle_count"].to_numpy(),
                                                      g["avg_speed_kmh"].to_numpy(), period, dt)
        return fine_counts * 3600.0 / dt, fine_speed

    inflow, _ = refined(first)
    exit_flow, exit_speed = refined(last)
    qmax = params.cells[-1].max_capacity_vehh
    supply = np.where(exit_speed < threshold_kmh, np.minimum(exit_flow, qmax), qmax)
    t0 = first["timestamp_utc"].iloc[0]
    start_h = t0.hour + t0.minute / 60.0 + t0.second / 3600.0
    return BoundarySeries(inflow, supply, start_h, dt)
