"""Congestion-discounted charging price set by the highway operator.

Realised price:  p(k) = c1*d(k) + c2*u_pev(k) - c3*sum_{l>=2} delta_l(k)
Predicted price: p_hat(t) = c1*d(t) - (beta0 + beta1*sum_{l>=2} delta_hat_l(t))

Both are floored at zero. With an incentive schedule, c3 and beta1 are the
values at the nominal incentive and get scaled by the schedule multiplier
in force at the time of day.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import CalibrationError, DataFormatError, DomainError


@dataclass(frozen=True)
class IncentiveSchedule:
    """Incentive fraction over the day: ``fraction`` times a band multiplier.

    ``bands`` holds (start_h, end_h, multiplier) with half-open [start, end)
    hours; times outside every band use ``default_multiplier``.
    """
    fraction: float
    bands: tuple[tuple[float, float, float], ...] = ()
    default_multiplier: float = 1.0

    def __post_init__(self):
        mults = [self.default_multiplier] + [b[2] for b in self.bands]
        if not all(0.0 <= self.fraction * m < 1.0 for m in mults):
            raise DomainError("incentive fraction must stay in [0, 1) at every time of day")

    @classmethod
    def constant(cls, fraction: float) -> "IncentiveSchedule":
        return cls(fraction)

    @classmethod
    def two_band(cls, fraction: float, start_h: float = 7.0, end_h: float = 16.0,
                 outside: float = 0.2) -> "IncentiveSchedule":
        """Nominal incentive in [start_h, end_h), ``outside`` times it elsewhere."""
        return cls(fraction, ((start_h, end_h, 1.0),), outside)

    def multiplier(self, time_of_day_h: float) -> float:
        tod = time_of_day_h % 24.0
        for start, end, mult in self.bands:
            if start <= tod < end:
                return mult
        return self.default_multiplier


def incentive_at(schedule: IncentiveSchedule, time_of_day_h: float) -> float:
    return schedule.fraction * schedule.multiplier(time_of_day_h)


@dataclass(frozen=True)
class PriceModel:
    c1: float = 5.07e-5
    c2: float = 5.07e-5
    c3: float = 0.33
    beta0: float = 0.0
    beta1: float = 0.3315
    avg_price: float = 0.205
    schedule: IncentiveSchedule | None = None

    def __post_init__(self):
        if not (self.c1 > 0 and self.c2 > 0 and self.c3 >= 0):
            raise DomainError("price coefficients c1, c2 must be positive and c3 nonnegative")

    def _mult(self, time_of_day_h):
        if self.schedule is None or time_of_day_h is None:
            return 1.0
        return self.schedule.multiplier(time_of_day_h)

    def c3_at(self, time_of_day_h=None) -> float:
        return self.c3 * self._mult(time_of_day_h)

    def beta1_at(self, time_of_day_h=None) -> float:
        return self.beta1 * self._mult(time_of_day_h)


def price_components(model: PriceModel, d_kwh, u_pev_kwh, delta_sum_h, time_of_day_h=None):
    """(price, demand component c1*d, discount component c3*sum(delta))."""
    if np.any(np.asarray(d_kwh) < 0) or np.any(np.asarray(u_pev_kwh) < 0) \
            or np.any(np.asarray(delta_sum_h) < 0):
        raise DomainError("price inputs must be nonnegative")
    demand_part = model.c1 * np.asarray(d_kwh, dtype=float)
    if time_of_day_h is None:
        c3 = model.c3
    else:
        c3 = model.c3 * np.vectorize(model._mult, otypes=[float])(time_of_day_h)
    discount = c3 * np.asarray(delta_sum_h, dtype=float)
    price = np.maximum(demand_part + model.c2 * np.asarray(u_pev_kwh, dtype=float) - discount, 0.0)
    return price, demand_part, discount


def realized_price(model: PriceModel, d_kwh, u_pev_kwh, delta_sum_h, time_of_day_h=None):
    price = price_components(model, d_kwh, u_pev_kwh, delta_sum_h, time_of_day_h)[0]
    return float(price) if np.ndim(price) == 0 else price


def predicted_price(model: PriceModel, d_kwh, predicted_delta_sum_h, time_of_day_h=None):
    d = np.asarray(d_kwh, dtype=float)
    if time_of_day_h is None:
        beta1 = model.beta1
    else:
        beta1 = model.beta1 * np.vectorize(model._mult, otypes=[float])(time_of_day_h)
    p = np.maximum(model.c1 * d - (model.beta0 + beta1 * np.asarray(predicted_delta_sum_h)), 0.0)
    return float(p) if np.ndim(p) == 0 else p


def calibrate_incentive(fraction: float, peak_delta_sum_h: float, avg_price: float
                        ) -> tuple[float, float]:
    """(c3, beta1) making the peak-congestion discount equal ``fraction * avg_price``."""
    if not 0.0 <= fraction < 1.0:
        raise CalibrationError(f"incentive fraction must lie in [0, 1), got {fraction}")
    if fraction == 0.0:
        return 0.0, 0.0
    if not peak_delta_sum_h > 0:
        raise CalibrationError("cannot calibrate an incentive against zero peak congestion")
    c3 = fraction * avg_price / peak_delta_sum_h
    return c3, c3


def calibrated(model: PriceModel, schedule: IncentiveSchedule, peak_delta_sum_h: float
               ) -> PriceModel:
    c3, beta1 = calibrate_incentive(schedule.fraction, peak_delta_sum_h, model.avg_price)
    return replace(model, c3=c3, beta1=beta1, schedule=schedule)


@dataclass(frozen=True)
class DemandProfile:
    """Base grid demand per game interval, in kWh."""
    d_kwh: np.ndarray = field(repr=False)

    def __post_init__(self):
        d = np.array(self.d_kwh, dtype=float)
        if d.ndim != 1 or d.size == 0 or np.any(~np.isfinite(d)) or np.any(d < 0):
            raise DomainError("demand profile must be a nonempty, nonnegative series")
        d.setflags(write=False)
        object.__setattr__(self, "d_kwh", d)

    def __len__(self):
        return self.d_kwh.size

    def window(self, start: int, length: int) -> np.ndarray:
        """``length`` values from ``start``; past the end the last value is held."""
        idx = np.minimum(np.arange(start, start + length), self.d_kwh.size - 1)
        return self.d_kwh[idx]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["interval_index", "d_kwh"])
            for k, d in enumerate(self.d_kwh):
                w.writerow([k, repr(float(d))])

    @classmethod
    def read_csv(cls, path) -> "DemandProfile":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if not {"interval_index", "d_kwh"} <= set(reader.fieldnames or []):
                raise DataFormatError("demand CSV needs columns interval_index, d_kwh")
            rows = sorted(reader, key=lambda r: int(r["interval_index"]))
        return cls([float(r["d_kwh"]) for r in rows])


def write_price_trace(path, price, discount, demand_part) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["interval_index", "price", "discount_component", "demand_component"])
        for k, row in enumerate(zip(price, discount, demand_part)):
            w.writerow([k, *(f"{x:.10g}" for x in row)])
