"""Cell Transmission Model of a highway stretch with a charging station.

Cells are indexed 1..N in the public API (0..N-1 in arrays). The charging
station sits at the interface between cells 1 and 2: road-to-station (r2s)
flow leaves cell 1 before the interface and station-to-road (s2r) flow
merges into cell 2 after it.

Units: km, km/h, veh/km, veh/h; the CTM step is given in seconds and the
extra travel times are in hours.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .errors import ConsistencyError, DataFormatError, DomainError

RHO_EPS = 1e-6
JAM_CAP = 10.0
_DENSITY_TOL = 1e-7

PARAMS_COLUMNS = ("ell", "L_km", "T_s", "v_kmh", "w_kmh", "qmax_vehh", "rhomax_vehkm")


@dataclass(frozen=True)
class CellParams:
    length_km: float
    free_flow_speed_kmh: float
    wave_speed_kmh: float
    max_capacity_vehh: float
    max_density_vehkm: float

    def __post_init__(self):
        values = (self.length_km, self.free_flow_speed_kmh, self.wave_speed_kmh,
                  self.max_capacity_vehh, self.max_density_vehkm)
        if not all(np.isfinite(v) and v > 0 for v in values):
            raise DomainError(f"cell parameters must be finite and positive: {values}")
        if self.wave_speed_kmh >= self.free_flow_speed_kmh:
            raise DomainError("wave speed must be below the free-flow speed")
        if self.max_capacity_vehh > self.free_flow_speed_kmh * self.max_density_vehkm * (1 + 1e-12):
            raise DomainError("capacity exceeds the free-flow branch at jam density")

    @property
    def critical_density(self) -> float:
        return self.max_capacity_vehh / self.free_flow_speed_kmh


@dataclass(frozen=True)
class StretchParams:
    cells: tuple[CellParams, ...]
    step_s: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "cells", tuple(self.cells))
        if len(self.cells) < 2:
            raise DomainError("the stretch needs at least two cells (station sits between 1 and 2)")
        if not self.step_s > 0:
            raise DomainError("step must be positive")
        ratios = _ratios(self.cells, self.step_s)
        worst = int(np.argmax(ratios))
        if ratios[worst] >= 1.0:
            raise DomainError(
                f"sampling condition T*v/L < 1 violated on cell {worst + 1}: "
                f"ratio {ratios[worst]:.4f}")

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def step_h(self) -> float:
        return self.step_s / 3600.0

    def arrays(self):
        """(L, v, w, qmax, rhomax) as float arrays."""
        a = np.array([[c.length_km, c.free_flow_speed_kmh, c.wave_speed_kmh,
                       c.max_capacity_vehh, c.max_density_vehkm] for c in self.cells])
        return tuple(np.ascontiguousarray(a[:, j]) for j in range(5))


@dataclass(frozen=True)
class CtmState:
    densities_vehkm: np.ndarray
    step_index: int = 0

    def __post_init__(self):
        rho = np.array(self.densities_vehkm, dtype=float)
        rho.setflags(write=False)
        object.__setattr__(self, "densities_vehkm", rho)

    @classmethod
    def empty(cls, params: StretchParams) -> "CtmState":
        return cls(np.zeros(params.n_cells))

    def validate(self, params: StretchParams, tol: float = _DENSITY_TOL) -> None:
        rho = self.densities_vehkm
        rhomax = params.arrays()[4]
        if rho.shape != rhomax.shape:
            raise DomainError(f"state has {rho.size} cells, stretch has {rhomax.size}")
        low = rho < -tol * rhomax
        high = rho > rhomax * (1 + tol)
        if low.any() or high.any():
            bad = int(np.flatnonzero(low | high)[0])
            raise ConsistencyError(
                f"density {rho[bad]:.6g} of cell {bad + 1} outside [0, {rhomax[bad]:.6g}]")


@dataclass(frozen=True)
class StationCoupling:
    r2s_vehh: float = 0.0
    s2r_vehh: float = 0.0

    def __post_init__(self):
        if self.r2s_vehh < 0 or self.s2r_vehh < 0:
            raise DomainError("station flows must be nonnegative")


@dataclass(frozen=True)
class StepFlows:
    """Realised flows of one step (veh/h) and per-cell outflows."""
    inflow: float
    r2s: float
    s2r: float
    exit: float
    cell_outflows: np.ndarray


@dataclass(frozen=True)
class TravelTimeReport:
    per_cell_extra_h: np.ndarray
    total_extra_h: float = field(init=False)

    def __post_init__(self):
        per_cell = np.asarray(self.per_cell_extra_h, dtype=float)
        if np.any(per_cell < 0):
            raise ConsistencyError("negative extra travel time")
        object.__setattr__(self, "per_cell_extra_h", per_cell)
        object.__setattr__(self, "total_extra_h", float(per_cell.sum()))


def _ratios(cells: Sequence[CellParams], step_s: float) -> np.ndarray:
    return np.array([step_s / 3600.0 * c.free_flow_speed_kmh / c.length_km for c in cells])


def _check_density(cell: CellParams, rho: float) -> None:
    if not (-_DENSITY_TOL <= rho <= cell.max_density_vehkm * (1 + _DENSITY_TOL)):
        raise DomainError(f"density {rho} outside [0, {cell.max_density_vehkm}]")


def demand(cell: CellParams, rho: float) -> float:
    """Sending flow min(v*rho, qmax)."""
    _check_density(cell, rho)
    return min(cell.free_flow_speed_kmh * max(rho, 0.0), cell.max_capacity_vehh)


def supply(cell: CellParams, rho: float) -> float:
    """Receiving flow min(w*(rhomax - rho), qmax)."""
    _check_density(cell, rho)
    return max(min(cell.wave_speed_kmh * (cell.max_density_vehkm - rho),
                   cell.max_capacity_vehh), 0.0)


def cfl_ratio(params: StretchParams) -> tuple[np.ndarray, float]:
    """Per-cell T*v/L and its maximum."""
    ratios = _ratios(params.cells, params.step_s)
    return ratios, float(ratios.max())


def free_flow_traversal(params: StretchParams) -> float:
    """Free-flow traversal time of the whole stretch, in hours."""
    return float(sum(c.length_km / c.free_flow_speed_kmh for c in params.cells))


def run(params: StretchParams, rho0, inflow, exit_supply, r2s=None, s2r=None,
        backlog=(0.0, 0.0, 0.0), s2r_first: bool = True, jam_cap: float = JAM_CAP,
        queue_upstream: bool = True):
    """Roll the CTM over ``len(inflow)`` steps (thin wrapper over the kernel).

    ``backlog`` carries vehicles not yet served: upstream queue, pending r2s,
    pending s2r. Returns (trajectory, per-step per-cell extra time, flows,
    final backlog); flows columns are indexed by ``kernels.F_*``.
    """
    inflow = np.ascontiguousarray(inflow, dtype=float)
    n = inflow.shape[0]
    exit_supply = _series(exit_supply, n)
    r2s = _series(0.0 if r2s is None else r2s, n)
    s2r = _series(0.0 if s2r is None else s2r, n)
    L, v, w, q, rm = params.arrays()
    return kernels.ctm_run(np.ascontiguousarray(rho0, dtype=float), L, v, w, q, rm,
                           params.step_h, inflow, exit_supply, r2s, s2r,
                           np.asarray(backlog, dtype=float), bool(s2r_first), RHO_EPS,
                           float(jam_cap), bool(queue_upstream))


def _series(x, n: int) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        return np.full(n, float(arr))
    if arr.shape != (n,):
        raise DomainError(f"series of length {arr.shape} where {n} expected")
    return np.ascontiguousarray(arr)


def step(params: StretchParams, state: CtmState, inflow: float, downstream_supply: float,
         coupling: StationCoupling = StationCoupling(), s2r_first: bool = True
         ) -> tuple[CtmState, StepFlows]:
    """Advance one CTM step.

    The station split follows the merge rule selected by ``s2r_first``:
    re-entering vehicles are served by cell 2's supply before (default) or
    after the mainline flow from cell 1.
    """
    state.validate(params)
    rho = state.densities_vehkm
    if coupling.r2s_vehh > demand(params.cells[0], float(rho[0])) * (1 + 1e-12):
        raise DomainError("r2s exceeds the demand of cell 1")
    traj, _, flows, _ = run(params, rho, [inflow], downstream_supply, coupling.r2s_vehh,
                            coupling.s2r_vehh, s2r_first=s2r_first)
    new = CtmState(traj[1], state.step_index + 1)
    new.validate(params)
    f = flows[0]
    outflows = _cell_outflows(params, rho, f)
    return new, StepFlows(float(f[kernels.F_INFLOW]), float(f[kernels.F_R2S]),
                          float(f[kernels.F_S2R]), float(f[kernels.F_EXIT]), outflows)


def _cell_outflows(params: StretchParams, rho, f) -> np.ndarray:
    L, v, w, q, rm = params.arrays()
    dem = np.minimum(v * rho, q)
    sup = np.maximum(np.minimum(w * (rm - rho), q), 0.0)
    out = np.empty(params.n_cells)
    out[0] = f[kernels.F_CELL1_OUT]
    out[1:-1] = np.minimum(dem[1:-1], sup[2:])
    out[-1] = f[kernels.F_EXIT]
    return out


def extra_travel_time(params: StretchParams, state: CtmState, outflows,
                      jam_cap: float = JAM_CAP) -> TravelTimeReport:
    """Extra time L/v_real - L/v_free per cell, v_real = outflow / density.

    Vacuum cells (density below 1e-6 veh/km) count as free flowing; a
    congested cell with zero outflow is charged the jam cap (jam_cap * L/v).
    """
    L, v, *_ = params.arrays()
    rho = state.densities_vehkm
    outflows = np.asarray(outflows, dtype=float)
    free_time = L / v
    cap = jam_cap * free_time
    extra = np.zeros_like(L)
    for i in range(L.size):
        if rho[i] < RHO_EPS:
            continue
        speed = outflows[i] / rho[i]
        extra[i] = cap[i] if speed <= 0 else min(max(L[i] / speed - free_time[i], 0.0), cap[i])
    return TravelTimeReport(extra)


def predict(params: StretchParams, state: CtmState, assumed_inflow, horizon: int,
            steps_per_interval: int, downstream_supply=None, jam_cap: float = JAM_CAP
            ) -> np.ndarray:
    """Forecast of the per-cell extra travel time, one row per game interval.

    The state is rolled forward on a copy with no station coupling; each row
    is the mean of the ``steps_per_interval`` CTM steps of that interval.
    ``assumed_inflow`` and ``downstream_supply`` hold one value per interval
    (scalars are broadcast); the supply defaults to the exit-cell capacity.
    """
    if horizon < 1:
        raise DomainError("horizon must be at least one interval")
    per_interval = np.broadcast_to(np.asarray(assumed_inflow, dtype=float), (horizon,))
    if downstream_supply is None:
        downstream_supply = params.cells[-1].max_capacity_vehh
    supply_iv = np.broadcast_to(np.asarray(downstream_supply, dtype=float), (horizon,))
    inflow = np.repeat(per_interval, steps_per_interval)
    exit_supply = np.repeat(supply_iv, steps_per_interval)
    _, delta, _, _ = run(params, np.array(state.densities_vehkm), inflow, exit_supply,
                         jam_cap=jam_cap)
    return delta.reshape(horizon, steps_per_interval, params.n_cells).mean(axis=1)


def table2_stretch(step_s: float = 10.0) -> StretchParams:
    """The seven identified cells of the A13 stretch (rounded published values)."""
    rows = [
        (0.39, 103.15, 21.23, 1.26e5, 7.2e3),
        (0.41, 109.34, 26.19, 1.38e5, 6.56e3),
        (0.365, 111.67, 19.91, 1.28e5, 7.58e3),
        (0.365, 112.77, 26.13, 1.40e5, 6.62e3),
        (0.365, 113.07, 27.73, 1.40e5, 6.29e3),
        (0.5, 114.12, 26.62, 1.38e5, 6.41e3),
        (0.5, 114.18, 31.11, 1.40e5, 5.73e3),
    ]
    return StretchParams(tuple(CellParams(*r) for r in rows), step_s)


def triangular(cell: CellParams) -> CellParams:
    """Same cell with qmax moved to the intersection of the two branches."""
    v, w, rm = cell.free_flow_speed_kmh, cell.wave_speed_kmh, cell.max_density_vehkm
    return replace(cell, max_capacity_vehh=v * w * rm / (v + w))


def write_params_csv(params: StretchParams, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PARAMS_COLUMNS)
        for ell, c in enumerate(params.cells, start=1):
            writer.writerow([ell, repr(c.length_km), repr(params.step_s),
                             repr(c.free_flow_speed_kmh), repr(c.wave_speed_kmh),
                             repr(c.max_capacity_vehh), repr(c.max_density_vehkm)])


def read_params_csv(path) -> StretchParams:
    with open(Path(path), newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in PARAMS_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise DataFormatError(f"params CSV missing column(s): {', '.join(missing)}")
        rows = sorted(reader, key=lambda r: int(r["ell"]))
    if not rows:
        raise DataFormatError("params CSV has no rows")
    steps = {float(r["T_s"]) for r in rows}
    if len(steps) != 1:
        raise DataFormatError(f"all cells must share one step, got {sorted(steps)}")
    cells = tuple(CellParams(float(r["L_km"]), float(r["v_kmh"]), float(r["w_kmh"]),
                             float(r["qmax_vehh"]), float(r["rhomax_vehkm"])) for r in rows)
    return StretchParams(cells, steps.pop())
