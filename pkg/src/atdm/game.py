"""Per-interval charging game played by the PEVs leaving cell 1.

Each agent picks a discrete choice (no stop, or a charging block of r
intervals starting now and re-entering cell 2 at relative interval r) and
an energy plan inside the block. Its cost is

    J_i = alpha_i * sum_t (p_hat(t) - p_home_i) u_i(t)
          + (1 - alpha_i) * sum_t chi(t) [t*lT*upsilon + xi(t) + xi_cs_i(t)] theta_i(t)

with theta_i the indicator of [t_i - W, t_i + W]. Shared constraints are the
number of charging spots and the station energy per interval. The game is
solved by Gauss-Seidel best-response sweeps (``solve_game``); the discrete
choice is enumerated and the energy plan, linear in u, is filled
cheapest-interval first. Re-entry is limited to t_i <= H - W so the theta
window fits inside the horizon, and a whole stay lasts at most H intervals.

Time is relative to the current interval k: index 0 is k, index H is k+H.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import DomainError, GameInfeasible, GameNotConverged

NO_STOP = -1


@dataclass(frozen=True)
class GameConfig:
    horizon_intervals: int = 15
    half_width: int = 3
    interval_h: float = 100.0 / 3600.0
    spots: int = 100
    station_max_kwh: float | None = None
    u_min_kwh: float = 4.16
    u_max_kwh: float = 4.16
    idle_weight: float = 1.0
    s2r_scale_h: float = 1.79 / 3600.0
    eps: float = 1e-6
    max_sweeps: int = 100

    def __post_init__(self):
        if self.horizon_intervals <= 2 * self.half_width or self.half_width < 0:
            raise DomainError("horizon must exceed twice the half width")
        if not (self.interval_h > 0 and self.spots >= 0 and self.u_max_kwh > 0
                and 0 <= self.u_min_kwh <= self.u_max_kwh):
            raise DomainError("game bounds must be positive and u_min <= u_max")
        if self.station_max_kwh is not None and self.station_max_kwh < 0:
            raise DomainError("station energy bound must be nonnegative")

    @property
    def station_max(self) -> float:
        """Energy per interval; defaults to every spot drawing the full rate."""
        if self.station_max_kwh is None:
            return self.spots * self.u_max_kwh
        return self.station_max_kwh

    @property
    def n_slots(self) -> int:
        return self.horizon_intervals + 1

    def chi(self) -> np.ndarray:
        w = self.half_width
        out = np.full(self.n_slots, 1.0 / (2 * w + 1))
        out[: w + 1] = 1.0 / (w + 1)
        return out


@dataclass(frozen=True)
class AgentParams:
    capacity_kwh: float
    efficiency: float
    alpha: float
    initial_soc: float
    soc_ref: float
    home_price: float = 0.205
    elapsed: int = 0
    agent_id: int = 0

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise DomainError("alpha must lie in (0, 1)")
        if not 0 <= self.initial_soc <= 1:
            raise DomainError("state of charge must lie in [0, 1]")
        if not 0 < self.soc_ref < 1:
            raise DomainError("reference state of charge must lie in (0, 1)")
        if not 12 <= self.capacity_kwh <= 100:
            raise DomainError("battery capacity must lie in [12, 100] kWh")
        if not 0 < self.efficiency <= 1:
            raise DomainError("efficiency must lie in (0, 1]")
        if self.elapsed < 0:
            raise DomainError("elapsed intervals must be nonnegative")

    @property
    def at_station(self) -> bool:
        return self.elapsed > 0


def theta(t_i: int, half_width: int, horizon: int) -> np.ndarray:
    """Rectangular indicator on [t_i - W, t_i + W], clipped to 0..horizon."""
    if not 0 <= t_i <= horizon:
        raise DomainError(f"re-entry interval {t_i} outside 0..{horizon}")
    out = np.zeros(horizon + 1)
    out[max(0, t_i - half_width): min(horizon, t_i + half_width) + 1] = 1.0
    return out


@dataclass(frozen=True)
class DecisionVector:
    block: int
    energy: np.ndarray
    half_width: int
    cost_price: float = float("nan")
    cost_time: float = float("nan")

    @property
    def horizon(self) -> int:
        return self.energy.size - 1

    @property
    def stops(self) -> bool:
        """True when the plan uses the station (including leaving it now)."""
        return self.block != NO_STOP

    @property
    def reentry(self) -> int:
        return max(self.block, 0)

    @property
    def charging(self) -> np.ndarray:
        out = np.zeros(self.horizon + 1, dtype=bool)
        if self.block > 0:
            out[: self.block] = True
        return out

    @property
    def theta(self) -> np.ndarray:
        return theta(self.reentry, self.half_width, self.horizon)

    def soc_trajectory(self, agent: AgentParams) -> np.ndarray:
        """SoC at the start of each relative interval 0..H+1."""
        gain = agent.efficiency * self.energy / agent.capacity_kwh
        return agent.initial_soc + np.concatenate(([0.0], np.cumsum(gain)))

    @classmethod
    def no_stop(cls, config: GameConfig) -> "DecisionVector":
        return cls(NO_STOP, np.zeros(config.n_slots), config.half_width)


@dataclass
class SharedPlan:
    energy: np.ndarray
    occupancy: np.ndarray
    reentries: np.ndarray

    @classmethod
    def empty(cls, config: GameConfig) -> "SharedPlan":
        z = config.n_slots
        return cls(np.zeros(z), np.zeros(z), np.zeros(z))

    @classmethod
    def from_decisions(cls, decisions, config: GameConfig) -> "SharedPlan":
        plan = cls.empty(config)
        for z in decisions:
            plan.add(z)
        return plan

    def add(self, z: DecisionVector, sign: float = 1.0) -> None:
        self.energy += sign * z.energy
        if z.stops:
            self.occupancy += sign * z.charging
            self.reentries[z.reentry] += sign

    def minus(self, z: DecisionVector) -> "SharedPlan":
        out = SharedPlan(self.energy.copy(), self.occupancy.copy(), self.reentries.copy())
        out.add(z, -1.0)
        return out


def cost_price(agent: AgentParams, z: DecisionVector, p_hat) -> float:
    return float(np.dot(np.asarray(p_hat) - agent.home_price, z.energy))


def cost_time(agent: AgentParams, z: DecisionVector, xi, xi_cs, config: GameConfig) -> float:
    t = np.arange(config.n_slots)
    inner = t * config.interval_h * config.idle_weight + np.asarray(xi) + np.asarray(xi_cs)
    return float(np.sum(config.chi() * inner * z.theta))


def total_cost(agent: AgentParams, z: DecisionVector, p_hat, xi, xi_cs_i, config) -> float:
    return (agent.alpha * cost_price(agent, z, p_hat)
            + (1 - agent.alpha) * cost_time(agent, z, xi, xi_cs_i, config))


def xi_from_oracle(predicted_delta: np.ndarray) -> np.ndarray:
    """Forecast extra time through cells 2..N, one value per interval."""
    pred = np.atleast_2d(np.asarray(predicted_delta, dtype=float))
    return pred[:, 1:].sum(axis=1)


def xi_cs(shared_minus_i: SharedPlan, gamma_h: float) -> np.ndarray:
    """Delay from the other agents re-entering cell 2 in each interval."""
    return gamma_h * shared_minus_i.reentries


def _kernel_scalars(config: GameConfig):
    return (config.horizon_intervals, config.half_width, config.interval_h,
            config.idle_weight, config.s2r_scale_h, float(config.spots),
            float(config.station_max), config.u_min_kwh, config.u_max_kwh)


def _check_inputs(config: GameConfig, p_hat, xi):
    p_hat = np.ascontiguousarray(p_hat, dtype=float)
    xi = np.ascontiguousarray(xi, dtype=float)
    if p_hat.shape != (config.n_slots,) or xi.shape != (config.n_slots,):
        raise DomainError(f"price and xi forecasts need {config.n_slots} values")
    return p_hat, xi


def best_response(agent: AgentParams, shared_minus_agent: SharedPlan, config: GameConfig,
                  p_hat, xi) -> DecisionVector:
    """Cost-minimising feasible plan against the others' aggregate plan.

    Ties go to no-stop, then to the earliest re-entry.
    """
    p_hat, xi = _check_inputs(config, p_hat, xi)
    H, W, lT, ups, gam, spots, umax, ulo, uhi = _kernel_scalars(config)
    r, _, pp, tt, u = kernels.best_response(
        agent.alpha, agent.capacity_kwh, agent.efficiency, agent.initial_soc, agent.soc_ref,
        agent.home_price, agent.elapsed, not agent.at_station, p_hat, xi, config.chi(),
        np.ascontiguousarray(shared_minus_agent.occupancy, dtype=float),
        np.ascontiguousarray(shared_minus_agent.energy, dtype=float),
        np.ascontiguousarray(shared_minus_agent.reentries, dtype=float),
        H, W, lT, ups, gam, spots, umax, ulo, uhi)
    if r == -2:
        raise GameInfeasible(f"agent {agent.agent_id} has no feasible plan")
    return DecisionVector(int(r), np.array(u), W, float(pp), float(tt))


@dataclass
class GameSolution:
    decisions: list[DecisionVector]
    converged: bool
    sweeps: int
    sweep_costs: np.ndarray = field(repr=False)

    @property
    def shared(self) -> np.ndarray:
        return np.sum([z.energy for z in self.decisions], axis=0)


def agent_arrays(agents) -> dict[str, np.ndarray]:
    return {
        "alpha": np.array([a.alpha for a in agents], dtype=float),
        "capacity": np.array([a.capacity_kwh for a in agents], dtype=float),
        "eta": np.array([a.efficiency for a in agents], dtype=float),
        "soc": np.array([a.initial_soc for a in agents], dtype=float),
        "soc_ref": np.array([a.soc_ref for a in agents], dtype=float),
        "home_price": np.array([a.home_price for a in agents], dtype=float),
        "elapsed": np.array([a.elapsed for a in agents], dtype=np.int64),
        "is_new": np.array([not a.at_station for a in agents], dtype=np.bool_),
    }


def solve_arrays(arrays: dict, plan_r: np.ndarray, plan_u: np.ndarray, config: GameConfig,
                 p_hat, xi, fixed: SharedPlan | None = None):
    """Array-level solve used by the scenario loop; plans are updated in place."""
    p_hat, xi = _check_inputs(config, p_hat, xi)
    fixed = fixed or SharedPlan.empty(config)
    H, W, lT, ups, gam, spots, umax, ulo, uhi = _kernel_scalars(config)
    return kernels.solve_game(
        arrays["alpha"], arrays["capacity"], arrays["eta"], arrays["soc"], arrays["soc_ref"],
        arrays["home_price"], arrays["elapsed"], arrays["is_new"], plan_r, plan_u, p_hat, xi,
        config.chi(), fixed.occupancy.astype(float), fixed.energy.astype(float),
        fixed.reentries.astype(float), H, W, lT, ups, gam, spots, umax, ulo, uhi,
        config.eps, config.max_sweeps)


def solve_game(agents, config: GameConfig, p_hat, xi, initial=None,
               fixed: SharedPlan | None = None) -> GameSolution:
    """Sequential best response until a sweep changes nobody's plan.

    ``initial`` optionally seeds the plans (agents at the station keep their
    previous plan); otherwise new agents start at no-stop and station agents
    at their best response to the agents before them. Raises
    ``GameNotConverged`` (carrying the last iterate) after ``max_sweeps``.
    """
    agents = list(agents)
    if not agents:
        raise DomainError("the game needs at least one agent")
    p_hat, xi = _check_inputs(config, p_hat, xi)
    n = len(agents)
    plan_r = np.full(n, NO_STOP, dtype=np.int64)
    plan_u = np.zeros((n, config.n_slots))
    base = fixed or SharedPlan.empty(config)
    running = SharedPlan(base.energy.copy(), base.occupancy.copy(), base.reentries.copy())
    for i, agent in enumerate(agents):
        if initial is not None and initial[i] is not None:
            z = initial[i]
        elif agent.at_station:
            z = best_response(agent, running, config, p_hat, xi)
        else:
            z = DecisionVector.no_stop(config)
        plan_r[i], plan_u[i] = z.block, z.energy
        running.add(z)
    converged, sweeps, sweep_costs, cp, ct = solve_arrays(
        agent_arrays(agents), plan_r, plan_u, config, p_hat, xi, fixed)
    decisions = [DecisionVector(int(plan_r[i]), plan_u[i].copy(), config.half_width,
                                float(cp[i]), float(ct[i])) for i in range(n)]
    solution = GameSolution(decisions, bool(converged), int(sweeps),
                            np.asarray(sweep_costs)[:sweeps])
    if not converged:
        raise GameNotConverged(f"no equilibrium after {sweeps} sweeps", solution)
    return solution


def check_profile(agents, decisions, config: GameConfig, fixed: SharedPlan | None = None,
                  tol: float = 1e-9) -> list[str]:
    """List every violated local or coupling constraint (empty when feasible)."""
    problems = []
    shared = SharedPlan.from_decisions(decisions, config)
    if fixed is not None:
        shared.energy += fixed.energy
        shared.occupancy += fixed.occupancy
    if np.any(shared.occupancy > config.spots + tol):
        problems.append("occupancy exceeds the number of spots")
    if np.any(shared.energy > config.station_max + tol):
        problems.append("station energy exceeds its maximum")
    W = config.half_width
    for a, z in zip(agents, decisions):
        tag = f"agent {a.agent_id}"
        if np.any(z.energy[~z.charging] > tol):
            problems.append(f"{tag}: energy outside the charging block")
        inside = z.energy[z.charging]
        if np.any(inside < config.u_min_kwh - tol) or np.any(inside > config.u_max_kwh + tol):
            problems.append(f"{tag}: energy outside [u_min, u_max]")
        if not a.at_station and z.block == 0:
            problems.append(f"{tag}: zero-length stop")
        if z.stops:
            stay = a.elapsed + z.block
            if stay < 2 * W + 1:
                problems.append(f"{tag}: stay {stay} shorter than 2W+1")
            if stay > config.horizon_intervals:
                problems.append(f"{tag}: stay {stay} longer than the horizon")
            if z.reentry > config.horizon_intervals - W:
                problems.append(f"{tag}: re-entry window leaves the horizon")
            soc = z.soc_trajectory(a)
            if soc[z.block] < a.soc_ref - tol:
                problems.append(f"{tag}: leaves below the reference SoC")
            if soc.max() > 1 + tol:
                problems.append(f"{tag}: SoC above 1")
    return problems
