"""Loop-style kernels, compiled with numba when it is available.

All functions take and return plain numpy arrays / scalars so the same
source runs compiled or interpreted. Units: densities veh/km, flows veh/h,
times h, energies kWh.
"""

from __future__ import annotations

import numpy as np

from .._backend import njit

# flows columns returned by ctm_run
F_INFLOW, F_R2S, F_S2R, F_EXIT, F_CELL1_OUT = range(5)


@njit(cache=True)
def ctm_run(rho0, length, vfree, wave, qmax, rhomax, dt_h, inflow, exit_supply,
            r2s_rate, s2r_rate, backlog0, s2r_first, rho_eps, jam_cap, queue_upstream):
    n_steps = inflow.shape[0]
    n = rho0.shape[0]
    rho = rho0.copy()
    backlog = backlog0.copy()
    traj = np.empty((n_steps + 1, n))
    delta = np.empty((n_steps, n))
    flows = np.empty((n_steps, 5))
    dem = np.empty(n)
    sup = np.empty(n)
    phi = np.empty(n + 1)
    out = np.empty(n)
    traj[0, :] = rho
    for k in range(n_steps):
        for i in range(n):
            dem[i] = min(vfree[i] * rho[i], qmax[i])
            sup[i] = max(min(wave[i] * (rhomax[i] - rho[i]), qmax[i]), 0.0)

        phi[0] = min(inflow[k] + backlog[0] / dt_h, sup[0])
        r2s = min(r2s_rate[k] + backlog[1] / dt_h, dem[0])
        s2r_req = s2r_rate[k] + backlog[2] / dt_h
        if s2r_first:
            s2r = min(s2r_req, sup[1])
            phi[1] = min(dem[0] - r2s, sup[1] - s2r)
        else:
            phi[1] = min(dem[0] - r2s, sup[1])
            s2r = min(s2r_req, sup[1] - phi[1])
        for i in range(2, n):
            phi[i] = min(dem[i - 1], sup[i])
        phi[n] = min(dem[n - 1], exit_supply[k])

        if queue_upstream:
            backlog[0] = max(backlog[0] + (inflow[k] - phi[0]) * dt_h, 0.0)
        backlog[1] = max(backlog[1] + (r2s_rate[k] - r2s) * dt_h, 0.0)
        backlog[2] = max(backlog[2] + (s2r_rate[k] - s2r) * dt_h, 0.0)

        out[0] = r2s + phi[1]
        for i in range(1, n):
            out[i] = phi[i + 1]

        for i in range(n):
            if rho[i] < rho_eps:
                delta[k, i] = 0.0
                continue
            cap = jam_cap * length[i] / vfree[i]
            speed = out[i] / rho[i]
            if speed <= 0.0:
                delta[k, i] = cap
            else:
                extra = length[i] / speed - length[i] / vfree[i]
                delta[k, i] = min(max(extra, 0.0), cap)

        rho[0] += dt_h / length[0] * (phi[0] - r2s - phi[1])
        rho[1] += dt_h / length[1] * (phi[1] + s2r - phi[2])
        for i in range(2, n):
            rho[i] += dt_h / length[i] * (phi[i] - phi[i + 1])

        flows[k, F_INFLOW] = phi[0]
        flows[k, F_R2S] = r2s
        flows[k, F_S2R] = s2r
        flows[k, F_EXIT] = phi[n]
        flows[k, F_CELL1_OUT] = out[0]
        traj[k + 1, :] = rho
    return traj, delta, flows, backlog


@njit(cache=True)
def _fill_energy(r, cost, en_res, spots_res, ulo, uhi, emin, emax, u_out, cap_buf, order):
    """Cheapest-first fill of a charging block [0, r). Returns (feasible, price)."""
    tol = 1e-9
    for t in range(u_out.shape[0]):
        u_out[t] = 0.0
    base = r * ulo
    if base > emax + tol:
        return False, 0.0
    for t in range(r):
        if spots_res[t] < 1.0:
            return False, 0.0
        hi = min(uhi, en_res[t])
        if hi < ulo - tol:
            return False, 0.0
        u_out[t] = ulo
        cap_buf[t] = max(hi - ulo, 0.0)
        order[t] = t
    # stable insertion sort of the block by price
    for a in range(1, r):
        key = order[a]
        b = a - 1
        while b >= 0 and cost[order[b]] > cost[key]:
            order[b + 1] = order[b]
            b -= 1
        order[b + 1] = key
    need = emin - base
    budget = emax - base
    filled = 0.0
    for j in range(r):
        t = order[j]
        if cost[t] < 0.0:
            limit = budget
        else:
            limit = min(need, budget)
        add = min(cap_buf[t], limit - filled)
        if add > 0.0:
            u_out[t] += add
            filled += add
    if filled < need - tol:
        return False, 0.0
    price = 0.0
    for t in range(r):
        price += cost[t] * u_out[t]
    return True, price


@njit(cache=True)
def _time_cost(reentry, horizon, half_width, chi, xi, reentries_other, interval_h,
               upsilon, gamma_h):
    lo = max(0, reentry - half_width)
    hi = min(horizon, reentry + half_width)
    s = 0.0
    for t in range(lo, hi + 1):
        s += chi[t] * (t * interval_h * upsilon + xi[t] + gamma_h * reentries_other[t])
    return s


@njit(cache=True)
def _best_option(alpha, capacity, eta, soc, soc_ref, home_price, elapsed, is_new,
                 price_hat, xi, chi, occ_other, en_other, re_other, horizon, half_width,
                 interval_h, upsilon, gamma_h, spots, station_max, ulo, uhi,
                 best_u, work_u, cost, en_res, spots_res, cap_buf, order):
    """Exhaustive discrete enumeration with exact energy fill for one agent.

    Returns (best_block, best_cost, best_price_cost, best_time_cost); block -1
    is the no-stop choice. best_u receives the energy plan.
    """
    n_t = horizon + 1
    for t in range(n_t):
        cost[t] = price_hat[t] - home_price
        en_res[t] = station_max - en_other[t]
        spots_res[t] = spots - occ_other[t]
        best_u[t] = 0.0
    best = np.inf
    best_r = -2
    best_pp = 0.0
    best_tt = 0.0
    if is_new:
        tt = _time_cost(0, horizon, half_width, chi, xi, re_other, interval_h, upsilon, gamma_h)
        best = (1.0 - alpha) * tt
        best_r = -1
        best_tt = tt
        r_lo = 2 * half_width + 1
        r_hi = horizon - half_width
    else:
        r_lo = max(0, 2 * half_width + 1 - elapsed)
        r_hi = min(horizon - half_width, horizon - elapsed)
    emin = max(0.0, (soc_ref - soc) * capacity / eta)
    emax = (1.0 - soc) * capacity / eta
    for r in range(r_lo, r_hi + 1):
        if r == 0 and emin > 1e-9:
            continue
        ok, pp = _fill_energy(r, cost, en_res, spots_res, ulo, uhi, emin, emax,
                              work_u, cap_buf, order)
        if not ok:
            continue
        tt = _time_cost(r, horizon, half_width, chi, xi, re_other, interval_h, upsilon, gamma_h)
        j = alpha * pp + (1.0 - alpha) * tt
        if j < best - 1e-12:
            best = j
            best_r = r
            best_pp = pp
            best_tt = tt
            for t in range(n_t):
                best_u[t] = work_u[t]
    return best_r, best, best_pp, best_tt


@njit(cache=True)
def _plan_cost(alpha, home_price, r, u_row, price_hat, xi, chi, re_other, horizon,
               half_width, interval_h, upsilon, gamma_h):
    pp = 0.0
    for t in range(horizon + 1):
        pp += (price_hat[t] - home_price) * u_row[t]
    reentry = r if r > 0 else 0
    tt = _time_cost(reentry, horizon, half_width, chi, xi, re_other, interval_h, upsilon, gamma_h)
    return alpha * pp + (1.0 - alpha) * tt, pp, tt


@njit(cache=True)
def _apply(plan_r, plan_u, i, sign, occ, en, re):
    r = plan_r[i]
    for t in range(plan_u.shape[1]):
        en[t] += sign * plan_u[i, t]
    if r >= 0:
        for t in range(r):
            occ[t] += sign
        re[r] += sign


@njit(cache=True)
def solve_game(alpha, capacity, eta, soc, soc_ref, home_price, elapsed, is_new,
               plan_r, plan_u, price_hat, xi, chi, occ_fixed, en_fixed, re_fixed,
               horizon, half_width, interval_h, upsilon, gamma_h, spots, station_max,
               ulo, uhi, eps, max_sweeps):
    """Gauss-Seidel best-response sweeps; plan_r / plan_u are updated in place.

    Returns (converged, sweeps, sweep_costs, cost_price, cost_time).
    """
    n = alpha.shape[0]
    n_t = horizon + 1
    occ = occ_fixed.copy()
    en = en_fixed.copy()
    re = re_fixed.copy()
    for i in range(n):
        _apply(plan_r, plan_u, i, 1.0, occ, en, re)
    sweep_costs = np.full(max_sweeps, np.nan)
    cost_price = np.zeros(n)
    cost_time = np.zeros(n)
    best_u = np.empty(n_t)
    work_u = np.empty(n_t)
    cost = np.empty(n_t)
    en_res = np.empty(n_t)
    spots_res = np.empty(n_t)
    cap_buf = np.empty(n_t)
    order = np.empty(n_t, dtype=np.int64)
    converged = False
    sweeps = 0
    for s in range(max_sweeps):
        sweeps += 1
        changed = False
        total = 0.0
        for i in range(n):
            _apply(plan_r, plan_u, i, -1.0, occ, en, re)
            cur, cur_pp, cur_tt = _plan_cost(alpha[i], home_price[i], plan_r[i], plan_u[i],
                                             price_hat, xi, chi, re, horizon, half_width,
                                             interval_h, upsilon, gamma_h)
            r, j, pp, tt = _best_option(alpha[i], capacity[i], eta[i], soc[i], soc_ref[i],
                                        home_price[i], elapsed[i], is_new[i], price_hat, xi,
                                        chi, occ, en, re, horizon, half_width, interval_h,
                                        upsilon, gamma_h, spots, station_max, ulo, uhi,
                                        best_u, work_u, cost, en_res, spots_res, cap_buf,
                                        order)
            if r > -2 and j < cur - eps:
                plan_r[i] = r
                for t in range(n_t):
                    plan_u[i, t] = best_u[t]
                cur, cur_pp, cur_tt = j, pp, tt
                changed = True
            cost_price[i] = cur_pp
            cost_time[i] = cur_tt
            total += cur
            _apply(plan_r, plan_u, i, 1.0, occ, en, re)
        sweep_costs[s] = total
        if not changed:
            converged = True
            break
    return converged, sweeps, sweep_costs, cost_price, cost_time


@njit(cache=True)
def best_response(alpha, capacity, eta, soc, soc_ref, home_price, elapsed, is_new,
                  price_hat, xi, chi, occ_other, en_other, re_other, horizon, half_width,
                  interval_h, upsilon, gamma_h, spots, station_max, ulo, uhi):
    n_t = horizon + 1
    best_u = np.zeros(n_t)
    r, j, pp, tt = _best_option(alpha, capacity, eta, soc, soc_ref, home_price, elapsed,
                                is_new, price_hat, xi, chi, occ_other, en_other, re_other,
                                horizon, half_width, interval_h, upsilon, gamma_h, spots,
                                station_max, ulo, uhi, best_u, np.empty(n_t), np.empty(n_t),
                                np.empty(n_t), np.empty(n_t), np.empty(n_t),
                                np.empty(n_t, dtype=np.int64))
    return r, j, pp, tt, best_u
