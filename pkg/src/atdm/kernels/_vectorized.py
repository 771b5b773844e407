"""Pure-numpy kernels with the same signatures and results as ``_loops``.

The CTM rollout vectorises over cells; the best response vectorises over
all block lengths of one agent at once.
"""

from __future__ import annotations

import numpy as np

from ._loops import F_CELL1_OUT, F_EXIT, F_INFLOW, F_R2S, F_S2R


def ctm_run(rho0, length, vfree, wave, qmax, rhomax, dt_h, inflow, exit_supply,
            r2s_rate, s2r_rate, backlog0, s2r_first, rho_eps, jam_cap, queue_upstream):
    n_steps = inflow.shape[0]
    n = rho0.shape[0]
    rho = rho0.astype(float).copy()
    backlog = backlog0.astype(float).copy()
    traj = np.empty((n_steps + 1, n))
    delta = np.empty((n_steps, n))
    flows = np.empty((n_steps, 5))
    traj[0] = rho
    free_time = length / vfree
    cap = jam_cap * free_time
    phi = np.empty(n + 1)
    gain = dt_h / length
    for k in range(n_steps):
        dem = np.minimum(vfree * rho, qmax)
        sup = np.maximum(np.minimum(wave * (rhomax - rho), qmax), 0.0)

        phi[0] = min(inflow[k] + backlog[0] / dt_h, sup[0])
        r2s = min(r2s_rate[k] + backlog[1] / dt_h, dem[0])
        s2r_req = s2r_rate[k] + backlog[2] / dt_h
        if s2r_first:
            s2r = min(s2r_req, sup[1])
            phi[1] = min(dem[0] - r2s, sup[1] - s2r)
        else:
            phi[1] = min(dem[0] - r2s, sup[1])
            s2r = min(s2r_req, sup[1] - phi[1])
        phi[2:n] = np.minimum(dem[1:n - 1], sup[2:n])
        phi[n] = min(dem[n - 1], exit_supply[k])

        if queue_upstream:
            backlog[0] = max(backlog[0] + (inflow[k] - phi[0]) * dt_h, 0.0)
        backlog[1] = max(backlog[1] + (r2s_rate[k] - r2s) * dt_h, 0.0)
        backlog[2] = max(backlog[2] + (s2r_rate[k] - s2r) * dt_h, 0.0)

        out = phi[1:].copy()
        out[0] += r2s
        occupied = rho >= rho_eps
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            speed = np.where(occupied, out / np.where(occupied, rho, 1.0), 0.0)
            extra = np.where(speed > 0.0, length / np.where(speed > 0.0, speed, 1.0) - free_time, cap)
        delta[k] = np.where(occupied, np.minimum(np.maximum(extra, 0.0), cap), 0.0)

        net = phi[:n] - phi[1:]
        net[0] -= r2s
        net[1] += s2r
        rho = rho + gain * net

        flows[k, F_INFLOW] = phi[0]
        flows[k, F_R2S] = r2s
        flows[k, F_S2R] = s2r
        flows[k, F_EXIT] = phi[n]
        flows[k, F_CELL1_OUT] = out[0]
        traj[k + 1] = rho
    return traj, delta, flows, backlog


def _time_costs(horizon, half_width, chi, xi, re_other, interval_h, upsilon, gamma_h):
    """Time cost for every re-entry interval 0..horizon (windowed sums)."""
    t = np.arange(horizon + 1)
    g = chi * (t * interval_h * upsilon + xi + gamma_h * re_other)
    c = np.concatenate(([0.0], np.cumsum(g)))
    lo = np.maximum(t - half_width, 0)
    hi = np.minimum(t + half_width, horizon)
    return c[hi + 1] - c[lo]


def _fill_all(blocks, cost, en_res, spots_res, ulo, uhi, emin, emax):
    """Cheapest-first energy fill for every block length in ``blocks`` at once.

    Returns (feasible[nb], price[nb], u[nb, n_t]).
    """
    tol = 1e-9
    n_t = cost.shape[0]
    t = np.arange(n_t)
    blocks = np.asarray(blocks)
    inside = t[None, :] < blocks[:, None]
    hi = np.minimum(uhi, en_res)
    slot_ok = (spots_res >= 1.0) & (hi >= ulo - tol)
    feasible = np.all(slot_ok[None, :] | ~inside, axis=1)
    base = blocks * ulo
    feasible &= base <= emax + tol

    order = np.argsort(cost, kind="stable")
    cap_sorted = np.where(inside[:, order], np.maximum(hi - ulo, 0.0)[order][None, :], 0.0)
    neg = cost[order] < 0.0
    need = emin - base
    budget = emax - base

    cum_neg = np.cumsum(cap_sorted * neg[None, :], axis=1)
    f1 = np.minimum(cum_neg, budget[:, None])
    f1 = np.maximum(f1, 0.0)
    fill_neg = np.diff(np.concatenate((np.zeros((len(blocks), 1)), f1), axis=1), axis=1)
    f1_total = f1[:, -1]
    target = np.maximum(f1_total, np.minimum(need, budget))
    cum_pos = f1_total[:, None] + np.cumsum(cap_sorted * (~neg)[None, :], axis=1)
    f2 = np.minimum(cum_pos, target[:, None])
    fill_pos = np.diff(np.concatenate((f1_total[:, None], f2), axis=1), axis=1)
    extra_sorted = fill_neg * neg[None, :] + np.maximum(fill_pos, 0.0) * (~neg)[None, :]

    u = np.zeros((len(blocks), n_t))
    u[:, order] = extra_sorted
    u += ulo * inside
    feasible &= u.sum(axis=1) - base >= need - tol
    price = u @ cost
    return feasible, price, u


def _best_option(alpha, capacity, eta, soc, soc_ref, home_price, elapsed, is_new,
                 price_hat, xi, chi, occ_other, en_other, re_other, horizon, half_width,
                 interval_h, upsilon, gamma_h, spots, station_max, ulo, uhi):
    n_t = horizon + 1
    cost = price_hat - home_price
    tcost = _time_costs(horizon, half_width, chi, xi, re_other, interval_h, upsilon, gamma_h)
    if is_new:
        blocks = np.arange(2 * half_width + 1, horizon - half_width + 1)
    else:
        blocks = np.arange(max(0, 2 * half_width + 1 - elapsed),
                           min(horizon - half_width, horizon - elapsed) + 1)
    emin = max(0.0, (soc_ref - soc) * capacity / eta)
    emax = (1.0 - soc) * capacity / eta

    best, best_r, best_pp, best_tt = np.inf, -2, 0.0, 0.0
    best_u = np.zeros(n_t)
    if is_new:
        best, best_r, best_tt = (1.0 - alpha) * tcost[0], -1, tcost[0]
    if blocks.size:
        feasible, price, u = _fill_all(blocks, cost, station_max - en_other,
                                       spots - occ_other, ulo, uhi, emin, emax)
        feasible &= ~((blocks == 0) & (emin > 1e-9))
        total = alpha * price + (1.0 - alpha) * tcost[blocks]
        # sequential strict improvement keeps the earliest of near-ties
        for k in np.flatnonzero(feasible):
            if total[k] < best - 1e-12:
                best, best_r = total[k], int(blocks[k])
                best_pp, best_tt = price[k], tcost[blocks[k]]
                best_u = u[k].copy()
    return best_r, best, best_pp, best_tt, best_u


def _plan_cost(alpha, home_price, r, u_row, price_hat, xi, chi, re_other, horizon,
               half_width, interval_h, upsilon, gamma_h):
    pp = float((price_hat - home_price) @ u_row)
    reentry = max(r, 0)
    lo, hi = max(0, reentry - half_width), min(horizon, reentry + half_width)
    t = np.arange(lo, hi + 1)
    tt = float(np.sum(chi[t] * (t * interval_h * upsilon + xi[t] + gamma_h * re_other[t])))
    return alpha * pp + (1.0 - alpha) * tt, pp, tt


def _apply(plan_r, plan_u, i, sign, occ, en, re):
    r = plan_r[i]
    en += sign * plan_u[i]
    if r >= 0:
        occ[:r] += sign
        re[r] += sign


def solve_game(alpha, capacity, eta, soc, soc_ref, home_price, elapsed, is_new,
               plan_r, plan_u, price_hat, xi, chi, occ_fixed, en_fixed, re_fixed,
               horizon, half_width, interval_h, upsilon, gamma_h, spots, station_max,
               ulo, uhi, eps, max_sweeps):
    n = alpha.shape[0]
    occ, en, re = occ_fixed.copy(), en_fixed.copy(), re_fixed.copy()
    for i in range(n):
        _apply(plan_r, plan_u, i, 1.0, occ, en, re)
    sweep_costs = np.full(max_sweeps, np.nan)
    cost_price = np.zeros(n)
    cost_time = np.zeros(n)
    converged, sweeps = False, 0
    for s in range(max_sweeps):
        sweeps += 1
        changed = False
        total = 0.0
        for i in range(n):
            _apply(plan_r, plan_u, i, -1.0, occ, en, re)
            cur, cur_pp, cur_tt = _plan_cost(alpha[i], home_price[i], plan_r[i], plan_u[i],
                                             price_hat, xi, chi, re, horizon, half_width,
                                             interval_h, upsilon, gamma_h)
            r, j, pp, tt, u = _best_option(alpha[i], capacity[i], eta[i], soc[i], soc_ref[i],
                                           home_price[i], elapsed[i], is_new[i], price_hat,
                                           xi, chi, occ, en, re, horizon, half_width,
                                           interval_h, upsilon, gamma_h, spots, station_max,
                                           ulo, uhi)
            if r > -2 and j < cur - eps:
                plan_r[i] = r
                plan_u[i] = u
                cur, cur_pp, cur_tt = j, pp, tt
                changed = True
            cost_price[i], cost_time[i] = cur_pp, cur_tt
            total += cur
            _apply(plan_r, plan_u, i, 1.0, occ, en, re)
        sweep_costs[s] = total
        if not changed:
            converged = True
            break
    return converged, sweeps, sweep_costs, cost_price, cost_time


def best_response(alpha, capacity, eta, soc, soc_ref, home_price, elapsed, is_new,
                  price_hat, xi, chi, occ_other, en_other, re_other, horizon, half_width,
                  interval_h, upsilon, gamma_h, spots, station_max, ulo, uhi):
    r, j, pp, tt, u = _best_option(alpha, capacity, eta, soc, soc_ref, home_price, elapsed,
                                   is_new, price_hat, xi, chi, occ_other, en_other, re_other,
                                   horizon, half_width, interval_h, upsilon, gamma_h, spots,
                                   station_max, ulo, uhi)
    return r, j, pp, tt, u
