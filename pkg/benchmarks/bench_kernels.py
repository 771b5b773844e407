"""Numba vs pure-numpy kernels: CTM day rollout, one game solve, one closed-loop day.

    python benchmarks/bench_kernels.py [--repeat 5]

The first numba call compiles; it is timed separately and excluded from the
per-call figures.
"""

import argparse
import time

import numpy as np

from atdm import ctm, game, scenario
from atdm._backend import NUMBA_AVAILABLE, use_backend


def ctm_day():
    params = ctm.table2_stretch()
    rng = np.random.default_rng(0)
    n = 4680
    inflow = 9e4 + 3e4 * np.sin(np.linspace(0, 6, n)) ** 2
    supply = np.full(n, 1.2e5) - 4e4 * (rng.random(n) < 0.2)
    return lambda: ctm.run(params, np.zeros(params.n_cells), inflow, supply,
                           np.full(n, 200.0), np.full(n, 150.0))


def game_solve(n_agents=40):
    rng = np.random.default_rng(1)
    cfg = game.GameConfig()
    agents = [game.AgentParams(capacity_kwh=float(rng.choice([24, 40, 64, 100])),
                               efficiency=0.9, alpha=float(rng.uniform(0.3, 0.95)),
                               initial_soc=float(rng.uniform(0.35, 0.8)), soc_ref=0.3,
                               agent_id=i) for i in range(n_agents)]
    p_hat = 0.205 + 0.05 * rng.standard_normal(cfg.n_slots)
    xi = rng.uniform(0, 0.01, cfg.n_slots)
    return lambda: game.solve_game(agents, cfg, p_hat, xi)


def closed_loop_day():
    cfg = scenario.synthetic_base_case(0)
    base = scenario.run_baseline(cfg)
    return lambda: scenario.run_atdm(cfg, base)


def timed(fn, repeat):
    first = time.perf_counter()
    fn()
    first = time.perf_counter() - first
    runs = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        runs.append(time.perf_counter() - t0)
    return first, float(np.median(runs))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    backends = ["numpy"] + (["numba"] if NUMBA_AVAILABLE else [])
    cases = [("ctm day (4680 steps)", ctm_day()), ("game solve (40 agents)", game_solve()),
             ("closed-loop day", closed_loop_day())]
    print(f"{'case':<26}{'backend':<8}{'first s':>10}{'median s':>12}")
    for name, fn in cases:
        medians = {}
        for b in backends:
            with use_backend(b):
                first, med = timed(fn, args.repeat)
            medians[b] = med
            print(f"{name:<26}{b:<8}{first:>10.4f}{med:>12.5f}")
        if len(medians) == 2:
            print(f"{'':<26}speedup {medians['numpy'] / medians['numba']:>8.1f}x")


if __name__ == "__main__":
    main()
