import numpy as np
import pytest

from atdm import ctm
from atdm.ctm import CellParams, CtmState, StationCoupling, StretchParams
from atdm.errors import ConsistencyError, DataFormatError, DomainError
from atdm.kernels import F_EXIT, F_INFLOW, F_R2S, F_S2R


def cell1(table2):
    return table2.cells[0]


class TestDemandSupply:
    def test_demand_free_branch(self, table2):
        assert ctm.demand(cell1(table2), 1000.0) == pytest.approx(103150.0)

    def test_demand_zero(self, table2):
        for c in table2.cells:
            assert ctm.demand(c, 0.0) == 0.0

    def test_demand_capped(self, table2):
        assert ctm.demand(cell1(table2), 7200.0) == pytest.approx(1.26e5)

    def test_supply_jammed(self, table2):
        for c in table2.cells:
            assert ctm.supply(c, c.max_density_vehkm) == 0.0

    def test_supply_empty_cell1(self, table2):
        assert ctm.supply(cell1(table2), 0.0) == pytest.approx(1.26e5)

    def test_supply_cell7(self, table2):
        assert ctm.supply(table2.cells[6], 5000.0) == pytest.approx(22710.3)

    @pytest.mark.parametrize("rho", [-1.0, 1e6])
    def test_out_of_range_density(self, table2, rho):
        with pytest.raises(DomainError):
            ctm.demand(cell1(table2), rho)
        with pytest.raises(DomainError):
            ctm.supply(cell1(table2), rho)


class TestParams:
    def test_invalid_cells(self):
        with pytest.raises(DomainError):
            CellParams(0.5, 100.0, 120.0, 1e4, 200.0)  # w > v
        with pytest.raises(DomainError):
            CellParams(0.5, 100.0, 20.0, 1e6, 200.0)   # qmax above v*rhomax
        with pytest.raises(DomainError):
            CellParams(-0.5, 100.0, 20.0, 1e4, 200.0)

    def test_single_cell_rejected(self, table2):
        with pytest.raises(DomainError):
            StretchParams(table2.cells[:1])

    def test_cfl_remark_example(self):
        c = CellParams(0.5, 120.0, 20.0, 2000.0, 200.0)
        ratios, worst = ctm.cfl_ratio(StretchParams((c, c), 10.0))
        assert worst == pytest.approx(0.6667, abs=1e-3)

    def test_cfl_table2_worst_on_short_cell(self, table2):
        ratios, worst = ctm.cfl_ratio(table2)
        assert worst < 1
        assert table2.cells[int(np.argmax(ratios))].length_km == 0.365

    def test_cfl_rejects_long_step(self, table2):
        with pytest.raises(DomainError, match="ratio"):
            StretchParams(table2.cells, 30.0)

    def test_cfl_small_step(self, table2):
        ratios, worst = ctm.cfl_ratio(StretchParams(table2.cells, 1e-6))
        assert worst < 1e-6

    def test_params_csv_round_trip(self, table2, tmp_path):
        path = tmp_path / "p.csv"
        ctm.write_params_csv(table2, path)
        assert ctm.read_params_csv(path) == table2

    def test_params_csv_missing_column(self, tmp_path):
        path = tmp_path / "p.csv"
        path.write_text("ell,L_km\n1,0.5\n")
        with pytest.raises(DataFormatError, match="T_s"):
            ctm.read_params_csv(path)


class TestTraversal:
    def test_table2(self, table2):
        assert ctm.free_flow_traversal(table2) * 60 == pytest.approx(1.56, abs=0.01)

    def test_single_cell(self):
        c = CellParams(1.0, 60.0, 10.0, 1000.0, 100.0)
        p = StretchParams((c, c), 1.0)
        assert ctm.free_flow_traversal(p) * 60 == pytest.approx(2.0)

    def test_linear_in_length(self, table2):
        from dataclasses import replace
        doubled = StretchParams(tuple(replace(c, length_km=2 * c.length_km) for c in table2.cells))
        assert ctm.free_flow_traversal(doubled) == pytest.approx(2 * ctm.free_flow_traversal(table2))


class TestStep:
    def test_vacuum_fixed_point(self, table2):
        s, f = ctm.step(table2, CtmState.empty(table2), 0.0, 1e5)
        assert np.all(s.densities_vehkm == 0)
        assert s.step_index == 1

    def test_steady_free_flow(self, table2):
        L, v, *_ = table2.arrays()
        q = 60000.0
        s0 = CtmState(q / v)
        s1, f = ctm.step(table2, s0, q, 1.3e5)
        np.testing.assert_allclose(s1.densities_vehkm, s0.densities_vehkm, rtol=1e-12)
        assert f.exit == pytest.approx(q)

    def test_conservation_with_station(self, table2, rng):
        L = table2.arrays()[0]
        s = CtmState(rng.uniform(0, 2000, table2.n_cells))
        for _ in range(200):
            q = rng.uniform(0, 1.3e5)
            cap = rng.uniform(2e4, 1.4e5)
            r2s = rng.uniform(0, 1) * ctm.demand(table2.cells[0], float(s.densities_vehkm[0]))
            coupling = StationCoupling(r2s, rng.uniform(0, 3000))
            s1, f = ctm.step(table2, s, q, cap, coupling)
            lhs = np.sum(L * (s1.densities_vehkm - s.densities_vehkm))
            rhs = table2.step_h * (f.inflow - f.exit - f.r2s + f.s2r)
            assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-9)
            s = s1

    def test_r2s_above_demand_rejected(self, table2):
        with pytest.raises(DomainError):
            ctm.step(table2, CtmState.empty(table2), 0.0, 1e5, StationCoupling(10.0, 0.0))

    def test_invalid_state_rejected(self, table2):
        rho = np.zeros(table2.n_cells)
        rho[2] = 1e6
        with pytest.raises(ConsistencyError):
            ctm.step(table2, CtmState(rho), 0.0, 1e5)

    def test_s2r_priority(self, table2):
        rho = np.zeros(table2.n_cells)
        rho[0] = 1200.0
        rho[1] = 6000.0  # cell 2 nearly jammed, little supply
        sup2 = ctm.supply(table2.cells[1], 6000.0)
        _, first = ctm.step(table2, CtmState(rho), 0.0, 1e5, StationCoupling(0.0, sup2), True)
        _, last = ctm.step(table2, CtmState(rho), 0.0, 1e5, StationCoupling(0.0, sup2), False)
        assert first.s2r == pytest.approx(sup2)
        assert last.s2r == pytest.approx(0.0, abs=1e-9)

    def test_deterministic(self, table2):
        rho = np.linspace(100, 3000, table2.n_cells)
        a = ctm.step(table2, CtmState(rho), 9e4, 5e4, StationCoupling(100, 50))
        b = ctm.step(table2, CtmState(rho), 9e4, 5e4, StationCoupling(100, 50))
        assert np.array_equal(a[0].densities_vehkm, b[0].densities_vehkm)


class TestRun:
    def test_backlog_queues_unserved_inflow(self, table2):
        n = 50
        _, _, flows, backlog = ctm.run(table2, np.zeros(table2.n_cells), np.full(n, 2e5), 1e5)
        served = flows[:, F_INFLOW].sum() * table2.step_h
        assert backlog[0] == pytest.approx(n * 2e5 * table2.step_h - served)

    def test_dropped_upstream_has_no_backlog(self, table2):
        _, _, _, backlog = ctm.run(table2, np.zeros(table2.n_cells), np.full(50, 2e5), 1e5,
                                   queue_upstream=False)
        assert backlog[0] == 0.0

    def test_station_backlogs_carry(self, table2):
        # r2s from an empty cell 1 cannot be served and waits
        _, _, flows, backlog = ctm.run(table2, np.zeros(table2.n_cells), np.zeros(5), 1e5,
                                       r2s=np.full(5, 360.0))
        assert backlog[1] == pytest.approx(5 * 360 * table2.step_h)
        assert np.all(flows[:, F_R2S] == 0)

    def test_run_matches_steps(self, table2, rng):
        n = 30
        inflow = rng.uniform(0, 1.2e5, n)
        supply = rng.uniform(3e4, 1.3e5, n)
        traj, delta, flows, _ = ctm.run(table2, np.zeros(table2.n_cells), inflow, supply)
        s = CtmState.empty(table2)
        for k in range(n):
            s, f = ctm.step(table2, s, inflow[k], supply[k])
            np.testing.assert_allclose(s.densities_vehkm, traj[k + 1], rtol=1e-12, atol=1e-9)
            assert f.exit == pytest.approx(flows[k, F_EXIT])

    def test_series_length_checked(self, table2):
        with pytest.raises(DomainError):
            ctm.run(table2, np.zeros(table2.n_cells), np.zeros(5), np.zeros(4))


class TestExtraTime:
    def test_free_flow_zero(self, table2):
        L, v, *_ = table2.arrays()
        rho = np.full(table2.n_cells, 500.0)
        rep = ctm.extra_travel_time(table2, CtmState(rho), v * rho)
        assert rep.total_extra_h == 0.0

    def test_half_speed_cell1(self, table2):
        L, v, *_ = table2.arrays()
        rho = np.zeros(table2.n_cells)
        rho[0] = 1000.0
        out = np.zeros(table2.n_cells)
        out[0] = 0.5 * v[0] * 1000.0
        rep = ctm.extra_travel_time(table2, CtmState(rho), out)
        assert rep.per_cell_extra_h[0] == pytest.approx(0.00378, abs=1e-5)

    def test_jam_cap(self, table2):
        L, v, *_ = table2.arrays()
        rho = np.full(table2.n_cells, 3000.0)
        rep = ctm.extra_travel_time(table2, CtmState(rho), np.zeros(table2.n_cells))
        np.testing.assert_allclose(rep.per_cell_extra_h, ctm.JAM_CAP * L / v)

    def test_vacuum_is_free(self, table2):
        rep = ctm.extra_travel_time(table2, CtmState.empty(table2), np.zeros(table2.n_cells))
        assert rep.total_extra_h == 0.0


class TestPredict:
    def test_free_flow_zero(self, table2):
        pred = ctm.predict(table2, CtmState.empty(table2), 5e4, 4, 10)
        assert pred.shape == (4, table2.n_cells)
        np.testing.assert_allclose(pred, 0.0, atol=1e-15)

    def test_horizon_one_matches_direct_steps(self, table2):
        rho = np.array([500, 900, 4000, 5000, 800, 300, 200], dtype=float)
        state = CtmState(rho)
        pred = ctm.predict(table2, state, 8e4, 1, 10, 6e4)
        s = state
        acc = np.zeros(table2.n_cells)
        for _ in range(10):
            before = s
            s, f = ctm.step(table2, s, 8e4, 6e4)
            acc += ctm.extra_travel_time(table2, before, f.cell_outflows).per_cell_extra_h
        np.testing.assert_allclose(pred[0], acc / 10, rtol=1e-10, atol=1e-14)

    def test_dissipates_without_inflow(self, table2):
        rho = np.array([3000, 5000, 6000, 5000, 4000, 3000, 2000], dtype=float)
        pred = ctm.predict(table2, CtmState(rho), 0.0, 12, 10)
        totals = pred.sum(axis=1)
        assert np.all(np.diff(totals) <= 1e-12)

    def test_state_untouched(self, table2):
        rho = np.array([3000, 5000, 6000, 5000, 4000, 3000, 2000], dtype=float)
        state = CtmState(rho)
        ctm.predict(table2, state, 1e5, 3, 10)
        assert np.array_equal(state.densities_vehkm, rho)
