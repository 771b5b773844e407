import json
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from atdm import ctm, scenario
from atdm.errors import DomainError, UndefinedIndexError
from atdm.pricing import DemandProfile
from atdm.scenario import AgentPools, ScenarioConfig, SweepSpec


def small_config(inflow=6e4, n_steps=600, **kw):
    params = ctm.table2_stretch()
    return ScenarioConfig(params, np.full(n_steps, inflow), np.full(n_steps, 1.4e5),
                          DemandProfile(np.full(60, 4050.0)), **kw)


class TestSpawn:
    def test_no_share_no_agents(self):
        rng = np.random.default_rng(0)
        assert all(len(scenario.spawn_agents(1e5, 1 / 36, 0.0, rng)) == 0 for _ in range(50))

    def test_expected_count(self):
        rng = np.random.default_rng(0)
        counts = [len(scenario.spawn_agents(3600.0, 1 / 36, 0.05, rng)) for _ in range(4000)]
        assert np.mean(counts) == pytest.approx(5.0, abs=0.15)

    def test_deterministic(self):
        a = scenario.spawn_agents(9e4, 1 / 36, 0.05, np.random.default_rng(4))
        b = scenario.spawn_agents(9e4, 1 / 36, 0.05, np.random.default_rng(4))
        for f in a.__dataclass_fields__:
            np.testing.assert_array_equal(getattr(a, f), getattr(b, f))

    def test_attribute_ranges(self):
        pools = AgentPools()
        a = scenario.spawn_agents(1e6, 1 / 36, 0.5, np.random.default_rng(1), pools,
                                  alpha_std=0.29)
        assert len(a) > 1000
        assert set(np.unique(a.capacity)) <= set(pools.capacity_kwh)
        assert np.all((a.alpha > 0) & (a.alpha < 1))
        assert np.all((a.soc_ref >= 0.25) & (a.soc_ref <= 0.35))
        assert np.all((a.eta >= 0.85) & (a.eta <= 0.99))
        assert np.all(a.soc >= pools.soc[0])
        assert np.array_equal(a.agent_id, np.arange(len(a)))

    def test_negative_flow(self):
        with pytest.raises(DomainError):
            scenario.spawn_agents(-1.0, 1 / 36, 0.05, np.random.default_rng(0))


class TestConfig:
    def test_invariants(self):
        with pytest.raises(DomainError):
            small_config(pev_share=1.5)
        with pytest.raises(DomainError):
            small_config(alpha_std=-0.1)
        with pytest.raises(DomainError):
            small_config(game=scenario.GameConfig(interval_h=95 / 3600))

    def test_clock_bridge(self):
        cfg = small_config()
        assert cfg.steps_per_interval == 10 and cfg.n_intervals == 60


class TestIndex:
    def test_identity(self):
        d = np.array([0.1, 0.2, 0.0])
        assert scenario.performance_index(d, d) == 0.0

    def test_full_removal(self):
        assert scenario.performance_index([0.1, 0.2], [0.0, 0.0]) == 100.0

    def test_undefined(self):
        with pytest.raises(UndefinedIndexError):
            scenario.performance_index([0.0, 0.0], [0.0, 0.0])

    def test_length_mismatch(self):
        with pytest.raises(DomainError):
            scenario.performance_index([0.1], [0.1, 0.2])


class TestSmallRuns:
    def test_subcapacity_baseline_is_free(self):
        b = scenario.run_baseline(small_config())
        np.testing.assert_allclose(b.total, 0.0, atol=1e-15)

    def test_no_pevs_matches_baseline(self, base_case):
        cfg, base = base_case
        res = scenario.run_atdm(replace(cfg, pev_share=0.0), base)
        np.testing.assert_array_equal(res.delta_h, base.delta_h)
        assert res.pi == 0.0 and res.n_new.sum() == 0

    def test_baseline_ignores_game_parameters(self, base_case):
        cfg, base = base_case
        other = scenario.run_baseline(replace(cfg, pev_share=0.2, alpha_std=0.2))
        np.testing.assert_array_equal(other.delta_h, base.delta_h)


@pytest.fixture(scope="module")
def base_run(base_case):
    cfg, base = base_case
    return cfg, base, scenario.run_atdm(cfg, base)


class TestBaseCase:
    def test_positive_index_and_peak_cut(self, base_run):
        cfg, base, res = base_run
        assert res.pi > 0
        k = int(np.argmax(res.delta0_total))
        assert res.delta_total[k] < res.delta0_total[k]

    def test_constraints(self, base_run):
        cfg, base, res = base_run
        assert res.violations(cfg.game.half_width) == []
        assert res.stays  # somebody stopped

    def test_every_stopper_reenters_once(self, base_run):
        cfg, base, res = base_run
        ids = [s["agent_id"] for s in res.stays]
        assert len(ids) == len(set(ids))
        assert res.n_stop.sum() == res.n_exit.sum() + res.at_station_end

    def test_station_vehicle_balance(self, base_run):
        cfg, base, res = base_run
        lT = cfg.game.interval_h
        assert res.r2s_vehh.sum() * lT == pytest.approx(res.n_stop.sum(), abs=1e-6)
        assert res.s2r_vehh.sum() * lT == pytest.approx(res.n_exit.sum(), abs=1e-6)

    def test_index_self_consistent(self, base_run, tmp_path):
        cfg, base, res = base_run
        scenario.write_result(res, tmp_path)
        d = pd.read_csv(tmp_path / "delta.csv")
        direct = (d.delta0_h.sum() - d.delta_h.sum()) / d.delta0_h.sum() * 100
        assert res.pi == pytest.approx(direct, rel=1e-12)
        assert json.loads((tmp_path / "summary.json").read_text())["pi"] == res.pi

    def test_r2s_leads_and_s2r_lags(self, base_run):
        cfg, base, res = base_run
        y = res.delta0_total - res.delta0_total.mean()

        def best_lag(x):
            x = x - x.mean()
            lags = range(-40, 41)
            corr = [np.dot(x[max(0, -l): x.size - max(0, l)], y[max(0, l): y.size - max(0, -l)])
                    for l in lags]
            return list(lags)[int(np.argmax(corr))]

        lead_r2s, lead_s2r = best_lag(res.r2s_vehh), best_lag(res.s2r_vehh)
        assert lead_r2s >= 0 > lead_s2r

    def test_deterministic(self, base_run):
        cfg, base, res = base_run
        again = scenario.run_atdm(cfg, base)
        for f in ("delta_h", "price", "occupancy", "energy_kwh", "r2s_vehh", "s2r_vehh"):
            assert np.array_equal(getattr(res, f), getattr(again, f))

    def test_series_files(self, base_run, tmp_path):
        cfg, base, res = base_run
        trace = []
        scenario.run_atdm(cfg, base, trace=trace)
        paths = scenario.write_result(res, tmp_path, trace)
        names = sorted(p.name for p in paths)
        assert names == ["decisions.csv", "delta.csv", "energy.csv", "flows.csv",
                         "occupancy.csv", "price.csv", "summary.json"]
        price = pd.read_csv(tmp_path / "price.csv")
        assert list(price.columns[:2]) == ["interval_index", "time_h"]
        assert len(price) == cfg.n_intervals

    def test_baseline_writer(self, base_case, tmp_path):
        cfg, base = base_case
        paths = scenario.write_baseline(base, cfg.interval_times_h(), tmp_path)
        assert [p.name for p in paths] == ["delta.csv"]
        assert "delta_h" not in pd.read_csv(paths[0]).columns


class TestSweep:
    def test_empty_grid(self):
        with pytest.raises(DomainError):
            SweepSpec({})
        with pytest.raises(DomainError):
            SweepSpec({"spots": []})

    def test_unknown_axis(self):
        with pytest.raises(DomainError):
            SweepSpec({"colour": [1]})

    def test_cartesian_product(self):
        spec = SweepSpec({"incentive": [0.1, 0.2, 0.3], "pev_share": [0.05, 0.1]})
        assert len(spec.points()) == 6

    def test_failures_are_recorded(self, base_case):
        cfg, _ = base_case
        table = scenario.sweep(SweepSpec({"incentive": [0.25, 1.5]}, seeds=(0,)), cfg)
        assert list(table.columns) == ["incentive", "seed", "pi", "status", "error"]
        assert list(table.status) == ["ok", "failed"]
        assert "DomainError" in table.error.iloc[1]

    def test_parallel_matches_serial(self, base_case):
        cfg, _ = base_case
        spec = SweepSpec({"spots": [10, 100]}, seeds=(0, 1))
        serial = scenario.sweep(spec, cfg)
        parallel = scenario.sweep(spec, cfg, workers=2)
        pd.testing.assert_frame_equal(serial, parallel)
