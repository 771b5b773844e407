import numpy as np
import pandas as pd
import pytest

from atdm import identification as ident
from atdm import synthdata
from atdm.errors import DataFormatError, DomainError, IdentificationError


class TestConversions:
    def test_flow_from_count(self):
        assert ident.flows_from_counts([20], 60.0)[0] == pytest.approx(1200.0)

    def test_zero_count(self):
        assert ident.flows_from_counts([0], 60.0)[0] == 0.0

    def test_constant_counts(self):
        np.testing.assert_allclose(ident.flows_from_counts(np.full(60, 10.0), 60.0), 600.0)

    def test_timestamps_must_increase(self):
        ts = ["2019-10-15T07:01:00Z", "2019-10-15T07:00:00Z"]
        with pytest.raises(DataFormatError):
            ident.flows_from_counts([1, 2], 60.0, ts)

    def test_density(self):
        rho, dropped = ident.density_from_speed([1200.0, 103150.0, 0.0], [100.0, 103.15, 0.0])
        np.testing.assert_allclose(rho, [12.0, 1000.0, 0.0])
        assert not dropped.any()

    def test_zero_speed_with_flow_dropped(self):
        rho, dropped = ident.density_from_speed([500.0], [0.0])
        assert dropped[0] and np.isnan(rho[0])


class TestInterpolate:
    def test_six_per_minute(self):
        counts = np.array([30.0, 42.0, 12.0])
        fine, speed = ident.interpolate_to_step(counts, np.array([90.0, 80.0, 100.0]), 60, 10)
        assert fine.size == 18
        np.testing.assert_allclose(fine.reshape(3, 6).sum(axis=1), counts, rtol=1e-14)

    def test_constant(self):
        fine, speed = ident.interpolate_to_step(np.full(4, 12.0), np.full(4, 95.0), 60, 10)
        np.testing.assert_allclose(fine, 2.0)
        np.testing.assert_allclose(speed, 95.0)

    def test_ramp(self):
        fine, _ = ident.interpolate_to_step(np.array([0.0, 60.0]), np.array([100.0, 100.0]), 60, 10)
        assert fine.sum() == pytest.approx(60.0)
        assert np.all(np.diff(fine[6:9]) > 0)

    def test_empty(self):
        with pytest.raises(DataFormatError):
            ident.interpolate_to_step(np.array([]), np.array([]), 60, 10)

    def test_bad_step(self):
        with pytest.raises(DomainError):
            ident.interpolate_to_step(np.ones(2), np.ones(2), 60, 7)


class TestRegime:
    def test_threshold(self):
        pts = ident.classify_regime([10, 10, 10], [1, 1, 1], [110.0, 30.0, 70.0], 70.0)
        assert list(pts.regime) == ["free", "congested", "free"]
        assert pts[1].regime == "congested"


class TestFits:
    def test_free_exact(self):
        rho = np.linspace(10, 800, 40)
        assert ident.fit_free_flow(rho, 100 * rho) == pytest.approx(100.0)

    def test_free_degenerate(self):
        with pytest.raises(IdentificationError):
            ident.fit_free_flow(np.full(5, 300.0), np.full(5, 30000.0))

    def test_free_noisy(self, rng):
        rho = rng.uniform(50, 1200, 400)
        phi = 103.15 * rho * (1 + 0.02 * rng.standard_normal(400))
        assert ident.fit_free_flow(rho, phi) == pytest.approx(103.15, rel=0.02)

    def test_congested_exact(self):
        rho = np.linspace(1500, 7000, 50)
        slope, icpt = ident.fit_congested(rho, 21.23 * (7200 - rho))
        assert slope == pytest.approx(-21.23, rel=1e-9)
        assert icpt == pytest.approx(152856.0, rel=1e-9)

    @pytest.mark.parametrize("q", [0.1, 0.5, 0.9])
    def test_any_quantile_recovers_line(self, q):
        rho = np.linspace(1500, 7000, 50)
        slope, icpt = ident.fit_congested(rho, 21.23 * (7200 - rho), q)
        assert slope == pytest.approx(-21.23, rel=1e-8)

    def test_congested_median_noisy(self, rng):
        rho = rng.uniform(1500, 7000, 500)
        phi = 21.23 * (7200 - rho) + rng.normal(0, 2000, 500)
        slope, _ = ident.fit_congested(rho, phi, 0.5)
        assert slope == pytest.approx(-21.23, rel=0.05)

    def test_median_minimises_pinball(self, rng):
        x = rng.uniform(0, 10, 60)
        y = 3 - 2 * x + rng.standard_t(2, 60)
        b, a = ident.quantile_line(x, y, 0.5)
        best = ident.pinball_loss(y - a - b * x, 0.5)
        for db, da in [(1e-3, 0), (-1e-3, 0), (0, 1e-3), (0, -1e-3)]:
            assert ident.pinball_loss(y - (a + da) - (b + db) * x, 0.5) >= best - 1e-9

    def test_congested_rising_rejected(self):
        rho = np.linspace(1500, 3000, 20)
        with pytest.raises(IdentificationError, match="not negative"):
            ident.fit_congested(rho, 10 * rho)

    def test_congested_single_cluster(self):
        with pytest.raises(IdentificationError):
            ident.fit_congested(np.full(8, 3000.0), np.linspace(1e4, 2e4, 8))

    def test_bad_quantile(self):
        with pytest.raises(DomainError):
            ident.fit_congested(np.arange(5.0), -np.arange(5.0), 1.5)


class TestDerive:
    def test_cell1_lines(self):
        cell, fit = ident.derive_cell_params(103.15, -21.23, 152856.0, 0.39)
        assert cell.max_density_vehkm == pytest.approx(7200.0)
        assert fit.critical_density == pytest.approx(1228.9, abs=0.1)
        exact = 103.15 * 21.23 * 7200 / (103.15 + 21.23)
        assert cell.max_capacity_vehh == pytest.approx(exact, rel=1e-12)
        assert cell.max_capacity_vehh == pytest.approx(126761, rel=1e-4)  # from rho* rounded

    def test_parallel(self):
        with pytest.raises(IdentificationError):
            ident.derive_cell_params(50.0, -50.0 + 1e-20, 0.0, 0.4)

    def test_bad_signs(self):
        with pytest.raises(IdentificationError):
            ident.derive_cell_params(100.0, 5.0, 1e5, 0.4)


def _cell_frame(frame, sid):
    return frame[frame.sensor_id == sid]


class TestStretch:
    def test_zero_noise_exact(self):
        truth = synthdata.default_truth(0.0)
        res = ident.identify_stretch(synthdata.generate_day(truth, 0))
        for got, want in zip(res.params.cells, truth.params.cells):
            for f in ("free_flow_speed_kmh", "wave_speed_kmh", "max_capacity_vehh",
                      "max_density_vehkm", "length_km"):
                assert getattr(got, f) == pytest.approx(getattr(want, f), rel=1e-9)

    def test_report(self, tmp_path):
        res = ident.identify_stretch(synthdata.generate_day(synthdata.default_truth(0.0), 0))
        res.write_report(tmp_path / "r.json")
        rep = res.report()
        assert len(rep["cells"]) == 7 and rep["max_cfl_ratio"] < 1
        assert all(c["n_congested"] > 0 and c["dropped"] == 0 for c in rep["cells"])

    def test_missing_column_named(self):
        frame = synthdata.generate_day(synthdata.default_truth(0.0), 0).drop(columns="avg_speed_kmh")
        with pytest.raises(DataFormatError, match="avg_speed_kmh"):
            ident.identify_stretch(frame)

    def test_free_only_cell_named(self):
        frame = synthdata.generate_day(synthdata.default_truth(0.0), 0)
        frame.loc[frame.sensor_id == 3, "avg_speed_kmh"] = 100.0
        with pytest.raises(IdentificationError) as err:
            ident.identify_stretch(frame)
        assert err.value.cell == 3 and "cell 3" in str(err.value)

    def test_cfl_violation(self):
        frame = synthdata.generate_day(synthdata.default_truth(0.0), 0)
        with pytest.raises(IdentificationError, match="ratio"):
            ident.identify_stretch(frame, lengths_km=[0.02] * 7)

    def test_too_few_sensors(self):
        frame = synthdata.generate_day(synthdata.default_truth(0.0), 0)
        with pytest.raises(IdentificationError):
            ident.identify_stretch(frame[frame.sensor_id <= 4])

    def test_duplicate_timestamps(self):
        frame = synthdata.generate_day(synthdata.default_truth(0.0), 0)
        frame = pd.concat([frame, frame.iloc[:1]])
        with pytest.raises(DataFormatError):
            ident.identify_stretch(frame)


class TestBoundary:
    def test_replay_reproduces_truth_day(self):
        truth = synthdata.default_truth(0.0)
        frame = synthdata.generate_day(truth, 0)
        res = ident.identify_stretch(frame)
        b = ident.boundary_from_sensors(frame, res.params)
        day = synthdata.simulate(truth)
        n = b.inflow_vehh.size
        assert b.start_h == pytest.approx(7.0)
        # the refined inflow keeps every minute's vehicle total
        np.testing.assert_allclose(b.inflow_vehh.reshape(-1, 6).mean(axis=1),
                                   day.interface_flow[:n, 0].reshape(-1, 6).mean(axis=1),
                                   rtol=1e-9)
        assert np.all(b.exit_supply_vehh <= res.params.cells[-1].max_capacity_vehh)
        assert np.any(b.exit_supply_vehh < res.params.cells[-1].max_capacity_vehh)
