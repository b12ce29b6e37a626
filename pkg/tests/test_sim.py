import numpy as np
import pytest

from lv_storage_opt.sim import (
    HOURS_PER_DAY,
    LifetimeEstimate,
    RunReport,
    SimulationConfig,
    clear_sky_bell,
    extrapolate_lifetime,
    generate_profiles,
    simulate_day,
    yearly_pv_scale,
)


def make_year_report(fade_fraction, throughput_kwh, caps=20.0, n=18):
    caps_arr = np.full(n, caps)
    return RunReport(
        kind="year", rt_mode="none", technology="licoo2",
        degradation_cost_active=True, seed=1, steps=8760,
        import_kwh=0.0, export_kwh=0.0, load_kwh=0.0, pv_kwh=0.0,
        network_loss_kwh=0.0, battery_loss_kwh=0.0, soe_delta_kwh=0.0,
        throughput_kwh=throughput_kwh, fade_kwh=fade_fraction * caps_arr,
        initial_capacity_kwh=caps_arr, violations=[], rt_hard_failures=0,
        scheduler_warnings=0, energy_imbalance_fraction=0.0,
    )


def test_profiles_deterministic_for_fixed_seed(tmp_path):
    a = generate_profiles(42, "sunny", 4, 4)
    b = generate_profiles(42, "sunny", 4, 4)
    assert np.array_equal(a.pv_kw, b.pv_kw)
    assert np.array_equal(a.load_p_kw, b.load_p_kw)
    pa, pb = tmp_path / "a.csv", tmp_path / "b.csv"
    a.write_csv(pa)
    b.write_csv(pb)
    assert pa.read_bytes() == pb.read_bytes()


def test_different_seed_changes_profiles():
    a = generate_profiles(1, "sunny", 4, 4)
    b = generate_profiles(2, "sunny", 4, 4)
    assert not np.array_equal(a.pv_kw, b.pv_kw)


def test_sunny_day_energy_is_five_to_six_full_hours():
    profiles = generate_profiles(7, "sunny", 3, 3)
    dt_h = (profiles.times_s[1] - profiles.times_s[0]) / 3600.0
    per_unit_kwh = profiles.pv_clear_sky_kw.sum(axis=1) * dt_h
    for e in per_unit_kwh:
        assert 5.0 * 20.0 < e < 6.0 * 20.0


def test_night_steps_are_dark_and_certain():
    profiles = generate_profiles(3, "sunny", 2, 2)
    hours = profiles.times_s / 3600.0
    night = (hours < 6.0) | (hours > 19.5)
    assert np.all(profiles.pv_kw[:, night] == 0.0)
    fc = profiles.forecast_for_hour(0, 24)
    dark = fc.pv_kw <= 0
    assert np.all(fc.pv_sigma_kw[dark] == 0.0)


def test_loads_always_positive():
    profiles = generate_profiles(5, "sunny", 3, 3)
    assert np.all(profiles.load_p_kw[1:] > 0.0)


def test_pv_noise_stays_within_robust_box():
    """Hourly-mean realizations stay inside the 3-sigma box the scheduler
    protects; intra-hour excursions are the real-time layer's business."""
    profiles = generate_profiles(11, "sunny", 6, 6, sigma_fraction=0.05)
    fc = profiles.forecast_for_hour(0, 24)
    steps_per_hour = 360
    for h in range(24):
        sl = slice(h * steps_per_hour, (h + 1) * steps_per_hour)
        realized_mean = profiles.pv_kw[:, sl].mean(axis=1)
        forecast = fc.pv_kw[:, h]
        sigma = fc.pv_sigma_kw[:, h]
        assert np.all(np.abs(realized_mean - forecast) <= 3.0 * sigma + 1e-9)


def test_cloudy_day_scales_down():
    sunny = generate_profiles(4, "sunny", 2, 2)
    cloudy = generate_profiles(4, "cloudy", 2, 2)
    assert cloudy.pv_kw.max() < 0.5 * sunny.pv_kw.max()


def test_yearly_scale_is_seasonal_and_seeded():
    rng1 = np.random.default_rng(9)
    rng2 = np.random.default_rng(9)
    a = [yearly_pv_scale(d, rng1) for d in range(366)]
    b = [yearly_pv_scale(d, rng2) for d in range(366)]
    assert a == b
    assert max(a) <= 1.0
    assert min(a) > 0.0


def test_clear_sky_form():
    assert clear_sky_bell(3.0, 20.0) == 0.0
    assert clear_sky_bell(12.75, 20.0) == pytest.approx(20.0, abs=1e-9)
    assert clear_sky_bell(20.0, 20.0) == 0.0


# ---------------------------------------------------------------------------
# lifetime extrapolation
# ---------------------------------------------------------------------------


def test_five_percent_annual_fade_gives_four_years():
    report = make_year_report(0.05, throughput_kwh=1000.0)
    life = extrapolate_lifetime(report)
    assert life.years == pytest.approx(4.0)


def test_pure_calendar_fade_zero_cycles():
    report = make_year_report(0.02, throughput_kwh=0.0)
    life = extrapolate_lifetime(report)
    assert life.full_cycles == 0.0
    assert np.isfinite(life.years)


def test_zero_fade_is_infinite_sentinel():
    report = make_year_report(0.0, throughput_kwh=100.0)
    life = extrapolate_lifetime(report)
    assert np.isinf(life.years)


def test_full_cycle_counting():
    # one full cycle per day: throughput 2 * capacity * 365 over the fleet
    caps = 20.0
    n = 18
    report = make_year_report(0.04, throughput_kwh=2 * caps * n * 365.0, caps=caps, n=n)
    life = extrapolate_lifetime(report)
    assert life.full_cycles == pytest.approx(365.0 * 5.0)  # 5 years to EOL


# ---------------------------------------------------------------------------
# short closed-loop run (desk scale)
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_short_day_run_books_energy_consistently(feeder_path, tmp_path):
    config = SimulationConfig(
        grid_path=str(feeder_path),
        seed=5,
        day_hours=2,
        out_dir=str(tmp_path / "run"),
    )
    report = simulate_day(config)
    assert report.energy_imbalance_fraction < 0.005
    assert not report.violations
    assert (tmp_path / "run" / "report.json").exists()
    assert (tmp_path / "run" / "manifest.json").exists()
    assert (tmp_path / "run" / "setpoints.csv").exists()
