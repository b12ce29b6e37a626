import numpy as np
import pytest

from lv_storage_opt.battery import (
    BatteryState,
    ObserverDesignError,
    cell_power_kw,
    design_observer_gain,
    observer_step,
    observer_time_constant_s,
    step_cell,
)


def test_default_gain_is_stable(battery_params):
    gain = design_observer_gain(battery_params)
    eig = gain.eigenvalues(battery_params)
    assert np.all(eig.real < 0.0)


def test_bad_speedup_rejected(battery_params):
    with pytest.raises(ObserverDesignError):
        design_observer_gain(battery_params, speedup=-1.0)


def test_exact_estimate_is_fixed_point(battery_params):
    gain = design_observer_gain(battery_params)
    truth = BatteryState.balanced(battery_params, 12.0)
    est = observer_step(battery_params, gain, truth, 0.0, truth.total_kwh, 10.0)
    assert est.available_kwh == pytest.approx(truth.available_kwh, abs=1e-12)
    assert est.bound_kwh == pytest.approx(truth.bound_kwh, abs=1e-12)


def test_error_decays_below_one_percent_in_five_time_constants(battery_params):
    gain = design_observer_gain(battery_params)
    tau = observer_time_constant_s(battery_params, gain)
    truth = BatteryState.balanced(battery_params, 12.0)
    est = BatteryState(available_kwh=6.0, bound_kwh=6.0)
    err0 = np.hypot(
        est.available_kwh - truth.available_kwh, est.bound_kwh - truth.bound_kwh
    )
    steps = int(np.ceil(5.0 * tau / 10.0))
    for _ in range(steps):
        est = observer_step(battery_params, gain, est, 0.0, truth.total_kwh, 10.0)
    err = np.hypot(
        est.available_kwh - truth.available_kwh, est.bound_kwh - truth.bound_kwh
    )
    assert err < 0.01 * err0


def test_tracks_moving_plant_with_constant_inputs(battery_params):
    gain = design_observer_gain(battery_params)
    truth = BatteryState(available_kwh=14.0, bound_kwh=2.0)  # skewed wells
    est = BatteryState.balanced(battery_params, truth.total_kwh)
    grid_kw = 3.0
    for _ in range(360):  # one hour of 10 s steps
        cell = cell_power_kw(battery_params, grid_kw)
        truth = step_cell(battery_params, truth, cell, 10.0, enforce_bounds=False)
        est = observer_step(battery_params, gain, est, cell, truth.total_kwh, 10.0)
    assert est.available_kwh == pytest.approx(truth.available_kwh, abs=0.01)
    assert est.bound_kwh == pytest.approx(truth.bound_kwh, abs=0.01)


def test_measured_energy_clamped_to_capacity(battery_params):
    gain = design_observer_gain(battery_params)
    est = BatteryState.balanced(battery_params, 19.0)
    out = observer_step(battery_params, gain, est, 0.0, 25.0, 10.0)  # 25 > capacity
    ref = observer_step(battery_params, gain, est, 0.0, battery_params.capacity_kwh, 10.0)
    assert out.available_kwh == pytest.approx(ref.available_kwh)
    assert out.bound_kwh == pytest.approx(ref.bound_kwh)
