"""One robust scheduling round on the bundled feeder.

Builds sunny-day forecasts, solves the 24 h robust dispatch problem, and
prints the planned fleet trajectory plus the handoff the real-time
controller would receive. Increasing the forecast uncertainty visibly
costs objective value (the robust price of insurance).
"""

from pathlib import Path

import numpy as np

from lv_storage_opt.battery import DegradationModel, generate_degradation_map, table_defaults
from lv_storage_opt.grid import load_network
from lv_storage_opt.powerflow import linearize
from lv_storage_opt.scheduler import ForecastSet, HorizonScheduler
from lv_storage_opt.sim import generate_profiles

GRID = Path(__file__).resolve().parents[1] / "src" / "lv_storage_opt" / "data" / "feeder18.json"


def main() -> None:
    net, devices = load_network(GRID)
    lin = linearize(net)
    batteries = [table_defaults() for _ in devices.storage]
    model = DegradationModel(map=generate_degradation_map("licoo2"))
    scheduler = HorizonScheduler(lin, devices, batteries, model)
    print(f"horizon problem: {scheduler.n_eq_rows + scheduler.n_ineq_rows} rows x "
          f"{scheduler.n_var} variables")

    profiles = generate_profiles(21, "sunny", devices.n_pv, len(batteries))
    forecasts = profiles.forecast_for_hour(0, 24)
    e0 = np.full(len(batteries), 10.0)

    handoff = scheduler.schedule(e0, forecasts)
    fleet = handoff.planned_energy_kwh.sum(axis=0)
    print("\nplanned fleet energy (kWh) by hour:")
    print("  " + " ".join(f"{v:5.0f}" for v in fleet))
    print(f"handoff: corridor floor/ceiling of battery 0 = "
          f"[{handoff.energy_floor_kwh[0]:.2f}, {handoff.energy_ceiling_kwh[0]:.2f}] kWh, "
          f"aggregate setpoint {handoff.aggregate_setpoint_kw:+.1f} kW")
    print(f"objective {handoff.objective:.2f} eur "
          f"(energy plus priced aging over the horizon)")

    # the price of robustness
    from lv_storage_opt.scheduler import SchedulerError

    for scale, label in ((0.0, "no uncertainty"), (2.0, "double sigma")):
        fc = ForecastSet(
            pv_kw=forecasts.pv_kw,
            load_p_kw=forecasts.load_p_kw,
            load_q_kvar=forecasts.load_q_kvar,
            pv_sigma_kw=scale * forecasts.pv_sigma_kw,
        )
        try:
            alt = scheduler.schedule(e0, fc)
            print(f"{label:>16}: objective {alt.objective:.2f} eur")
        except SchedulerError as exc:
            print(f"{label:>16}: {str(exc).split('.')[0]} -- guaranteeing twice the "
                  "forecast error exceeds what feeder and fleet can insure")


if __name__ == "__main__":
    main()
