"""Closed-loop co-simulation of the feeder, batteries, and controllers.

Two experiment shapes:

``simulate_day``: full two-stage operation of one day at 10-second
resolution.  The plant truth is the two-well battery model driven by the
nonlinear loss curve; the hourly scheduler hands allocation bands and an
aggregate setpoint to the real-time dispatcher; every dispatch is checked
against the nonlinear AC power flow and violations of the statutory
limits are logged.

``simulate_year``: hourly scheduler-only operation over 8760 steps with
the integrator battery model as plant, used for lifetime studies.
Capacity fade is integrated on the original (nonconvex) degradation map
at each step's operating point and fed back into the scheduler daily.

All randomness flows from one seeded generator; rerunning a configuration
reproduces results bit for bit.  Outputs are tidy CSV files plus a
manifest; no plotting library is required anywhere.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .battery import (
    BatteryParams,
    BatteryState,
    DegradationModel,
    design_observer_gain,
    generate_degradation_map,
    step_basic,
    step_plant,
)
from .grid import load_network
from .powerflow import fbs_solve, linearize
from .rt import RtMeasurements, rt_step, rt_step_lp, update_observers
from .scheduler import ForecastSet, HorizonScheduler, SchedulerError

HOURS_PER_DAY = 24
SECONDS_PER_HOUR = 3600.0
EOL_FRACTION = 0.8
PV_RISE_H = 7.0
PV_SET_H = 18.5


class SimulationError(Exception):
    pass


@dataclass
class SimulationConfig:
    """Everything a run needs; loadable from a JSON file of the same keys."""

    grid_path: str
    seed: int = 1
    day_type: str = "sunny"  # sunny | cloudy
    rt_mode: str = "milp"  # milp | lp
    technology: str = "licoo2"
    degradation_cost_active: bool = True
    energy_cost_eur_mwh: float = 100.0
    degradation_cost_eur_kwh: float = 400.0
    penalty: float = 1000.0
    support_points: int = 10
    v_margin_pu: float = 0.005
    i_margin_fraction: float = 0.02
    pv_sigma_fraction: float = 0.05
    pv_peak_kw: float = 20.0
    household_mean_kw: float = 4.0
    rt_step_s: float = 10.0
    horizon: int = 24
    initial_soe_fraction: float = 0.5
    blind_soe_floor_fraction: float = 0.05
    day_hours: int = 24  # shorten for desk-scale smoke runs
    year_hours: int = 8760
    year_start_day: int = 0
    out_dir: str | None = None

    @classmethod
    def from_json(cls, path: str | Path) -> "SimulationConfig":
        doc = json.loads(Path(path).read_text())
        return cls(**doc)


@dataclass
class Profiles:
    """Day-resolution driving data (10-second PV and household series)."""

    times_s: np.ndarray  # (n_steps,)
    pv_kw: np.ndarray  # (n_pv, n_steps) realized infeed
    load_p_kw: np.ndarray  # (n_bus, n_steps)
    load_q_kvar: np.ndarray  # (n_bus, n_steps)
    pv_clear_sky_kw: np.ndarray  # (n_pv, n_steps) forecast envelope
    sigma_fraction: float
    seed: int
    day_type: str

    def forecast_for_hour(self, start_hour: int, horizon: int) -> ForecastSet:
        """Hourly-mean forecasts from the clear-sky envelope, wrapping at
        midnight (the day repeats for horizon lookahead)."""
        steps_per_hour = int(round(SECONDS_PER_HOUR / (self.times_s[1] - self.times_s[0])))
        n_pv = self.pv_kw.shape[0]
        n_bus = self.load_p_kw.shape[0]
        pv = np.zeros((n_pv, horizon))
        lp = np.zeros((n_bus, horizon))
        lq = np.zeros((n_bus, horizon))
        n_hours = self.pv_kw.shape[1] // steps_per_hour
        for k in range(horizon):
            h = (start_hour + k) % n_hours
            sl = slice(h * steps_per_hour, (h + 1) * steps_per_hour)
            pv[:, k] = self.pv_clear_sky_kw[:, sl].mean(axis=1)
            lp[:, k] = self.load_p_kw[:, sl].mean(axis=1)
            lq[:, k] = self.load_q_kvar[:, sl].mean(axis=1)
        sigma = self.sigma_fraction * pv
        return ForecastSet(pv_kw=pv, load_p_kw=lp, load_q_kvar=lq, pv_sigma_kw=sigma)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["time_s", "kind", "unit", "value_kw"])
            for kind, series in (("pv", self.pv_kw), ("load_p", self.load_p_kw)):
                for unit in range(series.shape[0]):
                    for t, v in zip(self.times_s, series[unit]):
                        writer.writerow([f"{t:.0f}", kind, unit, f"{v:.6f}"])


def clear_sky_bell(hour: float, peak_kw: float) -> float:
    """Documented clear-sky form: sine-squared between sunrise and sunset.

    Integrates to (set - rise)/2 equivalent full hours, 5.75 with the
    default 7.0 to 18.5 window.
    """
    if hour < PV_RISE_H or hour > PV_SET_H:
        return 0.0
    span = PV_SET_H - PV_RISE_H
    return peak_kw * math.sin(math.pi * (hour - PV_RISE_H) / span) ** 2


def household_shape(hour: float) -> float:
    """Normalized daily load shape with morning and evening peaks."""
    morning = math.exp(-0.5 * ((hour - 7.5) / 1.5) ** 2)
    evening = math.exp(-0.5 * ((hour - 19.0) / 2.5) ** 2)
    return 0.65 + 0.55 * morning + 0.90 * evening


def generate_profiles(
    seed: int,
    day_type: str,
    n_pv: int,
    n_households: int,
    pv_peak_kw: float = 20.0,
    household_mean_kw: float = 4.0,
    sigma_fraction: float = 0.05,
    step_s: float = 10.0,
    slack_first: bool = True,
) -> Profiles:
    """Deterministic one-day profile set at ``step_s`` resolution.

    PV noise is clipped to 2.5 sigma so realized infeed stays inside the
    3-sigma box the scheduler protects against.  Load buses are laid out
    slack-first to align with network bus indexing.
    """
    if n_pv <= 0 or n_households <= 0:
        raise ValueError("unit counts must be positive")
    if day_type not in ("sunny", "cloudy"):
        raise ValueError(f"unknown day type '{day_type}'")
    rng = np.random.default_rng(seed)
    n_steps = int(round(HOURS_PER_DAY * SECONDS_PER_HOUR / step_s))
    times = np.arange(n_steps) * step_s
    hours = times / SECONDS_PER_HOUR

    weather = 1.0 if day_type == "sunny" else 0.4
    clear = np.array([clear_sky_bell(h, pv_peak_kw) for h in hours]) * weather
    clear_sky = np.tile(clear, (n_pv, 1))

    # slowly varying bounded deviation per unit (hourly refresh, smooth hold)
    pv = np.empty_like(clear_sky)
    for u in range(n_pv):
        hourly = np.clip(rng.normal(0.0, 1.0, HOURS_PER_DAY + 1), -2.5, 2.5)
        wiggle = np.clip(rng.normal(0.0, 0.3, n_steps), -1.0, 1.0)
        envelope = np.interp(hours, np.arange(HOURS_PER_DAY + 1), hourly)
        factor = 1.0 + sigma_fraction * np.clip(envelope + wiggle, -2.5, 2.5)
        pv[u] = clear_sky[u] * factor

    n_bus = n_households + 1 if slack_first else n_households
    load_p = np.zeros((n_bus, n_steps))
    shape = np.array([household_shape(h) for h in hours])
    shape_mean = shape.mean()
    for u in range(n_households):
        scale = rng.uniform(0.85, 1.15)
        noise = 1.0 + 0.10 * np.clip(rng.normal(0.0, 1.0, n_steps), -2.5, 2.5)
        series = household_mean_kw * scale * shape / shape_mean * noise
        load_p[u + 1 if slack_first else u] = np.maximum(series, 0.2)
    load_q = load_p * math.tan(math.acos(0.95))
    return Profiles(
        times_s=times,
        pv_kw=pv,
        load_p_kw=load_p,
        load_q_kvar=load_q,
        pv_clear_sky_kw=clear_sky,
        sigma_fraction=sigma_fraction,
        seed=seed,
        day_type=day_type,
    )


def yearly_pv_scale(day_of_year: int, rng: np.random.Generator) -> float:
    """Seasonal envelope times a seeded weather draw for one day."""
    season = 0.62 + 0.38 * math.cos(2.0 * math.pi * (day_of_year - 172) / 365.0)
    draw = rng.random()
    if draw < 0.45:
        weather = 1.0
    elif draw < 0.8:
        weather = 0.65
    else:
        weather = 0.3
    return season * weather


@dataclass
class RunReport:
    """Aggregated outcome of one simulation run."""

    kind: str  # "day" | "year"
    rt_mode: str
    technology: str
    degradation_cost_active: bool
    seed: int
    steps: int
    import_kwh: float
    export_kwh: float
    load_kwh: float
    pv_kwh: float
    network_loss_kwh: float
    battery_loss_kwh: float
    soe_delta_kwh: float
    throughput_kwh: float  # cell-side absolute energy through all batteries
    fade_kwh: np.ndarray  # per battery
    initial_capacity_kwh: np.ndarray
    violations: list[str]
    rt_hard_failures: int
    scheduler_warnings: int
    energy_imbalance_fraction: float
    max_rt_wall_s: float = 0.0
    mean_rt_wall_s: float = 0.0
    band_penalty_total: float = 0.0
    observer_divergence_kwh: float = 0.0
    wall_time_s: float = 0.0

    @property
    def remaining_capacity_kwh(self) -> np.ndarray:
        return self.initial_capacity_kwh - self.fade_kwh

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["fade_kwh"] = self.fade_kwh.tolist()
        doc["initial_capacity_kwh"] = self.initial_capacity_kwh.tolist()
        doc["violations"] = self.violations[:200]
        return doc


@dataclass
class LifetimeEstimate:
    full_cycles: float
    years: float


def extrapolate_lifetime(report: RunReport) -> LifetimeEstimate:
    """Linear extrapolation of one simulated year to the 80% EOL criterion."""
    if report.kind != "year":
        raise SimulationError("lifetime extrapolation needs a year run")
    caps = report.initial_capacity_kwh
    fade_fraction = float(np.mean(report.fade_kwh / caps))
    if fade_fraction <= 0.0:
        return LifetimeEstimate(full_cycles=0.0, years=math.inf)
    years = (1.0 - EOL_FRACTION) / fade_fraction
    cycles_per_year = report.throughput_kwh / (2.0 * float(np.sum(caps)))
    return LifetimeEstimate(full_cycles=cycles_per_year * years, years=years)


def _check_balance(report: RunReport) -> float:
    """Closed-loop energy balance: import - export + pv = load + losses + dSoE."""
    lhs = report.import_kwh - report.export_kwh + report.pv_kwh
    rhs = (
        report.load_kwh
        + report.network_loss_kwh
        + report.battery_loss_kwh
        + report.soe_delta_kwh
    )
    scale = max(report.pv_kwh + report.load_kwh + report.import_kwh, 1e-9)
    return abs(lhs - rhs) / scale


class _TidyWriter:
    def __init__(self, out_dir: Path | None):
        self.out_dir = out_dir
        self.files: dict[str, list[list]] = {}

    def add(self, name: str, row: list) -> None:
        if self.out_dir is not None:
            self.files.setdefault(name, []).append(row)

    def flush(self, headers: dict[str, list[str]]) -> list[str]:
        written = []
        if self.out_dir is None:
            return written
        self.out_dir.mkdir(parents=True, exist_ok=True)
        for name, rows in self.files.items():
            path = self.out_dir / f"{name}.csv"
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(headers.get(name, []))
                writer.writerows(rows)
            written.append(path.name)
        return written


def simulate_day(config: SimulationConfig) -> RunReport:
    """Full two-stage closed loop over one day at RT resolution."""
    import time as _time

    t_start = _time.perf_counter()
    net, devices = load_network(config.grid_path)
    lin = linearize(net)
    n_s = len(devices.storage)
    batteries = [
        BatteryParams(
            p_grid_max_kw=g.p_max_kw, q_grid_max_kvar=g.s_max_kva, s_max_kva=g.s_max_kva
        )
        for g in devices.storage
    ]
    caps0 = np.array([b.capacity_kwh for b in batteries])
    deg_model = DegradationModel(map=generate_degradation_map(config.technology))

    profiles = generate_profiles(
        config.seed,
        config.day_type,
        devices.n_pv,
        n_s,
        pv_peak_kw=config.pv_peak_kw,
        household_mean_kw=config.household_mean_kw,
        sigma_fraction=config.pv_sigma_fraction,
        step_s=config.rt_step_s,
    )
    scheduler = HorizonScheduler(
        lin,
        devices,
        batteries,
        deg_model if config.degradation_cost_active else None,
        horizon=config.horizon,
        energy_cost_eur_mwh=config.energy_cost_eur_mwh,
        degradation_cost_eur_kwh=config.degradation_cost_eur_kwh,
        v_margin=config.v_margin_pu,
        i_margin=config.i_margin_fraction,
        soe_floor_fraction=0.0 if config.degradation_cost_active else config.blind_soe_floor_fraction,
    )

    plant = [BatteryState.balanced(b, config.initial_soe_fraction * b.capacity_kwh) for b in batteries]
    gains = [design_observer_gain(b) for b in batteries]
    estimates = [BatteryState.balanced(b, s.total_kwh) for b, s in zip(batteries, plant)]
    soe0 = float(sum(s.total_kwh for s in plant))

    steps_per_hour = int(round(SECONDS_PER_HOUR / config.rt_step_s))
    n_steps = config.day_hours * steps_per_hour
    dt_h = config.rt_step_s / SECONDS_PER_HOUR

    writer = _TidyWriter(Path(config.out_dir) if config.out_dir else None)
    tall = dict(imp=0.0, exp=0.0, load=0.0, pv=0.0, net_loss=0.0, bat_loss=0.0, thru=0.0)
    violations: list[str] = []
    scheduler_warnings = 0
    rt_walls: list[float] = []
    band_penalty_total = 0.0
    observer_div = 0.0
    fade = np.zeros(n_s)
    handoff = None

    for step in range(n_steps):
        hour = step // steps_per_hour
        if step % steps_per_hour == 0:
            forecasts = profiles.forecast_for_hour(hour, config.horizon)
            caps_eff = caps0 - fade
            e_obs = np.array(
                [max(0.0, min(e.total_kwh, c)) for e, c in zip(estimates, caps_eff)]
            )
            try:
                handoff = scheduler.schedule(e_obs, forecasts, caps_eff)
            except SchedulerError as exc:
                scheduler_warnings += 1
                if handoff is None:
                    raise SimulationError(f"first scheduler call failed: {exc}") from exc
            writer.add(
                "handoff",
                [hour, f"{handoff.aggregate_setpoint_kw:.3f}"]
                + [f"{v:.4f}" for v in handoff.energy_floor_kwh]
                + [f"{v:.4f}" for v in handoff.energy_ceiling_kwh],
            )

        meas = RtMeasurements(
            pv_p_kw=profiles.pv_kw[:, step].copy(),
            pv_q_kvar=np.zeros(devices.n_pv),
            load_p_kw=profiles.load_p_kw[:, step].copy(),
            load_q_kvar=profiles.load_q_kvar[:, step].copy(),
            soe_kwh=np.array([s.total_kwh for s in plant]),
            timestamp_s=float(profiles.times_s[step]),
        )
        if config.rt_mode == "milp":
            sp = rt_step(
                lin, devices, batteries, handoff, meas, estimates,
                support_count=config.support_points, penalty=config.penalty,
                v_margin=config.v_margin_pu, i_margin=config.i_margin_fraction,
                dt_s=config.rt_step_s,
            )
        else:
            sp = rt_step_lp(
                lin, devices, batteries, handoff, meas, estimates,
                penalty=config.penalty, v_margin=config.v_margin_pu,
                i_margin=config.i_margin_fraction, dt_s=config.rt_step_s,
            )
        rt_walls.append(sp.wall_time_s)
        band_penalty_total += sp.band_penalty * dt_h

        realized_p = np.empty(n_s)
        realized_loss = np.empty(n_s)
        cell_kw = np.empty(n_s)
        for g, params in enumerate(batteries):
            plant[g], realized_p[g], realized_loss[g] = step_plant(
                params, plant[g], float(sp.p_kw[g]), config.rt_step_s
            )
            cell_kw[g] = realized_p[g] + realized_loss[g]
            rate = deg_model.absolute_map_rate_kw(
                cell_kw[g], plant[g].total_kwh, params.capacity_kwh
            )
            fade[g] += rate * dt_h

        # AC truth at the applied setpoints
        c_pv = devices.pv_incidence()
        storage_bus = [net.bus_index[g.bus] for g in devices.storage]
        loads_p = (profiles.load_p_kw[:, step] - c_pv @ profiles.pv_kw[:, step]).copy()
        loads_q = profiles.load_q_kvar[:, step].copy()
        for g, bus in enumerate(storage_bus):
            loads_p[bus] -= realized_p[g]
            loads_q[bus] -= sp.q_kvar[g]
        fbs = fbs_solve(net, loads_p / net.base.s_kva, loads_q / net.base.s_kva, tol=1e-10)
        head_kw = float(
            sum(
                (fbs.v_complex[0] * np.conj(fbs.i_branch[j])).real
                for j in range(net.n_branch)
                if net.branch_from[j] == 0
            )
            * net.base.s_kva
        )
        for i in np.flatnonzero(fbs.v_mag > net.v_max + 1e-9):
            violations.append(f"step {step}: bus {net.buses[int(i)].id} over-voltage {fbs.v_mag[i]:.4f}")
        for i in np.flatnonzero(fbs.v_mag < net.v_min - 1e-9):
            violations.append(f"step {step}: bus {net.buses[int(i)].id} under-voltage {fbs.v_mag[i]:.4f}")
        for j in np.flatnonzero(np.abs(fbs.i_branch) > net.i_max_pu + 1e-9):
            br = net.branches[int(j)]
            violations.append(
                f"step {step}: branch {br.from_bus}-{br.to_bus} over-current "
                f"{abs(fbs.i_branch[j]):.4f}"
            )

        estimates = update_observers(
            batteries, gains, estimates, cell_kw, meas.soe_kwh, config.rt_step_s
        )
        observer_div = max(
            observer_div,
            max(abs(e.total_kwh - s.total_kwh) for e, s in zip(estimates, plant)),
        )

        tall["imp"] += max(head_kw, 0.0) * dt_h
        tall["exp"] += max(-head_kw, 0.0) * dt_h
        tall["load"] += float(profiles.load_p_kw[:, step].sum()) * dt_h
        tall["pv"] += float(profiles.pv_kw[:, step].sum()) * dt_h
        tall["net_loss"] += fbs.losses_pu * net.base.s_kva * dt_h
        tall["bat_loss"] += float(realized_loss.sum()) * dt_h
        tall["thru"] += float(np.abs(cell_kw).sum()) * dt_h

        writer.add(
            "losses",
            [step, f"{fbs.losses_pu * net.base.s_kva:.4f}", f"{realized_loss.sum():.4f}"],
        )
        for g in range(n_s):
            writer.add(
                "setpoints",
                [
                    step,
                    g,
                    f"{sp.p_kw[g]:.4f}",
                    f"{sp.q_kvar[g]:.4f}",
                    f"{realized_p[g]:.4f}",
                    f"{realized_loss[g]:.4f}",
                    f"{plant[g].total_kwh:.4f}",
                ],
            )
        for i in range(net.n_bus):
            writer.add("voltages", [step, net.buses[i].id, f"{fbs.v_mag[i]:.5f}"])
        for j in range(net.n_branch):
            writer.add(
                "branch_flows",
                [step, j, f"{abs(fbs.i_branch[j]):.5f}", f"{net.i_max_pu[j]:.3f}"],
            )

    soe1 = float(sum(s.total_kwh for s in plant))
    report = RunReport(
        kind="day",
        rt_mode=config.rt_mode,
        technology=config.technology,
        degradation_cost_active=config.degradation_cost_active,
        seed=config.seed,
        steps=n_steps,
        import_kwh=tall["imp"],
        export_kwh=tall["exp"],
        load_kwh=tall["load"],
        pv_kwh=tall["pv"],
        network_loss_kwh=tall["net_loss"],
        battery_loss_kwh=tall["bat_loss"],
        soe_delta_kwh=soe1 - soe0,
        throughput_kwh=tall["thru"],
        fade_kwh=fade,
        initial_capacity_kwh=caps0,
        violations=violations,
        rt_hard_failures=0,
        scheduler_warnings=scheduler_warnings,
        energy_imbalance_fraction=0.0,
        max_rt_wall_s=max(rt_walls) if rt_walls else 0.0,
        mean_rt_wall_s=float(np.mean(rt_walls)) if rt_walls else 0.0,
        band_penalty_total=band_penalty_total,
        observer_divergence_kwh=observer_div,
        wall_time_s=_time.perf_counter() - t_start,
    )
    report.energy_imbalance_fraction = _check_balance(report)
    written = writer.flush(
        {
            "handoff": ["hour", "aggregate_kw"]
            + [f"floor_{g}" for g in range(n_s)]
            + [f"ceiling_{g}" for g in range(n_s)],
            "losses": ["step", "network_loss_kw", "battery_loss_kw"],
            "setpoints": [
                "step", "battery", "p_set_kw", "q_set_kvar", "p_realized_kw",
                "loss_kw", "soe_kwh",
            ],
            "voltages": ["step", "bus", "v_pu"],
            "branch_flows": ["step", "branch", "i_pu", "i_max_pu"],
        }
    )
    if config.out_dir:
        out = Path(config.out_dir)
        (out / "report.json").write_text(json.dumps(report.to_dict(), indent=1))
        (out / "manifest.json").write_text(
            json.dumps({"kind": "day", "files": sorted(written + ["report.json"])}, indent=1)
        )
    return report


def simulate_year(config: SimulationConfig) -> RunReport:
    """Scheduler-only lifetime experiment over 8760 hourly steps."""
    import time as _time

    t_start = _time.perf_counter()
    net, devices = load_network(config.grid_path)
    lin = linearize(net)
    n_s = len(devices.storage)
    batteries = [
        BatteryParams(
            p_grid_max_kw=g.p_max_kw, q_grid_max_kvar=g.s_max_kva, s_max_kva=g.s_max_kva
        )
        for g in devices.storage
    ]
    caps0 = np.array([b.capacity_kwh for b in batteries])
    deg_model = DegradationModel(map=generate_degradation_map(config.technology))
    scheduler = HorizonScheduler(
        lin,
        devices,
        batteries,
        deg_model if config.degradation_cost_active else None,
        horizon=config.horizon,
        energy_cost_eur_mwh=config.energy_cost_eur_mwh,
        degradation_cost_eur_kwh=config.degradation_cost_eur_kwh,
        v_margin=config.v_margin_pu,
        i_margin=config.i_margin_fraction,
        soe_floor_fraction=0.0 if config.degradation_cost_active else config.blind_soe_floor_fraction,
    )

    rng = np.random.default_rng(config.seed)
    base_profiles = generate_profiles(
        config.seed,
        "sunny",
        devices.n_pv,
        n_s,
        pv_peak_kw=config.pv_peak_kw,
        household_mean_kw=config.household_mean_kw,
        sigma_fraction=config.pv_sigma_fraction,
        step_s=900.0,  # 15-minute base resolution is enough for hourly means
    )
    day_forecast = base_profiles.forecast_for_hour(0, HOURS_PER_DAY)
    pv_scales = np.array([yearly_pv_scale(d, rng) for d in range(366)])

    def forecast_for(hour_of_year: int) -> ForecastSet:
        pv = np.empty((devices.n_pv, config.horizon))
        lp = np.empty((net.n_bus, config.horizon))
        lq = np.empty((net.n_bus, config.horizon))
        for k in range(config.horizon):
            h = hour_of_year + k
            day = (config.year_start_day + h // 24) % 366
            hod = h % 24
            pv[:, k] = day_forecast.pv_kw[:, hod] * pv_scales[day]
            lp[:, k] = day_forecast.load_p_kw[:, hod]
            lq[:, k] = day_forecast.load_q_kvar[:, hod]
        return ForecastSet(
            pv_kw=pv, load_p_kw=lp, load_q_kvar=lq,
            pv_sigma_kw=config.pv_sigma_fraction * pv,
        )

    e = config.initial_soe_fraction * caps0
    fade = np.zeros(n_s)
    caps_eff = caps0.copy()
    tall = dict(imp=0.0, exp=0.0, load=0.0, pv=0.0, net_loss=0.0, bat_loss=0.0, thru=0.0)
    scheduler_warnings = 0
    writer = _TidyWriter(Path(config.out_dir) if config.out_dir else None)
    handoff = None

    n_hours = config.year_hours
    for hour in range(n_hours):
        forecasts = forecast_for(hour)
        try:
            handoff = scheduler.schedule(e, forecasts, caps_eff)
        except SchedulerError:
            scheduler_warnings += 1
            if handoff is None:
                raise
        dis = handoff.planned_discharge_kw[:, 0]
        ch = handoff.planned_charge_kw[:, 0]
        cell = dis / np.array([b.eta_discharge for b in batteries]) + ch * np.array(
            [b.eta_charge for b in batteries]
        )
        e_next = np.array(
            [
                step_basic(e[g], dis[g], ch[g], 1.0, batteries[g].eta_discharge, batteries[g].eta_charge)
                for g in range(n_s)
            ]
        )
        e_next = np.clip(e_next, 0.0, caps_eff)
        for g in range(n_s):
            rate = deg_model.absolute_map_rate_kw(cell[g], e_next[g], caps_eff[g])
            fade[g] += rate * 1.0
        loss = (1.0 / np.array([b.eta_discharge for b in batteries]) - 1.0) * dis - (
            1.0 - np.array([b.eta_charge for b in batteries])
        ) * ch

        tall["load"] += float(forecasts.load_p_kw[:, 0].sum())
        tall["pv"] += float(forecasts.pv_kw[:, 0].sum())
        tall["bat_loss"] += float(loss.sum())
        tall["net_loss"] += handoff.network_loss_first_kw
        head = handoff.head_power_first_kw
        tall["imp"] += max(head, 0.0)
        tall["exp"] += max(-head, 0.0)
        tall["thru"] += float(np.abs(cell).sum())
        e = e_next

        if hour % 24 == 23:
            caps_eff = np.maximum(caps0 - fade, 0.0)
            e = np.minimum(e, caps_eff)
            writer.add(
                "capacity",
                [hour // 24] + [f"{c:.5f}" for c in caps_eff],
            )
        if hour % 24 == 12:
            writer.add("soe_noon", [hour // 24] + [f"{v:.3f}" for v in e])

    soe1 = float(e.sum())
    report = RunReport(
        kind="year",
        rt_mode="none",
        technology=config.technology,
        degradation_cost_active=config.degradation_cost_active,
        seed=config.seed,
        steps=n_hours,
        import_kwh=tall["imp"],
        export_kwh=tall["exp"],
        load_kwh=tall["load"],
        pv_kwh=tall["pv"],
        network_loss_kwh=tall["net_loss"],
        battery_loss_kwh=tall["bat_loss"],
        soe_delta_kwh=soe1 - float(config.initial_soe_fraction * caps0.sum()),
        throughput_kwh=tall["thru"],
        fade_kwh=fade,
        initial_capacity_kwh=caps0,
        violations=[],
        rt_hard_failures=0,
        scheduler_warnings=scheduler_warnings,
        energy_imbalance_fraction=0.0,
        wall_time_s=_time.perf_counter() - t_start,
    )
    report.energy_imbalance_fraction = _check_balance(report)
    written = writer.flush(
        {
            "capacity": ["day"] + [f"cap_{g}" for g in range(n_s)],
            "soe_noon": ["day"] + [f"soe_{g}" for g in range(n_s)],
        }
    )
    if config.out_dir:
        out = Path(config.out_dir)
        life = extrapolate_lifetime(report)
        doc = report.to_dict()
        doc["lifetime_years"] = life.years if math.isfinite(life.years) else "inf"
        doc["lifetime_full_cycles"] = life.full_cycles
        (out / "report.json").write_text(json.dumps(doc, indent=1))
        (out / "manifest.json").write_text(
            json.dumps({"kind": "year", "files": sorted(written + ["report.json"])}, indent=1)
        )
    return report
