"""Command line entry points.

Subcommands: ``validate-grid``, ``powerflow``, ``solve``, ``convexify-map``,
``simulate-day``, ``simulate-year``, ``report``.  All simulation commands
print their seed and write tidy CSV outputs plus a JSON report and
manifest into the chosen output directory.  The exit code is nonzero when
a run logs a hard constraint violation.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import battery as bat
from .grid import GridError, load_network
from .lp import load_problem, solve_lp, solve_sos2
from .powerflow import fbs_solve
from .sim import (
    SimulationConfig,
    extrapolate_lifetime,
    simulate_day,
    simulate_year,
)


def _cmd_validate_grid(args) -> int:
    try:
        net, devices = load_network(args.grid)
    except GridError as exc:
        print(f"INVALID: {exc}")
        return 2
    print(
        f"OK: {net.n_bus} buses, {net.n_branch} branches, "
        f"{devices.n_gen} generators ({len(devices.storage)} storage), {devices.n_pv} PV units"
    )
    return 0


def _cmd_powerflow(args) -> int:
    net, _ = load_network(args.grid)
    p = np.zeros(net.n_bus)
    q = np.zeros(net.n_bus)
    with open(args.injections) as fh:
        for row in csv.DictReader(fh):
            i = net.bus_index[row["bus"]]
            p[i] = -float(row.get("p_kw", 0.0)) / net.base.s_kva
            q[i] = -float(row.get("q_kvar", 0.0)) / net.base.s_kva
    sol = fbs_solve(net, p, q)
    out = args.out or "powerflow_solution.csv"
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bus", "v_pu", "angle_deg"])
        for i, bus in enumerate(net.buses):
            writer.writerow([bus.id, f"{sol.v_mag[i]:.6f}", f"{sol.v_angle_deg[i]:.6f}"])
        writer.writerow([])
        writer.writerow(["branch", "from", "to", "i_pu"])
        for j, br in enumerate(net.branches):
            writer.writerow([j, br.from_bus, br.to_bus, f"{abs(sol.i_branch[j]):.6f}"])
    print(
        f"converged in {sol.iterations} sweeps; losses {sol.losses_pu * net.base.s_kva:.3f} kW; "
        f"written to {out}"
    )
    return 0


def _cmd_solve(args) -> int:
    problem = load_problem(Path(args.problem).read_text())
    sol = solve_sos2(problem) if problem.sos2_groups else solve_lp(problem)
    print(f"status: {sol.status}")
    if sol.x is not None:
        print(f"objective: {sol.objective:.9g}")
        if args.out:
            Path(args.out).write_text(
                json.dumps({"status": sol.status, "objective": sol.objective,
                            "x": sol.x.tolist()}, indent=1)
            )
            print(f"solution written to {args.out}")
    return 0 if sol.status in ("optimal", "node_limit") else 3


def _cmd_convexify_map(args) -> int:
    map_ = bat.load_map(args.map)
    planes = bat.convexify_map(map_)
    out = args.out or str(Path(args.map).with_suffix(".planes.json"))
    bat.save_planes(planes, out)
    print(f"{planes.shape[0]} envelope planes written to {out}")
    return 0


def _load_config(args) -> SimulationConfig:
    if args.config:
        config = SimulationConfig.from_json(args.config)
    else:
        default_grid = Path(__file__).parent / "data" / "feeder18.json"
        config = SimulationConfig(grid_path=str(default_grid))
    if args.out_dir:
        config.out_dir = args.out_dir
    return config


def _cmd_simulate_day(args) -> int:
    config = _load_config(args)
    if args.rt_mode:
        config.rt_mode = args.rt_mode
    print(f"simulate-day seed={config.seed} rt_mode={config.rt_mode} day={config.day_type}")
    report = simulate_day(config)
    print(
        f"pv {report.pv_kwh:.1f} kWh, load {report.load_kwh:.1f} kWh, "
        f"network losses {report.network_loss_kwh:.1f} kWh, "
        f"battery losses {report.battery_loss_kwh:.1f} kWh"
    )
    print(
        f"violations: {len(report.violations)}; energy imbalance "
        f"{100 * report.energy_imbalance_fraction:.3f}%"
    )
    return 1 if report.violations else 0


def _cmd_simulate_year(args) -> int:
    config = _load_config(args)
    if args.tech:
        config.technology = args.tech
    config.degradation_cost_active = args.deg_model != "off"
    print(
        f"simulate-year seed={config.seed} tech={config.technology} "
        f"deg_model={'on' if config.degradation_cost_active else 'off'}"
    )
    report = simulate_year(config)
    life = extrapolate_lifetime(report)
    years = "inf" if math.isinf(life.years) else f"{life.years:.2f}"
    print(
        f"fade {report.fade_kwh.mean():.3f} kWh mean per battery; "
        f"lifetime {years} years, {life.full_cycles:.0f} full cycles"
    )
    return 0


def _cmd_report(args) -> int:
    path = Path(args.run_dir) / "report.json"
    if not path.exists():
        print(f"no report.json under {args.run_dir}")
        return 2
    doc = json.loads(path.read_text())
    for key in (
        "kind", "rt_mode", "technology", "degradation_cost_active", "steps",
        "pv_kwh", "load_kwh", "import_kwh", "export_kwh",
        "network_loss_kwh", "battery_loss_kwh", "energy_imbalance_fraction",
    ):
        if key in doc:
            print(f"{key}: {doc[key]}")
    print(f"violations: {len(doc.get('violations', []))}")
    if "lifetime_years" in doc:
        print(f"lifetime_years: {doc['lifetime_years']}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="lv-storage-opt",
        description="Optimal operation of distributed battery storage in LV feeders",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate-grid", help="parse and validate a grid file")
    p.add_argument("grid")
    p.set_defaults(func=_cmd_validate_grid)

    p = sub.add_parser("powerflow", help="run the nonlinear sweep at fixed injections")
    p.add_argument("grid")
    p.add_argument("injections", help="CSV with columns bus,p_kw,q_kvar (injections)")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_powerflow)

    p = sub.add_parser("solve", help="solve an LPPROBLEM v1 file")
    p.add_argument("problem")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_solve)

    p = sub.add_parser("convexify-map", help="extract envelope planes from a map file")
    p.add_argument("map")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_convexify_map)

    p = sub.add_parser("simulate-day", help="closed-loop two-stage day simulation")
    p.add_argument("--config")
    p.add_argument("--rt-mode", choices=["milp", "lp"])
    p.add_argument("--out-dir")
    p.set_defaults(func=_cmd_simulate_day)

    p = sub.add_parser("simulate-year", help="scheduler-only lifetime simulation")
    p.add_argument("--config")
    p.add_argument("--tech", choices=["licoo2", "lifepo4"])
    p.add_argument("--deg-model", choices=["on", "off"], default="on")
    p.add_argument("--out-dir")
    p.set_defaults(func=_cmd_simulate_year)

    p = sub.add_parser("report", help="summarize a finished run directory")
    p.add_argument("run_dir")
    p.set_defaults(func=_cmd_report)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
