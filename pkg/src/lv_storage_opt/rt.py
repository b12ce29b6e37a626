"""Real-time dispatcher: one 10-second OPF step per call.

Every step solves a single-period dispatch problem at the measured loads
and PV infeed, augmented with the two-well battery dynamics, soft
allocation-band penalties against the scheduler's handoff, and the
nonconvex battery loss curves encoded over SOS2-constrained supporting
points (making the problem a small MILP).  A companion LP variant books
battery losses with the fixed in/out efficiencies instead and serves as
the comparison baseline.

Sign conventions: battery grid power is positive discharging; the cell
side drain equals grid power plus the modeled loss, which is exact for
both loss encodings.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .battery import (
    BatteryParams,
    BatteryState,
    ObserverGain,
    discretize_wells,
    observer_step,
    system_losses,
)
from .grid import DeviceMap
from .lp import LpProblem, LpSolution, solve_lp, solve_sos2, sos2_violations
from .opf import (
    DEFAULT_I_MARGIN_FRACTION,
    DEFAULT_V_MARGIN_PU,
    OpfBlock,
    Q_TIEBREAK_COST,
    emit_grid_blocks,
    emit_polygon_blocks,
    reactive_cap_pu,
)
from .powerflow import LinearizedGrid
from .scheduler import ScheduleHandoff

DEFAULT_PENALTY = 1000.0
DEFAULT_SUPPORT_POINTS = 10
DEFAULT_NODE_LIMIT = 600
RT_STEP_S = 10.0


class RtError(Exception):
    pass


@dataclass
class RtMeasurements:
    """Snapshot of the feeder at one dispatch instant (physical units)."""

    pv_p_kw: np.ndarray  # (n_pv,)
    pv_q_kvar: np.ndarray  # (n_pv,)
    load_p_kw: np.ndarray  # (n_bus,)
    load_q_kvar: np.ndarray  # (n_bus,)
    soe_kwh: np.ndarray  # (n_s,) total energy reported per battery
    timestamp_s: float = 0.0

    def validate(self, n_bus: int, n_pv: int, n_s: int, capacities: np.ndarray) -> None:
        for name, arr, shape in (
            ("pv_p_kw", self.pv_p_kw, (n_pv,)),
            ("pv_q_kvar", self.pv_q_kvar, (n_pv,)),
            ("load_p_kw", self.load_p_kw, (n_bus,)),
            ("load_q_kvar", self.load_q_kvar, (n_bus,)),
            ("soe_kwh", self.soe_kwh, (n_s,)),
        ):
            if arr.shape != shape:
                raise RtError(f"{name} must have shape {shape}")
            if not np.all(np.isfinite(arr)):
                raise RtError(f"{name} contains non-finite entries")
        if np.any(self.soe_kwh < -1e-6) or np.any(self.soe_kwh > capacities + 1e-6):
            raise RtError("measured energy outside capacity")


@dataclass
class RtSetpoints:
    """Dispatcher output plus the objective breakdown for diagnostics."""

    p_kw: np.ndarray  # (n_s,) battery active setpoints, discharge > 0
    q_kvar: np.ndarray  # (n_s,)
    head_kw: float
    network_loss_kw: float
    battery_loss_kw: np.ndarray  # (n_s,) modeled losses
    band_penalty: float
    aggregate_penalty: float
    predicted_energy_kwh: np.ndarray  # (n_s,) end-of-step energies
    v_pu: np.ndarray
    status: str
    nodes: int
    wall_time_s: float
    warning: str = ""


def supporting_points(params: BatteryParams, count: int = DEFAULT_SUPPORT_POINTS) -> np.ndarray:
    """Loss-curve supporting powers: uniform over the grid rating.

    A breakpoint at zero power is required so an idle battery carries zero
    modeled loss; with an even requested count the grid is widened by one
    point to keep both symmetry and the zero point.
    """
    if count < 3:
        raise ValueError("need at least 3 supporting points")
    n = count if count % 2 == 1 else count + 1
    return np.linspace(-params.p_grid_max_kw, params.p_grid_max_kw, n)


@dataclass
class _RtLayout:
    p_gen: slice
    q_pos: slice
    q_neg: slice
    loss_p: slice
    loss_q: slice
    v: slice
    lam: slice | None
    p_dis: slice | None
    p_ch: slice | None
    bat_loss: slice
    y_agg: slice
    x_set: slice
    n_var: int


def _build_problem(
    lin: LinearizedGrid,
    devices: DeviceMap,
    batteries: list[BatteryParams],
    handoff: ScheduleHandoff,
    meas: RtMeasurements,
    states: list[BatteryState],
    mode: str,
    support_count: int,
    penalty: float,
    v_margin: float,
    i_margin: float,
    dt_s: float,
) -> tuple[LpProblem, _RtLayout, list[np.ndarray]]:
    net = lin.net
    n, n_l = net.n_bus, net.n_branch
    n_s = len(batteries)
    n_g = devices.n_gen
    s_base = net.base.s_kva
    storage_idx = [k for k, g in enumerate(devices.generators) if not g.is_slack]
    head_idx = [k for k, g in enumerate(devices.generators) if g.is_slack][0]
    c_g = devices.gen_incidence()
    bus_of_gen = np.argmax(c_g, axis=0)
    caps = np.array([b.capacity_kwh for b in batteries])
    meas.validate(n, devices.n_pv, n_s, caps)

    c_pv = devices.pv_incidence()
    p_d = (meas.load_p_kw - c_pv @ meas.pv_p_kw) / s_base
    q_d = (meas.load_q_kvar - c_pv @ meas.pv_q_kvar) / s_base

    points = [supporting_points(b, support_count) for b in batteries] if mode == "milp" else []
    cursor = 0

    def add(count: int) -> slice:
        nonlocal cursor
        sl = slice(cursor, cursor + count)
        cursor += count
        return sl

    sl_pgen = add(n_g)
    sl_qpos = add(n_s)
    sl_qneg = add(n_s)
    sl_lossp = add(n_l)
    sl_lossq = add(n_l)
    sl_v = add(n)
    if mode == "milp":
        sl_lam = add(sum(len(p) for p in points))
        sl_pdis = sl_pch = None
    elif mode == "lp":
        sl_lam = None
        sl_pdis = add(n_s)
        sl_pch = add(n_s)
    else:
        raise RtError(f"unknown mode '{mode}'")
    sl_batloss = add(n_s)
    sl_y = add(1)
    sl_xset = add(n_s)
    n_var = cursor
    layout = _RtLayout(
        p_gen=sl_pgen, q_pos=sl_qpos, q_neg=sl_qneg, loss_p=sl_lossp, loss_q=sl_lossq,
        v=sl_v, lam=sl_lam, p_dis=sl_pdis, p_ch=sl_pch, bat_loss=sl_batloss,
        y_agg=sl_y, x_set=sl_xset, n_var=n_var,
    )

    inj_p = sp.csr_matrix(
        (np.ones(n_g), (bus_of_gen, np.arange(sl_pgen.start, sl_pgen.stop))),
        shape=(n, n_var),
    )
    storage_bus = [bus_of_gen[k] for k in storage_idx]
    inj_q = sp.csr_matrix(
        (
            np.ones(2 * n_s),
            (
                np.concatenate([storage_bus, storage_bus]),
                np.concatenate(
                    [np.arange(sl_qpos.start, sl_qpos.stop), np.arange(sl_qneg.start, sl_qneg.stop)]
                ),
            ),
        ),
        shape=(n, n_var),
    )
    blocks = emit_grid_blocks(
        lin, devices, p_d, q_d, inj_p, inj_q, sl_lossp, sl_lossq, sl_v, n_var,
        v_margin=v_margin, i_margin=i_margin,
    )
    p_cols = [np.array([sl_pgen.start + k]) for k in storage_idx]
    q_cols = [np.array([sl_qpos.start + g, sl_qneg.start + g]) for g in range(n_s)]
    blocks += emit_polygon_blocks(devices, s_base, p_cols, q_cols, n_var)

    # two-well end-of-step bounds: next = transition @ state + gain * cell_kw
    # with cell_kw = s_base * p_gen + bat_loss (both wells per battery)
    rows_i, rows_j, rows_v = [], [], []
    lows, highs = [], []
    drift = []
    r = 0
    for g, params in enumerate(batteries):
        disc = discretize_wells(params, dt_s)
        x0 = np.array([states[g].available_kwh, states[g].bound_kwh])
        phi_x0 = disc.transition @ x0
        drift.append(phi_x0)
        caps_w = np.array([params.available_well_kwh, params.bound_well_kwh])
        for w in range(2):
            gain = disc.input_gain[w]
            rows_i += [r, r]
            rows_j += [sl_pgen.start + storage_idx[g], sl_batloss.start + g]
            rows_v += [gain * s_base, gain]
            lows.append(0.0 - phi_x0[w])
            highs.append(caps_w[w] - phi_x0[w])
            r += 1
    wells = sp.csr_matrix((rows_v, (rows_i, rows_j)), shape=(r, n_var))
    blocks.append(
        OpfBlock(tag="well-bounds", matrix=wells, lower=np.asarray(lows), upper=np.asarray(highs))
    )

    # allocation-band hinges on the end-of-step total energy
    hinge_i, hinge_j, hinge_v = [], [], []
    hinge_lo, hinge_hi = [], []
    r = 0
    for g, params in enumerate(batteries):
        disc = discretize_wells(params, dt_s)
        e_gain = float(disc.input_gain.sum())  # kWh per kW of cell power
        e_drift = float(drift[g].sum())
        for sign, bound in (
            (-1.0, -penalty * (handoff.energy_floor_kwh[g] - e_drift)),
            (+1.0, penalty * (handoff.energy_ceiling_kwh[g] - e_drift)),
        ):
            hinge_i += [r, r, r]
            hinge_j += [
                sl_pgen.start + storage_idx[g],
                sl_batloss.start + g,
                sl_xset.start + g,
            ]
            hinge_v += [sign * penalty * e_gain * s_base, sign * penalty * e_gain, 1.0]
            hinge_lo.append(-np.inf)
            hinge_hi.append(bound)
            r += 1
    hinges = sp.csr_matrix((hinge_v, (hinge_i, hinge_j)), shape=(r, n_var))
    blocks.append(
        OpfBlock(
            tag="allocation-band",
            matrix=hinges,
            lower=np.asarray(hinge_lo),
            upper=np.asarray(hinge_hi),
        )
    )

    # aggregate discharge shortfall: y >= penalty * (setpoint - total grid power)
    agg = sp.csr_matrix(
        (
            np.concatenate([np.full(n_s, -penalty * s_base), [-1.0]]),
            (
                np.zeros(n_s + 1, dtype=int),
                np.concatenate(
                    [[sl_pgen.start + k for k in storage_idx], [sl_y.start]]
                ),
            ),
        ),
        shape=(1, n_var),
    )
    blocks.append(
        OpfBlock(
            tag="aggregate-setpoint",
            matrix=agg,
            lower=np.array([-np.inf]),
            upper=np.array([-penalty * handoff.aggregate_setpoint_kw]),
        )
    )

    sos2_groups: dict[str, list[int]] = {}
    eq_extra_rows = []
    eq_extra_rhs = []
    if mode == "milp":
        offset = sl_lam.start
        for g, params in enumerate(batteries):
            pts = points[g]
            k = len(pts)
            cols = list(range(offset, offset + k))
            sos2_groups[f"loss-curve-{g}"] = cols
            # power tie: sum(points * lam) = s_base * p_gen_g
            tie_p = sp.csr_matrix(
                (
                    np.concatenate([pts, [-s_base]]),
                    (np.zeros(k + 1, dtype=int), cols + [sl_pgen.start + storage_idx[g]]),
                ),
                shape=(1, n_var),
            )
            # loss tie: sum(f(points) * lam) = bat_loss_g
            f_pts = np.array([system_losses(params, p) for p in pts])
            tie_l = sp.csr_matrix(
                (
                    np.concatenate([f_pts, [-1.0]]),
                    (np.zeros(k + 1, dtype=int), cols + [sl_batloss.start + g]),
                ),
                shape=(1, n_var),
            )
            # convexity
            conv = sp.csr_matrix(
                (np.ones(k), (np.zeros(k, dtype=int), cols)), shape=(1, n_var)
            )
            eq_extra_rows += [tie_p, tie_l, conv]
            eq_extra_rhs += [0.0, 0.0, 1.0]
            offset += k
    else:
        for g, params in enumerate(batteries):
            # net power split and linear loss bookkeeping
            split = sp.csr_matrix(
                (
                    [1.0, 1.0, -1.0],
                    (
                        [0, 0, 0],
                        [sl_pdis.start + g, sl_pch.start + g, sl_pgen.start + storage_idx[g]],
                    ),
                ),
                shape=(1, n_var),
            )
            loss_row = sp.csr_matrix(
                (
                    [
                        1.0,
                        -(1.0 / params.eta_discharge - 1.0) * s_base,
                        (1.0 - params.eta_charge) * s_base,
                    ],
                    (
                        [0, 0, 0],
                        [sl_batloss.start + g, sl_pdis.start + g, sl_pch.start + g],
                    ),
                ),
                shape=(1, n_var),
            )
            eq_extra_rows += [split, loss_row]
            eq_extra_rhs += [0.0, 0.0]
    if eq_extra_rows:
        blocks.append(
            OpfBlock(
                tag="loss-model",
                matrix=sp.vstack(eq_extra_rows, format="csr"),
                lower=np.asarray(eq_extra_rhs),
                upper=np.asarray(eq_extra_rhs),
            )
        )

    lb = np.full(n_var, -np.inf)
    ub = np.full(n_var, np.inf)
    head = devices.generators[head_idx]
    lb[sl_pgen.start + head_idx] = head.p_min_kw / s_base
    ub[sl_pgen.start + head_idx] = head.p_max_kw / s_base
    for g, gen in enumerate(devices.storage):
        k = storage_idx[g]
        lb[sl_pgen.start + k] = gen.p_min_kw / s_base
        ub[sl_pgen.start + k] = gen.p_max_kw / s_base
        cap = reactive_cap_pu(gen, s_base)
        lb[sl_qpos.start + g] = 0.0
        ub[sl_qpos.start + g] = cap
        lb[sl_qneg.start + g] = -cap
        ub[sl_qneg.start + g] = 0.0
    lb[sl_lossp] = 0.0
    lb[sl_lossq] = 0.0
    if mode == "milp":
        lb[sl_lam] = 0.0
        ub[sl_lam] = 1.0
    else:
        for g, gen in enumerate(devices.storage):
            lb[sl_pdis.start + g] = 0.0
            ub[sl_pdis.start + g] = gen.p_max_kw / s_base
            lb[sl_pch.start + g] = gen.p_min_kw / s_base
            ub[sl_pch.start + g] = 0.0
    lb[sl_batloss] = 0.0
    lb[sl_y] = 0.0
    ub[sl_xset] = 0.0

    # objective: network (generation) kW + battery losses kW + penalties
    obj = np.zeros(n_var)
    obj[sl_pgen] = s_base
    obj[sl_batloss] = 1.0
    obj[sl_y] = 1.0
    obj[sl_xset] = -1.0
    obj[sl_qpos] = Q_TIEBREAK_COST
    obj[sl_qneg] = -Q_TIEBREAK_COST

    eq_blocks = [b for b in blocks if b.is_equality()]
    ineq_blocks = [b for b in blocks if not b.is_equality()]
    problem = LpProblem(
        objective=obj,
        ineq_matrix=sp.vstack([b.matrix for b in ineq_blocks], format="csr"),
        ineq_lower=np.concatenate([b.lower for b in ineq_blocks]),
        ineq_upper=np.concatenate([b.upper for b in ineq_blocks]),
        eq_matrix=sp.vstack([b.matrix for b in eq_blocks], format="csr"),
        eq_rhs=np.concatenate([b.lower for b in eq_blocks]),
        var_lower=lb,
        var_upper=ub,
        sos2_groups=sos2_groups,
    )
    return problem, layout, drift


def _extract(
    solution: LpSolution,
    layout: _RtLayout,
    lin: LinearizedGrid,
    devices: DeviceMap,
    batteries: list[BatteryParams],
    drift: list[np.ndarray],
    dt_s: float,
    warning: str,
) -> RtSetpoints:
    s_base = lin.net.base.s_kva
    storage_idx = [k for k, g in enumerate(devices.generators) if not g.is_slack]
    head_idx = [k for k, g in enumerate(devices.generators) if g.is_slack][0]
    x = solution.x
    p_gen = x[layout.p_gen]
    p_kw = p_gen[storage_idx] * s_base
    q_kvar = (x[layout.q_pos] + x[layout.q_neg]) * s_base
    bat_loss = x[layout.bat_loss]
    predicted = np.empty(len(batteries))
    for g, params in enumerate(batteries):
        disc = discretize_wells(params, dt_s)
        cell = p_kw[g] + bat_loss[g]
        predicted[g] = float(drift[g].sum() + disc.input_gain.sum() * cell)
    return RtSetpoints(
        p_kw=p_kw,
        q_kvar=q_kvar,
        head_kw=float(p_gen[head_idx] * s_base),
        network_loss_kw=float(
            (x[layout.loss_p].sum() + x[layout.loss_q].sum()) * s_base
        ),
        battery_loss_kw=bat_loss.copy(),
        band_penalty=float(-x[layout.x_set].sum()),
        aggregate_penalty=float(x[layout.y_agg][0]),
        predicted_energy_kwh=predicted,
        v_pu=x[layout.v].copy(),
        status=solution.status,
        nodes=solution.stats.nodes,
        wall_time_s=solution.stats.wall_time_s,
        warning=warning,
    )


def rt_step(
    lin: LinearizedGrid,
    devices: DeviceMap,
    batteries: list[BatteryParams],
    handoff: ScheduleHandoff,
    meas: RtMeasurements,
    states: list[BatteryState],
    support_count: int = DEFAULT_SUPPORT_POINTS,
    penalty: float = DEFAULT_PENALTY,
    v_margin: float = DEFAULT_V_MARGIN_PU,
    i_margin: float = DEFAULT_I_MARGIN_FRACTION,
    dt_s: float = RT_STEP_S,
    node_limit: int = DEFAULT_NODE_LIMIT,
) -> RtSetpoints:
    """One dispatch step with the nonconvex (SOS2) battery loss model."""
    problem, layout, drift = _build_problem(
        lin, devices, batteries, handoff, meas, states,
        "milp", support_count, penalty, v_margin, i_margin, dt_s,
    )
    # sub-watt optimality is plenty at kW scale and keeps trees small
    solution = solve_sos2(problem, node_limit=node_limit, abs_gap=1e-6)
    warning = ""
    if solution.status == "node_limit":
        if solution.x is None:
            raise RtError("node limit hit without any feasible dispatch")
        warning = f"node limit reached after {solution.stats.nodes} nodes; using incumbent"
    elif not solution.ok:
        raise RtError(_audit_infeasible(problem, solution))
    bad = sos2_violations(problem, solution.x)
    if bad:
        raise RtError(f"solution violates SOS2 adjacency in {bad}")
    return _extract(solution, layout, lin, devices, batteries, drift, dt_s, warning)


def rt_step_lp(
    lin: LinearizedGrid,
    devices: DeviceMap,
    batteries: list[BatteryParams],
    handoff: ScheduleHandoff,
    meas: RtMeasurements,
    states: list[BatteryState],
    penalty: float = DEFAULT_PENALTY,
    v_margin: float = DEFAULT_V_MARGIN_PU,
    i_margin: float = DEFAULT_I_MARGIN_FRACTION,
    dt_s: float = RT_STEP_S,
) -> RtSetpoints:
    """Baseline dispatch step with the linear in/out efficiency loss model."""
    problem, layout, drift = _build_problem(
        lin, devices, batteries, handoff, meas, states,
        "lp", 0, penalty, v_margin, i_margin, dt_s,
    )
    solution = solve_lp(problem)
    if not solution.ok:
        raise RtError(_audit_infeasible(problem, solution))
    return _extract(solution, layout, lin, devices, batteries, drift, dt_s, "")


def _audit_infeasible(problem: LpProblem, solution: LpSolution) -> str:
    return (
        f"dispatch problem reported {solution.status}: the grid constraints "
        "cannot be met at the measured loads (penalties are soft, so this "
        "signals an unmanageable feeder state); problem dump available via "
        "lv_storage_opt.lp.dump_problem"
    )


def update_observers(
    batteries: list[BatteryParams],
    gains: list[ObserverGain],
    estimates: list[BatteryState],
    applied_cell_kw: np.ndarray,
    measured_soe_kwh: np.ndarray,
    dt_s: float = RT_STEP_S,
) -> list[BatteryState]:
    """Advance every battery's well-split estimate by one step."""
    return [
        observer_step(params, gains[g], estimates[g], float(applied_cell_kw[g]),
                      float(measured_soe_kwh[g]), dt_s)
        for g, params in enumerate(batteries)
    ]
