"""Hourly robust scheduler: multi-period dispatch over a receding horizon.

Every hour the scheduler solves a linear program stacking one grid
dispatch block per horizon step, coupled by the stored-energy evolution of
every battery (integrator model with fixed in/out efficiencies), with
aging priced through the convex-envelope planes of the degradation map.
PV forecast uncertainty is handled constraint-wise: every inequality
whose bounds depend on the uncertain infeed is tightened by the worst
case over the +-3 sigma box, which is exact here because the decision
variables never multiply the uncertainty.

The constraint matrix is identical from hour to hour (only forecasts,
the initial energies, and the fading capacities move), so the builder
keeps a constant template and refreshes bounds and right-hand sides.

Outputs per solve: per-battery energy corridor (floor/ceiling between the
current and next planned energy level) and the aggregate power setpoint
for the real-time controller, plus the full planned trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .battery import BatteryParams, DegradationModel
from .grid import DeviceMap
from .lp import LpProblem, LpSolution, solve_lp
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


class SchedulerError(Exception):
    pass


@dataclass
class ForecastSet:
    """Per-step forecasts over the horizon (kW / kVar, physical units)."""

    pv_kw: np.ndarray  # (n_pv, N)
    load_p_kw: np.ndarray  # (n_bus, N)
    load_q_kvar: np.ndarray  # (n_bus, N)
    pv_sigma_kw: np.ndarray  # (n_pv, N)

    def validate(self, n_bus: int, n_pv: int, horizon: int) -> None:
        if self.pv_kw.shape != (n_pv, horizon):
            raise SchedulerError(f"pv forecast must be ({n_pv}, {horizon})")
        if self.load_p_kw.shape != (n_bus, horizon) or self.load_q_kvar.shape != (
            n_bus,
            horizon,
        ):
            raise SchedulerError(f"load forecasts must be ({n_bus}, {horizon})")
        if self.pv_sigma_kw.shape != (n_pv, horizon):
            raise SchedulerError(f"pv sigma must be ({n_pv}, {horizon})")
        if np.any(self.pv_kw < 0) or np.any(self.pv_sigma_kw < 0):
            raise SchedulerError("pv forecasts and sigmas must be nonnegative")
        dark = self.pv_kw <= 0
        if np.any(self.pv_sigma_kw[dark] > 0):
            raise SchedulerError("nighttime steps must carry zero pv sigma")


@dataclass
class ScheduleHandoff:
    """Scheduler-to-dispatcher contract for the upcoming hour."""

    energy_floor_kwh: np.ndarray  # (n_s,)
    energy_ceiling_kwh: np.ndarray  # (n_s,)
    aggregate_setpoint_kw: float
    planned_energy_kwh: np.ndarray  # (n_s, N) end-of-step energies
    planned_power_kw: np.ndarray  # (n_s, N) net grid powers, discharge > 0
    planned_degradation_kwh: np.ndarray  # (n_s, N) epigraph values (zero if unpriced)
    objective: float
    status: str
    planned_discharge_kw: np.ndarray | None = None  # (n_s, N)
    planned_charge_kw: np.ndarray | None = None  # (n_s, N)
    head_power_first_kw: float = 0.0
    network_loss_first_kw: float = 0.0

    def to_dict(self) -> dict:
        return {
            "energy_floor_kwh": self.energy_floor_kwh.tolist(),
            "energy_ceiling_kwh": self.energy_ceiling_kwh.tolist(),
            "aggregate_setpoint_kw": self.aggregate_setpoint_kw,
            "planned_energy_kwh": self.planned_energy_kwh.tolist(),
            "planned_power_kw": self.planned_power_kw.tolist(),
            "status": self.status,
        }

    def save(self, path) -> None:
        import json
        from pathlib import Path

        Path(path).write_text(json.dumps({"format_version": 1, **self.to_dict()}, indent=1))


def load_handoff(path) -> ScheduleHandoff:
    """Read a handoff file written by :meth:`ScheduleHandoff.save`."""
    import json
    from pathlib import Path

    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != 1:
        raise SchedulerError(f"unsupported handoff format_version {doc.get('format_version')}")
    energy = np.asarray(doc["planned_energy_kwh"], dtype=float)
    power = np.asarray(doc["planned_power_kw"], dtype=float)
    return ScheduleHandoff(
        energy_floor_kwh=np.asarray(doc["energy_floor_kwh"], dtype=float),
        energy_ceiling_kwh=np.asarray(doc["energy_ceiling_kwh"], dtype=float),
        aggregate_setpoint_kw=float(doc["aggregate_setpoint_kw"]),
        planned_energy_kwh=energy,
        planned_power_kw=power,
        planned_degradation_kwh=np.zeros_like(energy),
        objective=0.0,
        status=str(doc["status"]),
    )


def forecasts_to_csv(forecasts: ForecastSet, path) -> None:
    """Write the documented forecast schema: hour, kind, unit, value, sigma."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["hour", "kind", "unit", "value_kw", "sigma_kw"])
        horizon = forecasts.pv_kw.shape[1]
        for t in range(horizon):
            for u in range(forecasts.pv_kw.shape[0]):
                writer.writerow(
                    [t, "pv", u, f"{forecasts.pv_kw[u, t]:.6f}",
                     f"{forecasts.pv_sigma_kw[u, t]:.6f}"]
                )
            for u in range(forecasts.load_p_kw.shape[0]):
                writer.writerow([t, "load_p", u, f"{forecasts.load_p_kw[u, t]:.6f}", ""])
                writer.writerow([t, "load_q", u, f"{forecasts.load_q_kvar[u, t]:.6f}", ""])


def forecasts_from_csv(path, n_bus: int, n_pv: int, horizon: int) -> ForecastSet:
    import csv

    pv = np.zeros((n_pv, horizon))
    sigma = np.zeros((n_pv, horizon))
    load_p = np.zeros((n_bus, horizon))
    load_q = np.zeros((n_bus, horizon))
    with open(path) as fh:
        for row in csv.DictReader(fh):
            t = int(row["hour"])
            u = int(row["unit"])
            if t >= horizon:
                continue
            kind = row["kind"]
            if kind == "pv":
                pv[u, t] = float(row["value_kw"])
                sigma[u, t] = float(row["sigma_kw"] or 0.0)
            elif kind == "load_p":
                load_p[u, t] = float(row["value_kw"])
            elif kind == "load_q":
                load_q[u, t] = float(row["value_kw"])
            else:
                raise SchedulerError(f"unknown forecast kind '{kind}'")
    return ForecastSet(pv_kw=pv, load_p_kw=load_p, load_q_kvar=load_q, pv_sigma_kw=sigma)


def robustify(
    lower: np.ndarray,
    upper: np.ndarray,
    load_sens: sp.csr_matrix,
    pv_incidence: np.ndarray,
    sigma_pu: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Constraint-wise worst case over the +-3 sigma PV box.

    For a row whose bounds shift by ``g . delta`` under a PV deviation
    ``delta``, the exact worst case over ``|delta_j| <= 3 sigma_j`` is
    ``3 |g|^T sigma``; both finite bounds move inward by that amount.
    """
    tighten = 3.0 * np.abs(load_sens @ sp.csr_matrix(pv_incidence)) @ sigma_pu
    new_lower = np.where(np.isfinite(lower), lower + tighten, lower)
    new_upper = np.where(np.isfinite(upper), upper - tighten, upper)
    return new_lower, new_upper


def evolution_matrices(
    batteries: list[BatteryParams], horizon: int, step_h: float
) -> tuple[np.ndarray, np.ndarray]:
    """Stacked energy evolution: E = S_x @ e0 + S_u @ U.

    U stacks, per step, the discharge then charge grid powers of every
    battery (kW); E stacks the end-of-step energies (kWh).
    """
    n_s = len(batteries)
    eta_dis = np.array([b.eta_discharge for b in batteries])
    eta_ch = np.array([b.eta_charge for b in batteries])
    b_step = step_h * np.hstack([np.diag(-1.0 / eta_dis), np.diag(-eta_ch)])
    s_x = np.vstack([np.eye(n_s)] * horizon)
    s_u = np.zeros((horizon * n_s, horizon * 2 * n_s))
    for t in range(horizon):
        for k in range(t + 1):
            s_u[t * n_s : (t + 1) * n_s, k * 2 * n_s : (k + 1) * 2 * n_s] = b_step
    return s_x, s_u


@dataclass
class _RhsRecipe:
    kind: str
    rows: slice
    period: int


class HorizonScheduler:
    """Template-based builder and solver for the receding-horizon problem.

    ``degradation`` prices aging through the convex-envelope planes; when
    it is None the schedule is aging-blind and a minimum-energy floor
    (fraction of capacity) protects the batteries instead.
    """

    def __init__(
        self,
        lin: LinearizedGrid,
        devices: DeviceMap,
        batteries: list[BatteryParams],
        degradation: DegradationModel | None,
        horizon: int = 24,
        step_h: float = 1.0,
        energy_cost_eur_mwh: float = 100.0,
        degradation_cost_eur_kwh: float = 400.0,
        v_margin: float = DEFAULT_V_MARGIN_PU,
        i_margin: float = DEFAULT_I_MARGIN_FRACTION,
        soe_floor_fraction: float = 0.0,
    ):
        storage = devices.storage
        if len(batteries) != len(storage):
            raise SchedulerError("one BatteryParams per storage unit required")
        if horizon < 1:
            raise SchedulerError("horizon must be >= 1")
        self.lin = lin
        self.devices = devices
        self.batteries = batteries
        self.degradation = degradation
        self.horizon = horizon
        self.step_h = step_h
        self.energy_cost_eur_mwh = energy_cost_eur_mwh
        self.degradation_cost_eur_kwh = degradation_cost_eur_kwh
        self.v_margin = v_margin
        self.i_margin = i_margin
        self.soe_floor_fraction = soe_floor_fraction
        self._build_template()

    # ------------------------------------------------------------------
    # template construction
    # ------------------------------------------------------------------
    def _build_template(self) -> None:
        lin, devices = self.lin, self.devices
        net = lin.net
        n, n_l = net.n_bus, net.n_branch
        n_s = len(self.batteries)
        n_g = devices.n_gen
        horizon = self.horizon
        s_base = net.base.s_kva

        period_width = 1 + 4 * n_s + 2 * n_l + n  # head, dis, ch, q+, q-, losses, v
        self.period_width = period_width
        n_var = horizon * period_width + 2 * n_s * horizon if self.degradation else (
            horizon * period_width + n_s * horizon
        )
        self.energy_offset = horizon * period_width
        self.z_offset = self.energy_offset + n_s * horizon if self.degradation else None
        self.n_var = n_var

        def col_head(t: int) -> int:
            return t * period_width

        def cols_dis(t: int) -> slice:
            base = t * period_width + 1
            return slice(base, base + n_s)

        def cols_ch(t: int) -> slice:
            base = t * period_width + 1 + n_s
            return slice(base, base + n_s)

        def cols_qpos(t: int) -> slice:
            base = t * period_width + 1 + 2 * n_s
            return slice(base, base + n_s)

        def cols_qneg(t: int) -> slice:
            base = t * period_width + 1 + 3 * n_s
            return slice(base, base + n_s)

        def cols_loss_p(t: int) -> slice:
            base = t * period_width + 1 + 4 * n_s
            return slice(base, base + n_l)

        def cols_loss_q(t: int) -> slice:
            base = t * period_width + 1 + 4 * n_s + n_l
            return slice(base, base + n_l)

        def cols_v(t: int) -> slice:
            base = t * period_width + 1 + 4 * n_s + 2 * n_l
            return slice(base, base + n)

        def cols_e(t: int) -> slice:
            base = self.energy_offset + t * n_s
            return slice(base, base + n_s)

        def cols_z(t: int) -> slice:
            base = self.z_offset + t * n_s
            return slice(base, base + n_s)

        self._cols = {
            "head": col_head,
            "dis": cols_dis,
            "ch": cols_ch,
            "qpos": cols_qpos,
            "qneg": cols_qneg,
            "loss_p": cols_loss_p,
            "loss_q": cols_loss_q,
            "v": cols_v,
            "e": cols_e,
            "z": cols_z,
        }

        c_g = devices.gen_incidence()
        bus_of_gen = np.argmax(c_g, axis=0)
        head_idx = [k for k, g in enumerate(devices.generators) if g.is_slack][0]
        storage_idx = [k for k, g in enumerate(devices.generators) if not g.is_slack]
        storage_bus = [bus_of_gen[k] for k in storage_idx]
        self._storage_bus = storage_bus
        head_bus = bus_of_gen[head_idx]

        zero_p = np.zeros(n)
        zero_q = np.zeros(n)
        eq_blocks: list[OpfBlock] = []
        ineq_blocks: list[OpfBlock] = []
        eq_recipes: list[_RhsRecipe] = []
        ineq_recipes: list[_RhsRecipe] = []
        eq_row = 0
        ineq_row = 0

        for t in range(horizon):
            inj_rows = np.concatenate([[head_bus], storage_bus, storage_bus])
            inj_cols = np.concatenate(
                [[col_head(t)], np.arange(*cols_dis(t).indices(n_var))[:n_s],
                 np.arange(*cols_ch(t).indices(n_var))[:n_s]]
            )
            inj_p = sp.csr_matrix(
                (np.ones(1 + 2 * n_s), (inj_rows, inj_cols)), shape=(n, n_var)
            )
            inj_q = sp.csr_matrix(
                (
                    np.ones(2 * n_s),
                    (
                        np.concatenate([storage_bus, storage_bus]),
                        np.concatenate(
                            [np.arange(*cols_qpos(t).indices(n_var)),
                             np.arange(*cols_qneg(t).indices(n_var))]
                        ),
                    ),
                ),
                shape=(n, n_var),
            )
            blocks = emit_grid_blocks(
                lin, devices, zero_p, zero_q, inj_p, inj_q,
                cols_loss_p(t), cols_loss_q(t), cols_v(t), n_var,
                v_margin=self.v_margin, i_margin=self.i_margin,
            )
            p_cols = [
                np.array([cols_dis(t).start + g, cols_ch(t).start + g]) for g in range(n_s)
            ]
            q_cols = [
                np.array([cols_qpos(t).start + g, cols_qneg(t).start + g])
                for g in range(n_s)
            ]
            blocks += emit_polygon_blocks(devices, s_base, p_cols, q_cols, n_var)
            for b in blocks:
                if b.is_equality():
                    eq_blocks.append(b)
                    eq_recipes.append(_RhsRecipe(b.tag, slice(eq_row, eq_row + b.n_rows), t))
                    eq_row += b.n_rows
                else:
                    ineq_blocks.append(b)
                    ineq_recipes.append(
                        _RhsRecipe(b.tag, slice(ineq_row, ineq_row + b.n_rows), t)
                    )
                    ineq_row += b.n_rows

        # energy evolution, normalized by the power base so row coefficients
        # stay near unity (keeps raw-space solver residuals tight):
        # (e_t - e_{t-1})/s_base + (T/eta_dis) dis_t + T eta_ch ch_t = [e0/s_base]
        eta_dis = np.array([b.eta_discharge for b in self.batteries])
        eta_ch = np.array([b.eta_charge for b in self.batteries])
        rows_i = []
        rows_j = []
        rows_v = []
        for t in range(horizon):
            for g in range(n_s):
                r = t * n_s + g
                rows_i += [r, r, r]
                rows_j += [cols_e(t).start + g, cols_dis(t).start + g, cols_ch(t).start + g]
                rows_v += [1.0 / s_base, self.step_h / eta_dis[g], self.step_h * eta_ch[g]]
                if t > 0:
                    rows_i.append(r)
                    rows_j.append(cols_e(t - 1).start + g)
                    rows_v.append(-1.0 / s_base)
        evo = sp.csr_matrix(
            (rows_v, (rows_i, rows_j)), shape=(horizon * n_s, n_var)
        )
        eq_blocks.append(
            OpfBlock(
                tag="energy-evolution",
                matrix=evo,
                lower=np.zeros(horizon * n_s),
                upper=np.zeros(horizon * n_s),
            )
        )
        eq_recipes.append(
            _RhsRecipe("energy-evolution", slice(eq_row, eq_row + horizon * n_s), -1)
        )
        eq_row += horizon * n_s

        # capacity corridor as ranged rows on the energy variables
        eye_rows = []
        for t in range(horizon):
            sl = cols_e(t)
            eye_rows.append(
                sp.csr_matrix(
                    (np.ones(n_s), (np.arange(n_s), np.arange(sl.start, sl.stop))),
                    shape=(n_s, n_var),
                )
            )
        corridor = sp.vstack(eye_rows, format="csr")
        ineq_blocks.append(
            OpfBlock(
                tag="capacity-corridor",
                matrix=corridor,
                lower=np.zeros(horizon * n_s),
                upper=np.full(horizon * n_s, np.inf),
            )
        )
        ineq_recipes.append(
            _RhsRecipe("capacity-corridor", slice(ineq_row, ineq_row + horizon * n_s), -1)
        )
        ineq_row += horizon * n_s

        # degradation epigraph: z_t >= a_p * cell_power + a_e * e_t + a_0 * cap
        if self.degradation is not None:
            planes = self.degradation.planes
            n_p = planes.shape[0]
            di, dj, dv = [], [], []
            r = 0
            for t in range(horizon):
                for g in range(n_s):
                    dis_col = cols_dis(t).start + g
                    ch_col = cols_ch(t).start + g
                    e_col = cols_e(t).start + g
                    z_col = cols_z(t).start + g
                    for p in range(n_p):
                        a_p, a_e, _ = planes[p]
                        di += [r, r, r, r]
                        dj += [z_col, dis_col, ch_col, e_col]
                        dv += [
                            1.0,
                            -a_p * s_base / eta_dis[g],
                            -a_p * s_base * eta_ch[g],
                            -a_e,
                        ]
                        r += 1
            deg = sp.csr_matrix((dv, (di, dj)), shape=(r, n_var))
            ineq_blocks.append(
                OpfBlock(
                    tag="degradation",
                    matrix=deg,
                    lower=np.zeros(r),
                    upper=np.full(r, np.inf),
                )
            )
            ineq_recipes.append(_RhsRecipe("degradation", slice(ineq_row, ineq_row + r), -1))
            ineq_row += r

        self._eq_matrix = sp.vstack([b.matrix for b in eq_blocks], format="csr")
        self._ineq_matrix = sp.vstack([b.matrix for b in ineq_blocks], format="csr")
        self._eq_blocks = eq_blocks
        self._ineq_blocks = ineq_blocks
        self._eq_recipes = eq_recipes
        self._ineq_recipes = ineq_recipes
        self.n_eq_rows = eq_row
        self.n_ineq_rows = ineq_row

        # constant bounds
        lb = np.full(n_var, -np.inf)
        ub = np.full(n_var, np.inf)
        head = devices.generators[head_idx]
        for t in range(horizon):
            lb[col_head(t)] = head.p_min_kw / s_base
            ub[col_head(t)] = head.p_max_kw / s_base
            for g, gen in enumerate(devices.storage):
                lb[cols_dis(t).start + g] = 0.0
                ub[cols_dis(t).start + g] = gen.p_max_kw / s_base
                lb[cols_ch(t).start + g] = gen.p_min_kw / s_base
                ub[cols_ch(t).start + g] = 0.0
                cap = reactive_cap_pu(gen, s_base)
                lb[cols_qpos(t).start + g] = 0.0
                ub[cols_qpos(t).start + g] = cap
                lb[cols_qneg(t).start + g] = -cap
                ub[cols_qneg(t).start + g] = 0.0
            lb[cols_loss_p(t)] = 0.0
            lb[cols_loss_q(t)] = 0.0
            lb[cols_e(t)] = 0.0  # corridor rows carry the informative bounds
            if self.degradation is not None:
                lb[cols_z(t)] = 0.0
        self._var_lower = lb
        self._var_upper = ub

        obj = np.zeros(n_var)
        head_cost = self.step_h * self.energy_cost_eur_mwh * s_base / 1000.0
        for t in range(horizon):
            obj[col_head(t)] = head_cost
            obj[cols_qpos(t)] = Q_TIEBREAK_COST
            obj[cols_qneg(t)] = -Q_TIEBREAK_COST
            if self.degradation is not None:
                obj[cols_z(t)] = self.step_h * self.degradation_cost_eur_kwh
        self._objective = obj

        # uncertainty plumbing
        self._c_pv = devices.pv_incidence()
        self._abs_flow_sens = np.abs(lin.branch_sens_p @ self._c_pv)
        self._abs_volt_sens = np.abs(lin.voltage_sens[:, : net.n_bus] @ self._c_pv)

    # ------------------------------------------------------------------
    # per-solve assembly
    # ------------------------------------------------------------------
    def build(
        self,
        e0_kwh: np.ndarray,
        forecasts: ForecastSet,
        capacities_kwh: np.ndarray | None = None,
    ) -> LpProblem:
        lin, devices = self.lin, self.devices
        net = lin.net
        n = net.n_bus
        n_s = len(self.batteries)
        s_base = net.base.s_kva
        horizon = self.horizon
        forecasts.validate(n, devices.n_pv, horizon)
        caps = (
            np.array([b.capacity_kwh for b in self.batteries])
            if capacities_kwh is None
            else np.asarray(capacities_kwh, dtype=float)
        )
        e0 = np.asarray(e0_kwh, dtype=float)
        if e0.shape != (n_s,):
            raise SchedulerError(f"e0 must have shape ({n_s},)")
        if np.any(e0 < -1e-9) or np.any(e0 > caps + 1e-9):
            bad = int(np.argmax((e0 < -1e-9) | (e0 > caps + 1e-9)))
            raise SchedulerError(
                f"initial energy outside capacity for unit {bad}: "
                f"{e0[bad]:.3f} kWh vs [0, {caps[bad]:.3f}]"
            )

        c_pv = self._c_pv
        p_d = (forecasts.load_p_kw - c_pv @ forecasts.pv_kw) / s_base  # (n, N)
        q_d = forecasts.load_q_kvar / s_base
        sigma_pu = forecasts.pv_sigma_kw / s_base

        eq_rhs = np.zeros(self.n_eq_rows)
        for rec, block in zip(self._eq_recipes, self._eq_blocks):
            t = rec.period
            if rec.kind == "balance":
                eq_rhs[rec.rows] = p_d[:, t].sum()
            elif rec.kind == "voltage-def":
                eq_rhs[rec.rows] = (
                    lin.reference_v
                    - lin.voltage_sens[:, :n] @ p_d[:, t]
                    - lin.voltage_sens[:, n:] @ q_d[:, t]
                )
            elif rec.kind == "energy-evolution":
                rhs = np.zeros(horizon * n_s)
                rhs[:n_s] = e0 / s_base
                eq_rhs[rec.rows] = rhs

        ineq_lower = np.empty(self.n_ineq_rows)
        ineq_upper = np.empty(self.n_ineq_rows)
        n_l = net.n_branch
        i_cap = net.i_max_pu * (1.0 - self.i_margin)
        for rec, block in zip(self._ineq_recipes, self._ineq_blocks):
            t = rec.period
            if rec.kind == "loss-active":
                flow0 = lin.branch_sens_p @ p_d[:, t]
                tighten_flow = 3.0 * self._abs_flow_sens @ sigma_pu[:, t]
                lows = [
                    lin.loss_intercept[:, k]
                    - lin.loss_slope[:, k] * flow0
                    + np.abs(lin.loss_slope[:, k]) * tighten_flow
                    for k in range(lin.pieces)
                ]
                ineq_lower[rec.rows] = np.concatenate(lows)
                ineq_upper[rec.rows] = np.inf
            elif rec.kind == "loss-reactive":
                flow0 = lin.branch_sens_q @ q_d[:, t]
                lows = [
                    lin.loss_intercept[:, k] - lin.loss_slope[:, k] * flow0
                    for k in range(lin.pieces)
                ]
                ineq_lower[rec.rows] = np.concatenate(lows)
                ineq_upper[rec.rows] = np.inf
            elif rec.kind == "branch-limit":
                flow0 = lin.branch_sens_p @ p_d[:, t]
                tighten_flow = 3.0 * self._abs_flow_sens @ sigma_pu[:, t]
                ineq_lower[rec.rows] = flow0 - i_cap + tighten_flow
                ineq_upper[rec.rows] = flow0 + i_cap - tighten_flow
            elif rec.kind == "voltage-bound":
                tighten_v = 3.0 * self._abs_volt_sens @ sigma_pu[:, t]
                ineq_lower[rec.rows] = net.v_min + self.v_margin + tighten_v
                ineq_upper[rec.rows] = net.v_max - self.v_margin - tighten_v
            elif rec.kind == "apparent-power":
                ineq_lower[rec.rows] = block.lower
                ineq_upper[rec.rows] = block.upper
            elif rec.kind == "capacity-corridor":
                floor = self.soe_floor_fraction * caps
                ineq_lower[rec.rows] = np.tile(floor, horizon)
                ineq_upper[rec.rows] = np.tile(caps, horizon)
            elif rec.kind == "degradation":
                n_p = self.degradation.planes.shape[0]
                base = self.degradation.planes[:, 2]  # a_0 per plane
                block_rhs = np.concatenate(
                    [base * caps[g] for _ in range(horizon) for g in range(n_s)]
                )
                ineq_lower[rec.rows] = block_rhs
                ineq_upper[rec.rows] = np.inf
            else:
                raise SchedulerError(f"unknown recipe kind {rec.kind}")

        return LpProblem(
            objective=self._objective,
            ineq_matrix=self._ineq_matrix,
            ineq_lower=ineq_lower,
            ineq_upper=ineq_upper,
            eq_matrix=self._eq_matrix,
            eq_rhs=eq_rhs,
            var_lower=self._var_lower,
            var_upper=self._var_upper,
        )

    # ------------------------------------------------------------------
    def schedule(
        self,
        e0_kwh: np.ndarray,
        forecasts: ForecastSet,
        capacities_kwh: np.ndarray | None = None,
    ) -> ScheduleHandoff:
        problem = self.build(e0_kwh, forecasts, capacities_kwh)
        solution = solve_lp(problem)
        if not solution.ok:
            raise SchedulerError(
                self._diagnose(problem, solution, e0_kwh, forecasts, capacities_kwh)
            )
        return self.extract_handoff(e0_kwh, solution)

    def extract_handoff(self, e0_kwh: np.ndarray, solution: LpSolution) -> ScheduleHandoff:
        n_s = len(self.batteries)
        s_base = self.lin.net.base.s_kva
        x = solution.x
        energy = np.column_stack(
            [x[self._cols["e"](t)] for t in range(self.horizon)]
        )
        dis = np.column_stack(
            [x[self._cols["dis"](t)] * s_base for t in range(self.horizon)]
        )
        ch = np.column_stack(
            [x[self._cols["ch"](t)] * s_base for t in range(self.horizon)]
        )
        power = dis + ch
        if self.degradation is not None:
            z = np.column_stack([x[self._cols["z"](t)] for t in range(self.horizon)])
        else:
            z = np.zeros((n_s, self.horizon))
        e1 = energy[:, 0]
        loss0 = (
            x[self._cols["loss_p"](0)].sum() + x[self._cols["loss_q"](0)].sum()
        ) * s_base
        return ScheduleHandoff(
            energy_floor_kwh=np.minimum(e0_kwh, e1),
            energy_ceiling_kwh=np.maximum(e0_kwh, e1),
            aggregate_setpoint_kw=float(power[:, 0].sum()),
            planned_energy_kwh=energy,
            planned_power_kw=power,
            planned_degradation_kwh=z,
            objective=float(solution.objective),
            status=solution.status,
            planned_discharge_kw=dis,
            planned_charge_kw=ch,
            head_power_first_kw=float(x[self._cols["head"](0)] * s_base),
            network_loss_first_kw=float(loss0),
        )

    def _diagnose(
        self,
        problem: LpProblem,
        solution: LpSolution,
        e0_kwh: np.ndarray,
        forecasts: ForecastSet,
        capacities_kwh: np.ndarray | None,
    ) -> str:
        """On infeasibility, report whether robust tightening is the cause
        and which tightened blocks bind (helps sigma tuning)."""
        msg = [f"scheduler solve failed: {solution.status}."]
        relaxed = ForecastSet(
            pv_kw=forecasts.pv_kw,
            load_p_kw=forecasts.load_p_kw,
            load_q_kvar=forecasts.load_q_kvar,
            pv_sigma_kw=np.zeros_like(forecasts.pv_sigma_kw),
        )
        nominal_problem = self.build(e0_kwh, relaxed, capacities_kwh)
        nominal = solve_lp(nominal_problem)
        if not nominal.ok:
            msg.append("infeasible even at nominal forecasts")
            return " ".join(msg)
        ax = problem.ineq_matrix @ nominal.x
        bad = np.flatnonzero(
            (ax < problem.ineq_lower - 1e-9) | (ax > problem.ineq_upper + 1e-9)
        )
        tags: set[str] = set()
        for rec in self._ineq_recipes:
            if any(rec.rows.start <= r < rec.rows.stop for r in bad):
                tags.add(f"{rec.kind}[t={rec.period}]")
        msg.append("feasible at nominal forecasts; binding tightened rows: ")
        msg.append(", ".join(sorted(tags)) or "(none identified)")
        return " ".join(msg)


def build_horizon(
    lin: LinearizedGrid,
    devices: DeviceMap,
    batteries: list[BatteryParams],
    degradation: DegradationModel | None,
    e0_kwh: np.ndarray,
    forecasts: ForecastSet,
    horizon: int = 24,
    step_h: float = 1.0,
    energy_cost_eur_mwh: float = 100.0,
    degradation_cost_eur_kwh: float = 400.0,
    soe_floor_fraction: float = 0.0,
) -> tuple[HorizonScheduler, LpProblem]:
    """One-shot construction of the robust horizon problem."""
    builder = HorizonScheduler(
        lin,
        devices,
        batteries,
        degradation,
        horizon=horizon,
        step_h=step_h,
        energy_cost_eur_mwh=energy_cost_eur_mwh,
        degradation_cost_eur_kwh=degradation_cost_eur_kwh,
        soe_floor_fraction=soe_floor_fraction,
    )
    return builder, builder.build(e0_kwh, forecasts)
