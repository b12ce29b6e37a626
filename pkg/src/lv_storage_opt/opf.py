"""Single-period linearized OPF assembly and AC validation.

The dispatch LP shares one constraint kernel across the hourly scheduler
and the real-time controller: scalar active power balance, voltage
definition rows against the sensitivity model, loss epigraph pieces per
branch (active and reactive contributions), ranged branch-current rows,
ranged voltage-bound rows, and inscribed apparent-power polygons per
storage unit.  Every block carries a tag for auditability and, where its
bounds depend on the nodal loads, the sensitivity needed to tighten it
against PV forecast uncertainty.

Power quantities inside instances are per unit on the network base;
voltage rows are per unit magnitudes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .grid import DeviceMap, Network
from .lp import LpProblem, LpSolution, dump_problem, solve_lp
from .powerflow import FbsSolution, LinearizedGrid, fbs_solve, polygon_for_generator

Q_TIEBREAK_COST = 1e-6

# operational security margins: the controllers plan against slightly
# tightened limits so the linearization error cannot push the true AC state
# over the statutory band
DEFAULT_V_MARGIN_PU = 0.005
DEFAULT_I_MARGIN_FRACTION = 0.02


@dataclass
class OpfBlock:
    """One tagged group of constraint rows over an instance's variables.

    ``lower <= matrix @ x <= upper``; equality blocks have lower == upper.
    ``load_sens`` (rows x n_bus), when present, is the sensitivity of the
    row's bounds to the nodal active loads; robust tightening composes it
    with the PV incidence and forecast deviations.
    """

    tag: str
    matrix: sp.csr_matrix
    lower: np.ndarray
    upper: np.ndarray
    load_sens: sp.csr_matrix | None = None

    @property
    def n_rows(self) -> int:
        return self.matrix.shape[0]

    def is_equality(self) -> bool:
        return bool(np.all(np.isfinite(self.lower)) and np.all(self.lower == self.upper))


@dataclass
class OpfInstance:
    """Assembled dispatch problem with named variable ranges."""

    layout: dict[str, slice]
    n_var: int
    objective: np.ndarray
    blocks: list[OpfBlock]
    var_lower: np.ndarray
    var_upper: np.ndarray
    p_d: np.ndarray
    q_d: np.ndarray
    sos2_groups: dict[str, list[int]] = field(default_factory=dict)

    def check_layout(self) -> None:
        covered = np.zeros(self.n_var, dtype=bool)
        for name, sl in self.layout.items():
            segment = covered[sl]
            if segment.any():
                raise ValueError(f"layout range '{name}' overlaps another range")
            covered[sl] = True
        if not covered.all():
            raise ValueError("layout does not cover the decision vector")

    def rows(self) -> int:
        return sum(b.n_rows for b in self.blocks)

    def row_tags(self) -> list[str]:
        tags: list[str] = []
        for b in self.blocks:
            tags.extend([b.tag] * b.n_rows)
        return tags

    def to_lp_problem(self) -> LpProblem:
        eq_blocks = [b for b in self.blocks if b.is_equality()]
        ineq_blocks = [b for b in self.blocks if not b.is_equality()]
        eq_matrix = sp.vstack([b.matrix for b in eq_blocks], format="csr") if eq_blocks else None
        eq_rhs = np.concatenate([b.lower for b in eq_blocks]) if eq_blocks else None
        ineq_matrix = (
            sp.vstack([b.matrix for b in ineq_blocks], format="csr") if ineq_blocks else None
        )
        ineq_lower = np.concatenate([b.lower for b in ineq_blocks]) if ineq_blocks else None
        ineq_upper = np.concatenate([b.upper for b in ineq_blocks]) if ineq_blocks else None
        tags = [b.tag for b in ineq_blocks for _ in range(b.n_rows)]
        return LpProblem(
            objective=self.objective,
            ineq_matrix=ineq_matrix,
            ineq_lower=ineq_lower,
            ineq_upper=ineq_upper,
            eq_matrix=eq_matrix,
            eq_rhs=eq_rhs,
            var_lower=self.var_lower,
            var_upper=self.var_upper,
            sos2_groups=self.sos2_groups,
            row_tags=tags,
        )

    def dump(self) -> str:
        comments = ["dispatch instance"]
        for name, sl in sorted(self.layout.items(), key=lambda kv: kv[1].start):
            comments.append(f"var {name}: columns {sl.start}..{sl.stop - 1}")
        for b in self.blocks:
            comments.append(f"block {b.tag}: {b.n_rows} rows")
        return dump_problem(self.to_lp_problem(), comments=comments)


def _coo(rows, cols, vals, shape) -> sp.csr_matrix:
    return sp.csr_matrix((vals, (rows, cols)), shape=shape)


def emit_grid_blocks(
    lin: LinearizedGrid,
    devices: DeviceMap,
    p_d: np.ndarray,
    q_d: np.ndarray,
    inj_p: sp.csr_matrix,
    inj_q: sp.csr_matrix,
    loss_p_slice: slice,
    loss_q_slice: slice,
    v_slice: slice,
    n_var: int,
    v_margin: float = DEFAULT_V_MARGIN_PU,
    i_margin: float = DEFAULT_I_MARGIN_FRACTION,
) -> list[OpfBlock]:
    """Shared constraint kernel for one period.

    ``inj_p``/``inj_q`` map the decision vector to nodal generator
    injections (loads enter through ``p_d``/``q_d``).  The caller provides
    the variable ranges holding the per-branch loss variables and the
    voltage magnitudes.
    """
    net = lin.net
    n, n_l = net.n_bus, net.n_branch
    blocks: list[OpfBlock] = []

    # (balance) total generation covers load plus both loss vectors
    row = sp.csr_matrix(np.ones(n)) @ inj_p
    row = row.tolil()
    for j in range(n_l):
        row[0, loss_p_slice.start + j] -= 1.0
        row[0, loss_q_slice.start + j] -= 1.0
    rhs = np.array([p_d.sum()])
    blocks.append(
        OpfBlock(tag="balance", matrix=row.tocsr(), lower=rhs, upper=rhs)
    )

    # (voltage-def) v - B_v * injections = reference - B_v * loads
    bv_p = sp.csr_matrix(lin.voltage_sens[:, :n])
    bv_q = sp.csr_matrix(lin.voltage_sens[:, n:])
    v_select = _coo(range(n), range(v_slice.start, v_slice.stop), np.ones(n), (n, n_var))
    mat = v_select - bv_p @ inj_p - bv_q @ inj_q
    rhs = lin.reference_v - lin.voltage_sens[:, :n] @ p_d - lin.voltage_sens[:, n:] @ q_d
    blocks.append(OpfBlock(tag="voltage-def", matrix=mat.tocsr(), lower=rhs, upper=rhs))

    # (loss-active / loss-reactive) per-branch secant epigraph pieces
    br_p = sp.csr_matrix(lin.branch_sens_p)
    br_q = sp.csr_matrix(lin.branch_sens_q)
    for tag, br, inj, loads, loss_slice in (
        ("loss-active", br_p, inj_p, p_d, loss_p_slice),
        ("loss-reactive", br_q, inj_q, q_d, loss_q_slice),
    ):
        rows_m = []
        lows = []
        sens_rows = []
        flow_rows = br @ inj  # (n_l x n_var)
        for k in range(lin.pieces):
            slope = lin.loss_slope[:, k]
            sel = _coo(
                range(n_l), range(loss_slice.start, loss_slice.stop), np.ones(n_l), (n_l, n_var)
            )
            rows_m.append(sel - sp.diags(slope) @ flow_rows)
            lows.append(lin.loss_intercept[:, k] - slope * (br @ loads))
            sens_rows.append(sp.diags(slope) @ br)
        matrix = sp.vstack(rows_m, format="csr")
        lower = np.concatenate(lows)
        blocks.append(
            OpfBlock(
                tag=tag,
                matrix=matrix,
                lower=lower,
                upper=np.full(matrix.shape[0], np.inf),
                load_sens=sp.vstack(sens_rows, format="csr") if tag == "loss-active" else None,
            )
        )

    # (branch-limit) two-sided current rows around the load-driven flow
    i_cap = net.i_max_pu * (1.0 - i_margin)
    flow = br_p @ inj_p
    base_flow = lin.branch_sens_p @ p_d
    blocks.append(
        OpfBlock(
            tag="branch-limit",
            matrix=flow.tocsr(),
            lower=base_flow - i_cap,
            upper=base_flow + i_cap,
            load_sens=br_p,
        )
    )

    # (voltage-bound) statutory band shrunk by the security margin
    blocks.append(
        OpfBlock(
            tag="voltage-bound",
            matrix=v_select.tocsr(),
            lower=net.v_min + v_margin,
            upper=net.v_max - v_margin,
            load_sens=bv_p,
        )
    )
    return blocks


def emit_polygon_blocks(
    devices: DeviceMap,
    base_s_kva: float,
    p_cols: list[np.ndarray],
    q_cols: list[np.ndarray],
    n_var: int,
    edges: int = 6,
) -> list[OpfBlock]:
    """Apparent-power polygons for the storage units.

    ``p_cols[g]``/``q_cols[g]`` list the columns contributing to unit g's
    active and reactive power (single column or discharge/charge split).
    The feeder head has no capability polygon (its limits are box bounds).
    """
    storage = devices.storage
    rows = []
    lows = []
    highs = []
    for g, gen in enumerate(storage):
        poly = polygon_for_generator(gen, edges)
        s_max = gen.s_max_kva / base_s_kva
        for sign in (+1.0, -1.0):
            cols = np.concatenate([p_cols[g], q_cols[g]])
            vals = np.concatenate(
                [np.ones(len(p_cols[g])), sign * poly.sum_coef * np.ones(len(q_cols[g]))]
            )
            rows.append(_coo(np.zeros(len(cols), dtype=int), cols, vals, (1, n_var)))
            lows.append(-s_max)
            highs.append(s_max)
    if not rows:
        return []
    return [
        OpfBlock(
            tag="apparent-power",
            matrix=sp.vstack(rows, format="csr"),
            lower=np.asarray(lows),
            upper=np.asarray(highs),
        )
    ]


def reactive_cap_pu(gen, base_s_kva: float, edges: int = 6) -> float:
    """Variable-bound reactive cap from the unit's polygon (per unit)."""
    poly = polygon_for_generator(gen, edges)
    return poly.q_cap * gen.s_max_kva / base_s_kva


def assemble(
    lin: LinearizedGrid,
    devices: DeviceMap,
    p_d: np.ndarray,
    q_d: np.ndarray,
    costs: np.ndarray,
    v_margin: float = DEFAULT_V_MARGIN_PU,
    i_margin: float = DEFAULT_I_MARGIN_FRACTION,
) -> OpfInstance:
    """Single-period dispatch LP over [p_gen, q_storage+/-, losses, v].

    ``costs`` prices the active generator powers (feeder head first, then
    the storage units, matching ``devices.generators`` order).
    """
    net = lin.net
    n, n_l = net.n_bus, net.n_branch
    n_g = devices.n_gen
    n_s = len(devices.storage)
    if costs.shape != (n_g,):
        raise ValueError(f"cost vector must have shape ({n_g},)")
    if p_d.shape != (n,) or q_d.shape != (n,):
        raise ValueError("load vectors must match the bus count")

    layout = {}
    cursor = 0

    def add(name: str, count: int) -> slice:
        nonlocal cursor
        sl = slice(cursor, cursor + count)
        layout[name] = sl
        cursor += count
        return sl

    sl_pgen = add("p_gen", n_g)
    sl_qpos = add("q_pos", n_s)
    sl_qneg = add("q_neg", n_s)
    sl_lossp = add("loss_p", n_l)
    sl_lossq = add("loss_q", n_l)
    sl_v = add("v", n)
    n_var = cursor

    c_g = devices.gen_incidence()
    bus_of_gen = np.argmax(c_g, axis=0)
    storage_idx = [k for k, g in enumerate(devices.generators) if not g.is_slack]

    inj_p = _coo(bus_of_gen, range(sl_pgen.start, sl_pgen.stop), np.ones(n_g), (n, n_var))
    qa_rows = [bus_of_gen[k] for k in storage_idx]
    inj_q = _coo(
        np.concatenate([qa_rows, qa_rows]),
        np.concatenate(
            [range(sl_qpos.start, sl_qpos.stop), range(sl_qneg.start, sl_qneg.stop)]
        ),
        np.ones(2 * n_s),
        (n, n_var),
    )

    blocks = emit_grid_blocks(
        lin, devices, p_d, q_d, inj_p, inj_q, sl_lossp, sl_lossq, sl_v, n_var,
        v_margin=v_margin, i_margin=i_margin,
    )
    p_cols = [np.array([sl_pgen.start + k]) for k in storage_idx]
    q_cols = [
        np.array([sl_qpos.start + g, sl_qneg.start + g]) for g in range(n_s)
    ]
    blocks += emit_polygon_blocks(devices, net.base.s_kva, p_cols, q_cols, n_var)

    lb = np.full(n_var, -np.inf)
    ub = np.full(n_var, np.inf)
    for k, gen in enumerate(devices.generators):
        lb[sl_pgen.start + k] = gen.p_min_kw / net.base.s_kva
        ub[sl_pgen.start + k] = gen.p_max_kw / net.base.s_kva
    for g, gen in enumerate(devices.storage):
        cap = reactive_cap_pu(gen, net.base.s_kva)
        lb[sl_qpos.start + g] = 0.0
        ub[sl_qpos.start + g] = cap
        lb[sl_qneg.start + g] = -cap
        ub[sl_qneg.start + g] = 0.0
    lb[sl_lossp] = 0.0
    lb[sl_lossq] = 0.0

    objective = np.zeros(n_var)
    objective[sl_pgen] = costs
    # deterministic reactive tie-break: minimize |q| at negligible cost
    objective[sl_qpos] = Q_TIEBREAK_COST
    objective[sl_qneg] = -Q_TIEBREAK_COST

    inst = OpfInstance(
        layout=layout,
        n_var=n_var,
        objective=objective,
        blocks=blocks,
        var_lower=lb,
        var_upper=ub,
        p_d=p_d.copy(),
        q_d=q_d.copy(),
    )
    inst.check_layout()
    return inst


def solve_instance(inst: OpfInstance) -> LpSolution:
    return solve_lp(inst.to_lp_problem())


@dataclass
class AcValidationReport:
    voltage_mae_pu: float
    angle_mae_deg: float
    v_margin_pu: float  # worst-case distance to the statutory band (>=0 ok)
    i_margin_pu: float
    violations: list[str]
    fbs: FbsSolution

    @property
    def feasible(self) -> bool:
        return not self.violations


def validate_against_ac(
    inst: OpfInstance,
    solution: LpSolution,
    lin: LinearizedGrid,
    devices: DeviceMap,
) -> AcValidationReport:
    """Fix the optimized injections, run the nonlinear sweep, and compare.

    Reports the voltage/angle mean absolute errors of the linear model,
    worst-case margins to the statutory limits, and any true violations.
    """
    if not solution.ok and solution.x is None:
        raise ValueError("needs a solution with a decision vector")
    net = lin.net
    x = solution.x
    sl_pgen = inst.layout["p_gen"]
    sl_qpos = inst.layout["q_pos"]
    sl_qneg = inst.layout["q_neg"]
    sl_v = inst.layout["v"]

    c_g = devices.gen_incidence()
    p_gen = x[sl_pgen]
    q_sto = x[sl_qpos] + x[sl_qneg]
    storage_idx = [k for k, g in enumerate(devices.generators) if not g.is_slack]
    q_gen = np.zeros(devices.n_gen)
    q_gen[storage_idx] = q_sto
    # feeder-head power is supplied by the slack bus itself in the sweep
    p_gen_fixed = p_gen.copy()
    for k, g in enumerate(devices.generators):
        if g.is_slack:
            p_gen_fixed[k] = 0.0
    loads_p = inst.p_d - c_g @ p_gen_fixed
    loads_q = inst.q_d - c_g @ q_gen

    fbs = fbs_solve(net, loads_p, loads_q, tol=1e-12)
    inj_p = c_g @ p_gen_fixed - inst.p_d
    inj_q = c_g @ q_gen - inst.q_d
    angle_pred = lin.predict_angle_deg(inj_p, inj_q)

    v_lp = x[sl_v]
    voltage_mae = float(np.mean(np.abs(v_lp - fbs.v_mag)))
    angle_mae = float(np.mean(np.abs(angle_pred - fbs.v_angle_deg)))

    v_low = fbs.v_mag - net.v_min
    v_high = net.v_max - fbs.v_mag
    i_head = net.i_max_pu - np.abs(fbs.i_branch)
    violations = []
    for i in np.flatnonzero(v_low < 0):
        violations.append(f"bus {net.buses[int(i)].id}: |V| {fbs.v_mag[i]:.4f} under limit")
    for i in np.flatnonzero(v_high < 0):
        violations.append(f"bus {net.buses[int(i)].id}: |V| {fbs.v_mag[i]:.4f} over limit")
    for j in np.flatnonzero(i_head < 0):
        br = net.branches[int(j)]
        violations.append(
            f"branch {br.from_bus}-{br.to_bus}: |I| {abs(fbs.i_branch[j]):.4f} over limit"
        )
    return AcValidationReport(
        voltage_mae_pu=voltage_mae,
        angle_mae_deg=angle_mae,
        v_margin_pu=float(min(v_low.min(), v_high.min())),
        i_margin_pu=float(i_head.min()),
        violations=violations,
        fbs=fbs,
    )
