"""Energy dynamics: hourly integrator model and the two-well model.

The integrator model (``step_basic``) books grid energy against a fixed
pair of in/out efficiencies and is what the hourly scheduler can afford.
The two-well model adds the rate-capacity effect: only the available well
feeds the terminals, and the bound well exchanges energy with it at a
finite recovery rate, so sustained high power starves the available well
before the total energy is exhausted.  Both wells conserve energy exactly
(the internal transfer matrix has zero column sums).

Discretization is the exact closed-form matrix exponential of the 2x2
system, so step size never introduces artifacts in the 10-second loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .efficiency import cell_power_kw, system_losses
from .params import BatteryParams, BatteryState, WellBoundsError

SECONDS_PER_HOUR = 3600.0


def step_basic(
    e_kwh: float,
    p_dis_kw: float,
    p_ch_kw: float,
    dt_h: float,
    eta_dis: float,
    eta_ch: float,
) -> float:
    """Integrator model update; ``p_dis >= 0`` and ``p_ch <= 0`` are grid powers.

    The caller is responsible for keeping the result inside [0, capacity].
    """
    if p_dis_kw < -1e-12 or p_ch_kw > 1e-12:
        raise ValueError("discharge must be >= 0 and charge <= 0")
    return e_kwh + dt_h * (-p_dis_kw / eta_dis - eta_ch * p_ch_kw)


def continuous_well_matrix(params: BatteryParams) -> np.ndarray:
    """Inter-well transfer matrix A (1/s): columns sum to zero."""
    c_r = params.recovery_rate_per_s
    f = params.available_well_fraction
    return np.array(
        [
            [-c_r / f, c_r / (1.0 - f)],
            [c_r / f, -c_r / (1.0 - f)],
        ]
    )


@dataclass(frozen=True)
class WellDiscretization:
    """Exact discrete two-well dynamics over one fixed step.

    ``next = transition @ state + input_gain * cell_power_kw`` where the
    cell power is the signed drain on the wells in kW (discharge positive).
    """

    dt_s: float
    transition: np.ndarray  # 2x2
    input_gain: np.ndarray  # 2-vector, kWh per kW of cell power


def discretize_wells(params: BatteryParams, dt_s: float) -> WellDiscretization:
    """Closed-form exponential of the two-well system over ``dt_s`` seconds.

    The system has eigenvalue 0 along the balanced direction and one
    stable eigenvalue; both projectors are available analytically, so no
    numerical exponential is needed.
    """
    if dt_s <= 0:
        raise ValueError("dt must be > 0")
    f = params.available_well_fraction
    lam = -params.recovery_rate_per_s / (f * (1.0 - f))  # stable eigenvalue (1/s)
    # projector onto the balanced direction along the imbalance direction
    p0 = np.array([[f, f], [1.0 - f, 1.0 - f]])
    p1 = np.eye(2) - p0
    decay = math.exp(lam * dt_s)
    transition = p0 + decay * p1
    # integral of the exponential applied to the input direction [1, 0]
    int0 = dt_s  # for the zero eigenvalue
    int1 = (1.0 - decay) / (-lam)
    e_inp = np.array([1.0, 0.0])
    gain_s = int0 * (p0 @ e_inp) + int1 * (p1 @ e_inp)
    # cell power in kW applied for seconds -> kWh, drain is negative input
    input_gain = -gain_s / SECONDS_PER_HOUR
    return WellDiscretization(dt_s=dt_s, transition=transition, input_gain=input_gain)


def step_cell(
    params: BatteryParams,
    state: BatteryState,
    cell_kw: float,
    dt_s: float,
    disc: WellDiscretization | None = None,
    enforce_bounds: bool = True,
) -> BatteryState:
    """Advance the wells under a constant cell-side power draw.

    Raises :class:`WellBoundsError` naming the offending well if the end
    state leaves the admissible box (the dispatcher treats that as an
    infeasibility signal).
    """
    if disc is None or disc.dt_s != dt_s:
        disc = discretize_wells(params, dt_s)
    x = np.array([state.available_kwh, state.bound_kwh])
    x_next = disc.transition @ x + disc.input_gain * cell_kw
    new = BatteryState(available_kwh=float(x_next[0]), bound_kwh=float(x_next[1]))
    if enforce_bounds:
        new.check_bounds(params)
    return new


def step_extended(
    params: BatteryParams,
    state: BatteryState,
    p_dis_kw: float,
    p_ch_kw: float,
    dt_s: float,
    disc: WellDiscretization | None = None,
) -> BatteryState:
    """Two-well update driven by grid powers through the linearized
    in/out efficiencies (the planner's view of the extended model)."""
    if p_dis_kw < -1e-12 or p_ch_kw > 1e-12:
        raise ValueError("discharge must be >= 0 and charge <= 0")
    cell_kw = p_dis_kw / params.eta_discharge + params.eta_charge * p_ch_kw
    return step_cell(params, state, cell_kw, dt_s, disc=disc)


def step_plant(
    params: BatteryParams,
    state: BatteryState,
    p_grid_kw: float,
    dt_s: float,
    disc: WellDiscretization | None = None,
) -> tuple[BatteryState, float, float]:
    """Plant-truth update: nonlinear loss curve feeding the two-well model.

    Returns ``(state, realized_grid_kw, loss_kw)``.  If the requested power
    would overspill a well within the step, the battery management derates
    the power by bisection to the largest feasible magnitude.
    """

    def attempt(p: float) -> BatteryState | None:
        try:
            return step_cell(params, state, cell_power_kw(params, p), dt_s, disc=disc)
        except WellBoundsError:
            return None

    new = attempt(p_grid_kw)
    realized = p_grid_kw
    if new is None:
        lo, hi = 0.0, p_grid_kw
        new = attempt(0.0)
        if new is None:
            raise WellBoundsError("available", state.available_kwh, params.available_well_kwh)
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            candidate = attempt(mid)
            if candidate is None:
                hi = mid
            else:
                lo, new = mid, candidate
        realized = lo
    return new, realized, system_losses(params, realized)


def max_constant_power_basic(
    params: BatteryParams, e_kwh: float, duration_s: float, direction: str
) -> float:
    """Largest constant grid power magnitude the integrator model sustains."""
    dt_h = duration_s / SECONDS_PER_HOUR
    if direction == "discharge":
        return min(params.p_grid_max_kw, e_kwh * params.eta_discharge / dt_h)
    if direction == "charge":
        headroom = params.capacity_kwh - e_kwh
        return min(params.p_grid_max_kw, headroom / (params.eta_charge * dt_h))
    raise ValueError("direction must be 'discharge' or 'charge'")


def max_constant_power_extended(
    params: BatteryParams,
    e_kwh: float,
    duration_s: float,
    direction: str,
    substeps: int = 64,
) -> float:
    """Largest constant grid power the two-well model sustains from a
    balanced state, found by bisection on feasibility of the trajectory."""
    state0 = BatteryState.balanced(params, e_kwh)
    n = max(1, substeps)
    disc = discretize_wells(params, duration_s / n)

    def feasible(p_grid: float) -> bool:
        if direction == "discharge":
            dis, ch = p_grid, 0.0
        else:
            dis, ch = 0.0, -p_grid
        state = state0
        try:
            for _ in range(n):
                state = step_extended(params, state, dis, ch, disc.dt_s, disc=disc)
        except WellBoundsError:
            return False
        return True

    hi = params.p_grid_max_kw
    if feasible(hi):
        return hi
    lo = 0.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            lo = mid
        else:
            hi = mid
    return lo


def max_power_error(
    params: BatteryParams, e_kwh: float, duration_s: float, direction: str = "discharge"
) -> float:
    """Relative overestimate of the integrator model's maximum sustainable
    power versus the two-well model: (basic - extended) / basic."""
    if not (0.0 <= e_kwh <= params.capacity_kwh + 1e-9):
        raise ValueError("energy outside capacity")
    p_basic = max_constant_power_basic(params, e_kwh, duration_s, direction)
    if p_basic <= 0.0:
        return 0.0
    p_ext = min(
        p_basic, max_constant_power_extended(params, e_kwh, duration_s, direction)
    )
    return (p_basic - p_ext) / p_basic
