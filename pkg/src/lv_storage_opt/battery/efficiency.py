"""Stack and system efficiency curves and the loss bookkeeping conventions.

Sign convention for grid power ``p``: positive discharges to the grid,
negative charges from it.  ``system_losses(p)`` is always >= 0 and is 0 at
``p = 0`` (idle draws no standby power by convention).  The composition of
the Thevenin stack curve with the inverter curve is the nonconvex loss
characteristic the real-time dispatcher exploits.
"""

from __future__ import annotations

import math

from .params import BatteryParams


class PowerRangeError(Exception):
    """Requested power exceeds stack capability (negative discriminant)."""


def stack_efficiency(params: BatteryParams, p_bat_kw: float) -> float:
    """Thevenin stack efficiency at (stack) power magnitude |p_bat|.

    Charge and discharge are treated symmetrically, which is accurate to
    about 1% over the rated range when the open-circuit voltage dominates
    the resistive drop.
    """
    p_w = abs(p_bat_kw) * 1000.0
    disc = params.v_oc**2 - 4.0 * params.resistance_ohm * p_w
    if disc < 0.0:
        raise PowerRangeError(
            f"{p_bat_kw:.2f} kW exceeds stack capability "
            f"({params.v_oc**2 / (4000.0 * params.resistance_ohm):.2f} kW)"
        )
    return 1.0 - abs((params.v_oc - math.sqrt(disc)) / (2.0 * params.v_oc))


def exact_stack_efficiencies(params: BatteryParams, p_bat_kw: float) -> tuple[float, float]:
    """(discharge, charge) efficiencies without the symmetric approximation.

    Used to validate that the approximation error stays small; not used by
    the controllers.
    """
    p_w = abs(p_bat_kw) * 1000.0
    disc_dis = params.v_oc**2 - 4.0 * params.resistance_ohm * p_w
    if disc_dis < 0.0:
        raise PowerRangeError(f"{p_bat_kw:.2f} kW exceeds stack capability")
    i_dis = (params.v_oc - math.sqrt(disc_dis)) / (2.0 * params.resistance_ohm)
    eta_dis = 1.0 - params.resistance_ohm * i_dis / params.v_oc
    i_ch = (params.v_oc - math.sqrt(params.v_oc**2 + 4.0 * params.resistance_ohm * p_w)) / (
        2.0 * params.resistance_ohm
    )
    eta_ch = 1.0 + params.resistance_ohm * i_ch / (params.v_oc - params.resistance_ohm * i_ch)
    return eta_dis, eta_ch


def total_efficiency(params: BatteryParams, p_grid_kw: float) -> float:
    """Stack times inverter efficiency, both evaluated at the grid power."""
    return stack_efficiency(params, p_grid_kw) * params.inverter.efficiency(p_grid_kw)


def system_losses(params: BatteryParams, p_grid_kw: float) -> float:
    """Total battery system loss power (kW, >= 0) at grid power ``p``.

    Discharging: the cells must supply ``p / eta_tot``, so the loss is
    ``(1/eta_tot - 1) * p``.  Charging: only ``eta_tot * |p|`` reaches the
    cells, so the loss is ``(eta_tot - 1) * p`` (which is positive for
    ``p < 0``).
    """
    if p_grid_kw == 0.0:
        return 0.0
    if abs(p_grid_kw) > params.p_grid_max_kw * (1.0 + 1e-9):
        raise PowerRangeError(
            f"|{p_grid_kw:.2f}| kW exceeds grid power limit {params.p_grid_max_kw:.2f} kW"
        )
    eta = total_efficiency(params, p_grid_kw)
    if p_grid_kw > 0.0:
        return (1.0 / eta - 1.0) * p_grid_kw
    return (eta - 1.0) * p_grid_kw


def cell_power_kw(params: BatteryParams, p_grid_kw: float) -> float:
    """Power drawn from the energy wells (signed; positive depletes them)."""
    return p_grid_kw + system_losses(params, p_grid_kw)


def linearized_efficiencies(params: BatteryParams) -> tuple[float, float]:
    """Total (discharge, charge) efficiencies from linearizing the loss
    curve between zero and the rated powers, with the inverter averaged
    over its upper half range.

    These are the constants a planner would derive for the energy
    integrator model; the packaged defaults (0.91/0.91) are of this kind.
    """
    grid = params.p_grid_max_kw
    fractions = [0.5 + 0.5 * k / 10.0 for k in range(11)]
    eta_in_avg = sum(params.inverter.efficiency(f * grid) for f in fractions) / len(fractions)
    eta_dis = stack_efficiency(params, grid) * eta_in_avg
    eta_ch = stack_efficiency(params, grid) * eta_in_avg
    return eta_dis, eta_ch
