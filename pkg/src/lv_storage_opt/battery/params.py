"""Battery system parameters and the two-well energy state."""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass(frozen=True)
class InverterCurve:
    """Grid inverter efficiency eta(p) = p / (p + standby + quadratic * p^2).

    ``from_peak`` fits the two coefficients so the curve peaks at the given
    efficiency and loading fraction (defaults: 96.5% at 30% of rating),
    which reproduces the familiar shape of residential PV/battery
    inverters: poor at trickle power, best at partial load, a few percent
    down at rating.
    """

    standby_kw: float
    quadratic_per_kw: float

    @classmethod
    def from_peak(
        cls, p_rated_kw: float, peak_eta: float = 0.965, peak_fraction: float = 0.3
    ) -> "InverterCurve":
        if not (0 < peak_eta < 1):
            raise ValueError("peak efficiency must be in (0, 1)")
        root = (1.0 / peak_eta - 1.0) / 2.0
        p_star = peak_fraction * p_rated_kw
        return cls(standby_kw=root * p_star, quadratic_per_kw=root / p_star)

    def efficiency(self, p_kw: float) -> float:
        p = abs(p_kw)
        if p == 0.0:
            return 1.0  # idle convention: no standby draw modeled
        return p / (p + self.standby_kw + self.quadratic_per_kw * p * p)


@dataclass(frozen=True)
class BatteryParams:
    """Ratings and model constants for one battery system (Thevenin stack
    behind a grid inverter, two-well energy dynamics).

    ``eta_discharge``/``eta_charge`` are the fixed total system efficiencies
    used by the hourly (energy integrator) model; the real-time layers use
    the full nonlinear curve instead.
    """

    capacity_kwh: float = 20.0
    p_grid_max_kw: float = 10.0
    q_grid_max_kvar: float = 10.0
    s_max_kva: float = 10.0
    v_oc: float = 42.0
    resistance_ohm: float = 0.010
    eta_discharge: float = 0.91
    eta_charge: float = 0.91
    available_well_fraction: float = 0.8  # share of capacity in the fast well
    recovery_rate_per_s: float = 1e-3  # inverse diffusion time between wells
    inverter: InverterCurve = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.inverter is None:
            object.__setattr__(self, "inverter", InverterCurve.from_peak(self.p_grid_max_kw))
        if self.capacity_kwh <= 0:
            raise ValueError("capacity must be > 0")
        if not (0.0 < self.available_well_fraction < 1.0):
            raise ValueError("available well fraction must be in (0, 1)")
        if self.recovery_rate_per_s <= 0:
            raise ValueError("recovery rate must be > 0")
        if not (0 < self.eta_discharge <= 1 and 0 < self.eta_charge <= 1):
            raise ValueError("efficiencies must be in (0, 1]")
        # Thevenin discriminant must stay positive across the rated range,
        # otherwise the stack cannot physically source the rated power.
        p_worst_w = 1000.0 * self.p_stack_max_kw
        if self.v_oc**2 <= 4.0 * self.resistance_ohm * p_worst_w:
            raise ValueError(
                "open-circuit voltage too low for rated power: "
                f"v_oc^2 = {self.v_oc**2:.1f} <= 4*R*P = "
                f"{4.0 * self.resistance_ohm * p_worst_w:.1f}"
            )

    @property
    def p_stack_max_kw(self) -> float:
        """Stack-side power ceiling behind the inverter at worst efficiency."""
        return self.p_grid_max_kw / 0.85

    @property
    def available_well_kwh(self) -> float:
        return self.available_well_fraction * self.capacity_kwh

    @property
    def bound_well_kwh(self) -> float:
        return (1.0 - self.available_well_fraction) * self.capacity_kwh


@dataclass
class BatteryState:
    """Energy split between the directly usable well and the bound well."""

    available_kwh: float
    bound_kwh: float

    @property
    def total_kwh(self) -> float:
        return self.available_kwh + self.bound_kwh

    @classmethod
    def balanced(cls, params: BatteryParams, total_kwh: float) -> "BatteryState":
        """State with both wells at the same fill fraction."""
        if not (0.0 <= total_kwh <= params.capacity_kwh + 1e-9):
            raise ValueError("total energy outside capacity")
        f = params.available_well_fraction
        return cls(available_kwh=f * total_kwh, bound_kwh=(1.0 - f) * total_kwh)

    def check_bounds(self, params: BatteryParams, tol: float = 1e-9) -> None:
        if not (-tol <= self.available_kwh <= params.available_well_kwh + tol):
            raise WellBoundsError("available", self.available_kwh, params.available_well_kwh)
        if not (-tol <= self.bound_kwh <= params.bound_well_kwh + tol):
            raise WellBoundsError("bound", self.bound_kwh, params.bound_well_kwh)


class WellBoundsError(Exception):
    """A dynamics step drove one of the wells outside its capacity."""

    def __init__(self, well: str, value_kwh: float, limit_kwh: float):
        self.well = well
        self.value_kwh = value_kwh
        self.limit_kwh = limit_kwh
        super().__init__(
            f"{well} well at {value_kwh:.4f} kWh outside [0, {limit_kwh:.4f}] kWh"
        )


def specific_power_per_hour(params: BatteryParams, p_kw: float) -> float:
    """Power normalized by capacity: the C-rate axis of degradation maps."""
    return p_kw / params.capacity_kwh


def soe_fraction(params: BatteryParams, e_kwh: float) -> float:
    return e_kwh / params.capacity_kwh


def well_time_constant_s(params: BatteryParams) -> float:
    """Relaxation time of the inter-well imbalance mode."""
    f = params.available_well_fraction
    return f * (1.0 - f) / params.recovery_rate_per_s


def effective_params(params: BatteryParams, capacity_kwh: float) -> BatteryParams:
    """Copy with a derated capacity (aging feedback); ratings unchanged."""
    return BatteryParams(
        capacity_kwh=capacity_kwh,
        p_grid_max_kw=params.p_grid_max_kw,
        q_grid_max_kvar=params.q_grid_max_kvar,
        s_max_kva=params.s_max_kva,
        v_oc=params.v_oc,
        resistance_ohm=params.resistance_ohm,
        eta_discharge=params.eta_discharge,
        eta_charge=params.eta_charge,
        available_well_fraction=params.available_well_fraction,
        recovery_rate_per_s=params.recovery_rate_per_s,
        inverter=params.inverter,
    )


def table_defaults() -> BatteryParams:
    """The 10 kW / 20 kWh unit used by the bundled scenarios."""
    return BatteryParams()
