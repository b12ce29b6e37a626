"""Battery system models: efficiency, dynamics, aging, and state observer."""

from .degradation import (
    TECHNOLOGIES,
    DegradationMap,
    DegradationModel,
    convexify_map,
    generate_degradation_map,
    load_map,
    save_map,
    save_planes,
)
from .dynamics import (
    WellDiscretization,
    continuous_well_matrix,
    discretize_wells,
    max_power_error,
    step_basic,
    step_cell,
    step_extended,
    step_plant,
)
from .efficiency import (
    PowerRangeError,
    cell_power_kw,
    exact_stack_efficiencies,
    linearized_efficiencies,
    stack_efficiency,
    system_losses,
    total_efficiency,
)
from .observer import (
    ObserverDesignError,
    ObserverGain,
    design_observer_gain,
    observer_step,
    observer_time_constant_s,
)
from .params import (
    BatteryParams,
    BatteryState,
    InverterCurve,
    WellBoundsError,
    effective_params,
    table_defaults,
    well_time_constant_s,
)

__all__ = [
    "TECHNOLOGIES",
    "DegradationMap",
    "DegradationModel",
    "convexify_map",
    "generate_degradation_map",
    "load_map",
    "save_map",
    "save_planes",
    "WellDiscretization",
    "continuous_well_matrix",
    "discretize_wells",
    "max_power_error",
    "step_basic",
    "step_cell",
    "step_extended",
    "step_plant",
    "PowerRangeError",
    "cell_power_kw",
    "exact_stack_efficiencies",
    "linearized_efficiencies",
    "stack_efficiency",
    "system_losses",
    "total_efficiency",
    "ObserverDesignError",
    "ObserverGain",
    "design_observer_gain",
    "observer_step",
    "observer_time_constant_s",
    "BatteryParams",
    "BatteryState",
    "InverterCurve",
    "WellBoundsError",
    "effective_params",
    "table_defaults",
    "well_time_constant_s",
]
