"""Optimal operation of distributed battery storage in radial LV feeders.

The package splits into a grid layer (network model, AC power flow,
linearization), an optimization layer (LP/SOS2 solver interface, OPF
assembly), the battery models, the two controllers (hourly robust
scheduler and 10-second real-time dispatcher), and a closed-loop
simulation harness.
"""

__version__ = "0.1.0"

from . import battery, grid, lp, opf, powerflow, rt, scheduler, sim

__all__ = [
    "battery",
    "grid",
    "lp",
    "opf",
    "powerflow",
    "rt",
    "scheduler",
    "sim",
    "__version__",
]
