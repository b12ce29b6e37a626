"""Luenberger observer for the hidden well split.

Battery management systems report only the total stored energy, but the
real-time dispatcher needs the split between the available and bound
wells.  The total-energy measurement leaves the imbalance mode
unobservable, yet that mode is itself stable (the system is detectable),
so a gain along the balanced direction places the observable pole without
touching the imbalance decay.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import SECONDS_PER_HOUR, continuous_well_matrix
from .params import BatteryParams, BatteryState


class ObserverDesignError(Exception):
    pass


@dataclass(frozen=True)
class ObserverGain:
    """Correction gain on the total-energy innovation, one entry per well."""

    gain: np.ndarray  # 2-vector, 1/s

    def error_matrix(self, params: BatteryParams) -> np.ndarray:
        a = continuous_well_matrix(params)
        return a - np.outer(self.gain, np.ones(2))

    def eigenvalues(self, params: BatteryParams) -> np.ndarray:
        return np.linalg.eigvals(self.error_matrix(params))


def design_observer_gain(params: BatteryParams, speedup: float = 5.0) -> ObserverGain:
    """Gain aligned with the balanced direction.

    This leaves the (stable) imbalance eigenvalue untouched and moves the
    integrating total-energy mode to ``speedup`` times the plant's
    relaxation rate.  Raises if the resulting error dynamics are not
    strictly stable.
    """
    if speedup <= 0:
        raise ObserverDesignError("speedup must be > 0")
    f = params.available_well_fraction
    plant_rate = params.recovery_rate_per_s / (f * (1.0 - f))  # |stable eigenvalue|
    beta = speedup * plant_rate
    gain = ObserverGain(gain=beta * np.array([f, 1.0 - f]))
    eig = gain.eigenvalues(params)
    if np.any(eig.real >= 0.0):
        raise ObserverDesignError(f"observer not stable: eigenvalues {eig}")
    return gain


def observer_time_constant_s(params: BatteryParams, gain: ObserverGain) -> float:
    """Slowest error mode of the observer (seconds)."""
    eig = gain.eigenvalues(params)
    return float(1.0 / np.min(-eig.real))


def observer_step(
    params: BatteryParams,
    gain: ObserverGain,
    estimate: BatteryState,
    stack_power_kw: float,
    measured_total_kwh: float,
    dt_s: float,
) -> BatteryState:
    """Advance the estimate over ``dt_s`` with constant inputs.

    ``stack_power_kw`` is the cell-side power (discharge positive); the
    measured total energy is clamped to [0, capacity] before use.  The
    update is the exact discretization of the observer ODE, so an exact
    estimate driven by exact measurements is a fixed point.
    """
    measured = min(max(measured_total_kwh, 0.0), params.capacity_kwh)
    a_cl = gain.error_matrix(params)
    # eigen-decomposition of the 2x2 closed-loop matrix (real, distinct)
    tr = a_cl[0, 0] + a_cl[1, 1]
    det = a_cl[0, 0] * a_cl[1, 1] - a_cl[0, 1] * a_cl[1, 0]
    disc = tr * tr - 4.0 * det
    if disc < 0:
        raise ObserverDesignError("complex observer eigenvalues; use a milder gain")
    root = math.sqrt(disc)
    lam1, lam2 = (tr + root) / 2.0, (tr - root) / 2.0
    if abs(lam1 - lam2) < 1e-15:
        raise ObserverDesignError("defective observer dynamics; adjust the speedup")
    ident = np.eye(2)
    p1 = (a_cl - lam2 * ident) / (lam1 - lam2)
    p2 = (a_cl - lam1 * ident) / (lam2 - lam1)

    def phi(lam: float) -> float:
        return math.exp(lam * dt_s)

    def integral(lam: float) -> float:
        if abs(lam) < 1e-18:
            return dt_s
        return (math.exp(lam * dt_s) - 1.0) / lam

    transition = phi(lam1) * p1 + phi(lam2) * p2
    int_matrix = integral(lam1) * p1 + integral(lam2) * p2
    # constant forcing: cell power into the available well (kWh/s) plus the
    # measurement feedback (gain is 1/s acting on a kWh measurement)
    u = np.array([-stack_power_kw / SECONDS_PER_HOUR, 0.0]) + gain.gain * measured
    x = np.array([estimate.available_kwh, estimate.bound_kwh])
    x_next = transition @ x + int_matrix @ u
    return BatteryState(available_kwh=float(x_next[0]), bound_kwh=float(x_next[1]))
