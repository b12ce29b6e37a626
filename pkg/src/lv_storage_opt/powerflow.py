"""AC power flow on radial feeders and its linearization.

``fbs_solve`` is the nonlinear truth model: a forward-backward sweep that
accumulates branch currents from the leaves and propagates voltages from
the slack until the voltage update stalls below tolerance.

``linearize`` turns a validated network into the sensitivity blocks used by
the LP dispatch problems: voltage and angle sensitivities to nodal P/Q
injections, branch-current sensitivities, secant epigraph pieces for the
quadratic branch losses, and inscribed polygons for apparent-power limits.
All sensitivities are central finite differences of the sweep solution
around the flat (zero-injection) operating point, so the linear model is
reproducible from the nonlinear solver alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grid import DeviceMap, Generator, Network, per_unit


class PowerFlowError(Exception):
    pass


class PowerFlowDivergence(PowerFlowError):
    """Sweep failed to converge (extreme loading or infeasible operating point)."""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


@dataclass
class FbsSolution:
    """Converged sweep result.

    Voltages are complex per unit aligned with ``Network.buses``; branch
    currents are complex per unit in the parent->child direction.
    """

    v_complex: np.ndarray
    i_branch: np.ndarray
    losses_pu: float
    iterations: int
    residual: float

    @property
    def v_mag(self) -> np.ndarray:
        return np.abs(self.v_complex)

    @property
    def v_angle_deg(self) -> np.ndarray:
        return np.degrees(np.angle(self.v_complex))


def fbs_solve(
    net: Network,
    p_d_pu: np.ndarray,
    q_d_pu: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 100,
) -> FbsSolution:
    """Solve the AC power flow; ``p_d``/``q_d`` are nodal loads (consumption > 0).

    The slack bus entry of the load vectors is ignored: the slack supplies
    whatever balances the feeder at fixed voltage.
    """
    if tol <= 0:
        raise ValueError("tol must be > 0")
    p_d = np.asarray(p_d_pu, dtype=float)
    q_d = np.asarray(q_d_pu, dtype=float)
    n = net.n_bus
    if p_d.shape != (n,) or q_d.shape != (n,):
        raise ValueError(f"load vectors must have shape ({n},)")

    s_load = p_d + 1j * q_d
    v = np.full(n, net.slack_v_pu, dtype=complex)
    z = net.r_pu + 1j * net.x_pu
    order = net.branch_order
    reverse = order[::-1]
    frm, to = net.branch_from, net.branch_to

    i_branch = np.zeros(net.n_branch, dtype=complex)
    residual = math.inf
    for iteration in range(1, max_iter + 1):
        # backward: nodal demand currents, then accumulate toward the root
        i_node = np.conj(s_load / v)
        i_node[0] = 0.0
        i_branch[:] = 0.0
        subtree = i_node.copy()
        for j in reverse:
            i_branch[j] = subtree[to[j]]
            subtree[frm[j]] += i_branch[j]
        # forward: voltage drops from the slack outward
        v_new = v.copy()
        v_new[0] = net.slack_v_pu
        for j in order:
            v_new[to[j]] = v_new[frm[j]] - z[j] * i_branch[j]
        residual = float(np.max(np.abs(v_new - v)))
        v = v_new
        if residual < tol:
            losses = float(np.sum(net.r_pu * np.abs(i_branch) ** 2))
            return FbsSolution(
                v_complex=v,
                i_branch=i_branch,
                losses_pu=losses,
                iterations=iteration,
                residual=residual,
            )
    raise PowerFlowDivergence(
        f"no convergence after {max_iter} sweeps (residual {residual:.3e})",
        residual=residual,
        iterations=max_iter,
    )


@dataclass(frozen=True)
class PolygonCoefficients:
    """Linear apparent-power capability region for one generator.

    The feasible set is ``|p + sum_coef * q| <= s_max``,
    ``|p - sum_coef * q| <= s_max`` and ``|q| <= q_cap * s_max`` (plus the
    generator's own active-power bounds).  Every vertex of the polygon lies
    on the limiting circle, so the region never overstates capability.
    """

    sum_coef: float
    q_cap: float

    def contains(self, p: float, q: float, s_max: float, tol: float = 1e-9) -> bool:
        return (
            abs(p + self.sum_coef * q) <= s_max + tol
            and abs(p - self.sum_coef * q) <= s_max + tol
            and abs(q) <= self.q_cap * s_max + tol
        )


def build_polygon(kind: str, s_max: float, edges: int = 6) -> PolygonCoefficients:
    """Inscribed capability polygon for a circular or cos-phi bounded unit.

    ``kind='circular'``: for ``edges >= 6`` the regular hexagon with two
    vertices at (+-s_max, 0) and four on the circle at +-60 degrees; for
    ``edges`` in {4, 5} the inscribed diamond.  The constraint family (two
    chord pairs through (+-s_max, 0) plus a reactive cap) cannot express
    more than six distinct edges, so requests beyond six saturate there.

    ``kind='cosphi'``: reactive band |q| <= sin(acos(pf)) * s_max closed by
    the chords from (s_max, 0) to the power-factor limit points on the
    circle.  Near rated power this rejects any operating point whose
    q/p ratio exceeds tan(acos(pf)).
    """
    if s_max <= 0:
        raise ValueError("s_max must be > 0")
    if edges < 4:
        raise ValueError("edges must be >= 4")
    if kind == "circular":
        if edges < 6:
            return PolygonCoefficients(sum_coef=1.0, q_cap=1.0)
        return PolygonCoefficients(
            sum_coef=math.tan(math.pi / 6.0), q_cap=math.cos(math.pi / 6.0)
        )
    if kind == "cosphi":
        raise ValueError("cosphi polygon needs a power factor; use build_cosphi_polygon")
    raise ValueError(f"unknown region kind '{kind}'")


def build_cosphi_polygon(power_factor: float, s_max: float) -> PolygonCoefficients:
    if not (0.0 < power_factor < 1.0):
        raise ValueError("power factor must be in (0, 1)")
    if s_max <= 0:
        raise ValueError("s_max must be > 0")
    phi = math.acos(power_factor)
    return PolygonCoefficients(sum_coef=math.tan(phi / 2.0), q_cap=math.sin(phi))


def polygon_for_generator(gen: Generator, edges: int = 6) -> PolygonCoefficients:
    if gen.region == "cosphi":
        return build_cosphi_polygon(gen.power_factor, gen.s_max_kva)
    return build_polygon("circular", gen.s_max_kva, edges)


@dataclass
class LinearizedGrid:
    """Sensitivity blocks of the sweep solution around the flat start.

    ``voltage_sens``/``angle_sens`` map stacked nodal (P, Q) injection
    deviations (generation minus load, per unit) to voltage magnitude (pu)
    and angle (degrees) deviations from the reference.  ``branch_sens_p``
    maps nodal P injections to the in-phase branch current component;
    ``branch_sens_q`` maps nodal Q injections to the quadrature component.

    The loss model keeps, per branch, ``pieces`` secant segments of the
    quadratic R*i^2 curve sampled across the branch ampacity.  Each segment
    touches the true curve at its two support currents and the pointwise
    maximum over segments reproduces the curve exactly at every support
    point, overshooting between supports by at most R*h^2/4 for support
    spacing h (conservative for dispatch).  A support point is always
    placed at zero current so an unloaded feeder carries zero modeled loss.
    """

    net: Network
    reference_v: np.ndarray
    voltage_sens: np.ndarray
    angle_sens: np.ndarray
    branch_sens_p: np.ndarray
    branch_sens_q: np.ndarray
    loss_support_current: np.ndarray  # (n_branch, pieces + 1)
    loss_slope: np.ndarray  # (n_branch, pieces)
    loss_intercept: np.ndarray  # (n_branch, pieces)
    fd_step: float
    pieces: int = field(default=6)

    @property
    def n_bus(self) -> int:
        return self.net.n_bus

    @property
    def n_branch(self) -> int:
        return self.net.n_branch

    def predict_voltage(self, p_inj: np.ndarray, q_inj: np.ndarray) -> np.ndarray:
        dev = np.concatenate([p_inj, q_inj])
        return self.reference_v + self.voltage_sens @ dev

    def predict_angle_deg(self, p_inj: np.ndarray, q_inj: np.ndarray) -> np.ndarray:
        dev = np.concatenate([p_inj, q_inj])
        return self.angle_sens @ dev

    def predict_branch_current(self, p_inj: np.ndarray) -> np.ndarray:
        return self.branch_sens_p @ p_inj

    def piece_loss(self, branch: int, current: float) -> float:
        """Pointwise maximum over this branch's loss segments at ``current``."""
        vals = self.loss_slope[branch] * current + self.loss_intercept[branch]
        return float(np.max(vals))


def _loss_pieces(r_pu: float, i_max: float, pieces: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # Even piece count keeps a support at zero current; secants of a convex
    # curve meet it exactly at the supports.
    supports = np.linspace(-i_max, i_max, pieces + 1)
    lo, hi = supports[:-1], supports[1:]
    slopes = r_pu * (lo + hi)
    intercepts = -r_pu * lo * hi
    return supports, slopes, intercepts


def linearize(
    net: Network,
    reference: FbsSolution | None = None,
    pieces: int = 6,
    fd_step: float = 1e-4,
    tol: float = 1e-12,
) -> LinearizedGrid:
    """Build the linear grid model by probing ``fbs_solve`` around flat start.

    ``pieces`` must be even and >= 2 so the loss supports include zero
    current.  ``fd_step`` is the central-difference probe size in per unit.
    """
    if pieces < 2 or pieces % 2 != 0:
        raise ValueError("pieces must be an even count >= 2")
    if fd_step <= 0:
        raise ValueError("fd_step must be > 0")

    n, n_l = net.n_bus, net.n_branch
    zero = np.zeros(n)
    if reference is None:
        reference = fbs_solve(net, zero, zero, tol=tol)
    if reference.residual > 1e-8:
        raise PowerFlowError("reference solution is not converged")

    v_ref = reference.v_mag
    voltage_sens = np.zeros((n, 2 * n))
    angle_sens = np.zeros((n, 2 * n))
    branch_sens_p = np.zeros((n_l, n))
    branch_sens_q = np.zeros((n_l, n))

    def probe(bus: int, reactive: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        p = zero.copy()
        q = zero.copy()
        target = q if reactive else p
        # injection = -load
        target[bus] = -fd_step
        plus = fbs_solve(net, p, q, tol=tol)
        target[bus] = fd_step
        minus = fbs_solve(net, p, q, tol=tol)
        dv = (plus.v_mag - minus.v_mag) / (2 * fd_step)
        da = (plus.v_angle_deg - minus.v_angle_deg) / (2 * fd_step)
        di = (plus.i_branch - minus.i_branch) / (2 * fd_step)
        return dv, da, di

    for bus in range(1, n):
        dv, da, di = probe(bus, reactive=False)
        voltage_sens[:, bus] = dv
        angle_sens[:, bus] = da
        branch_sens_p[:, bus] = di.real
        dv, da, di = probe(bus, reactive=True)
        voltage_sens[:, n + bus] = dv
        angle_sens[:, n + bus] = da
        branch_sens_q[:, bus] = di.imag

    for label, block in (("voltage", voltage_sens), ("branch current", branch_sens_p)):
        if not np.all(np.isfinite(block)):
            bad = np.argwhere(~np.isfinite(block))[0]
            raise PowerFlowError(
                f"singular {label} sensitivity at bus {net.buses[int(bad[0])].id}"
            )

    supports = np.zeros((n_l, pieces + 1))
    slopes = np.zeros((n_l, pieces))
    intercepts = np.zeros((n_l, pieces))
    for j in range(n_l):
        supports[j], slopes[j], intercepts[j] = _loss_pieces(
            net.r_pu[j], net.i_max_pu[j], pieces
        )

    return LinearizedGrid(
        net=net,
        reference_v=v_ref,
        voltage_sens=voltage_sens,
        angle_sens=angle_sens,
        branch_sens_p=branch_sens_p,
        branch_sens_q=branch_sens_q,
        loss_support_current=supports,
        loss_slope=slopes,
        loss_intercept=intercepts,
        fd_step=fd_step,
        pieces=pieces,
    )


def nodal_loads_kw(
    net: Network,
    devices: DeviceMap,
    pv_kw: np.ndarray,
    load_p_kw: np.ndarray,
    load_q_kvar: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Net nodal load vectors in per unit: household load minus PV infeed."""
    c_pv = devices.pv_incidence()
    p_d = (np.asarray(load_p_kw) - c_pv @ np.asarray(pv_kw)) / net.base.s_kva
    q_d = np.asarray(load_q_kvar) / net.base.s_kva
    return p_d, q_d
