"""Radial low-voltage network description, validation, and per-unit helpers.

A grid file is a JSON document (``format_version`` 1) with per-unit bases,
a slack bus, load buses with voltage limits, branches with per-unit
impedances and ampacities, controllable generators (the feeder head plus
the storage units), and PV units.  Everything downstream of this module
(power flow, OPF assembly, controllers) assumes the network has already
been validated here.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

GRID_FORMAT_VERSION = 1

# LV feeders are resistive; below this R/X ratio the linearization quality
# degrades, so we warn but do not reject.
MIN_RX_RATIO = 2.0


class GridError(Exception):
    """Base class for grid file problems."""


class GridFormatError(GridError):
    """The file does not parse against the documented schema."""


class GridValidationError(GridError):
    """The parsed network violates a structural invariant."""


@dataclass(frozen=True)
class PerUnitBase:
    """Per-unit bases: three-phase apparent power in kVA and line voltage in V."""

    s_kva: float = 100.0
    v_ll_v: float = 400.0

    @property
    def z_ohm(self) -> float:
        return (self.v_ll_v / 1000.0) ** 2 / (self.s_kva / 1000.0)

    @property
    def i_a(self) -> float:
        return self.s_kva * 1000.0 / (math.sqrt(3.0) * self.v_ll_v)


@dataclass(frozen=True)
class Bus:
    id: str
    v_min: float
    v_max: float


@dataclass(frozen=True)
class Branch:
    from_bus: str
    to_bus: str
    r_pu: float
    x_pu: float
    i_max_pu: float


@dataclass(frozen=True)
class Generator:
    """Controllable generator: the feeder head or one battery system."""

    id: str
    bus: str
    p_min_kw: float
    p_max_kw: float
    s_max_kva: float
    region: str = "circular"  # "circular" or "cosphi"
    power_factor: float = 0.9
    is_slack: bool = False


@dataclass(frozen=True)
class PvUnit:
    id: str
    bus: str
    p_max_kw: float


@dataclass
class Network:
    """Validated radial network rooted at the slack bus.

    Bus 0 in all index-based arrays is the slack.  Branches are oriented
    parent -> child after validation;``branch_order`` lists branch indices
    so that every parent branch precedes its children (topological order
    from the root).
    """

    buses: list[Bus]
    branches: list[Branch]
    slack_bus: str
    slack_v_pu: float
    base: PerUnitBase

    bus_index: dict[str, int] = field(init=False, repr=False)
    parent_branch: np.ndarray = field(init=False, repr=False)
    branch_from: np.ndarray = field(init=False, repr=False)
    branch_to: np.ndarray = field(init=False, repr=False)
    branch_order: np.ndarray = field(init=False, repr=False)
    r_pu: np.ndarray = field(init=False, repr=False)
    x_pu: np.ndarray = field(init=False, repr=False)
    i_max_pu: np.ndarray = field(init=False, repr=False)
    v_min: np.ndarray = field(init=False, repr=False)
    v_max: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._validate_and_orient()

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    def _validate_and_orient(self) -> None:
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise GridValidationError(f"duplicate bus id(s): {dup}")
        if self.slack_bus not in ids:
            raise GridValidationError(f"slack bus '{self.slack_bus}' not in bus list")

        # slack first, remaining buses in file order
        order = [self.slack_bus] + [i for i in ids if i != self.slack_bus]
        self.buses = sorted(self.buses, key=lambda b: order.index(b.id))
        self.bus_index = {b.id: k for k, b in enumerate(self.buses)}

        n, n_l = self.n_bus, self.n_branch
        if n_l != n - 1:
            raise GridValidationError(
                f"not radial: {n_l} branches for {n} buses (need n-1 = {n - 1})"
            )

        adjacency: dict[int, list[tuple[int, int]]] = {k: [] for k in range(n)}
        for j, br in enumerate(self.branches):
            for end in (br.from_bus, br.to_bus):
                if end not in self.bus_index:
                    raise GridValidationError(f"branch {j} references unknown bus '{end}'")
            if br.r_pu <= 0.0:
                raise GridValidationError(
                    f"branch {br.from_bus}-{br.to_bus}: resistance must be > 0"
                )
            if br.i_max_pu <= 0.0:
                raise GridValidationError(
                    f"branch {br.from_bus}-{br.to_bus}: ampacity must be > 0"
                )
            if br.x_pu > 0 and br.r_pu / br.x_pu < MIN_RX_RATIO:
                warnings.warn(
                    f"branch {br.from_bus}-{br.to_bus}: R/X = {br.r_pu / br.x_pu:.2f} "
                    f"< {MIN_RX_RATIO}; linearization accuracy may suffer",
                    stacklevel=3,
                )
            a, b = self.bus_index[br.from_bus], self.bus_index[br.to_bus]
            adjacency[a].append((b, j))
            adjacency[b].append((a, j))

        # BFS from the slack: orients branches and detects cycles/disconnection.
        parent_branch = np.full(n, -1, dtype=int)
        branch_from = np.zeros(n_l, dtype=int)
        branch_to = np.zeros(n_l, dtype=int)
        seen_branch = np.zeros(n_l, dtype=bool)
        visited = np.zeros(n, dtype=bool)
        visited[0] = True
        queue = [0]
        topo: list[int] = []
        while queue:
            u = queue.pop(0)
            for v, j in adjacency[u]:
                if seen_branch[j]:
                    continue
                seen_branch[j] = True
                if visited[v]:
                    raise GridValidationError(
                        f"not radial: branch {self.branches[j].from_bus}-"
                        f"{self.branches[j].to_bus} closes a cycle"
                    )
                visited[v] = True
                parent_branch[v] = j
                branch_from[j] = u
                branch_to[j] = v
                topo.append(j)
                queue.append(v)
        if not visited.all():
            missing = [self.buses[k].id for k in np.flatnonzero(~visited)]
            raise GridValidationError(f"disconnected bus(es): {missing}")

        for b in self.buses:
            if not (0.0 < b.v_min < b.v_max):
                raise GridValidationError(
                    f"bus {b.id}: need 0 < v_min < v_max, got [{b.v_min}, {b.v_max}]"
                )

        self.parent_branch = parent_branch
        self.branch_from = branch_from
        self.branch_to = branch_to
        self.branch_order = np.asarray(topo, dtype=int)
        self.r_pu = np.array([br.r_pu for br in self.branches])
        self.x_pu = np.array([br.x_pu for br in self.branches])
        self.i_max_pu = np.array([br.i_max_pu for br in self.branches])
        self.v_min = np.array([b.v_min for b in self.buses])
        self.v_max = np.array([b.v_max for b in self.buses])


@dataclass
class DeviceMap:
    """Controllable generators and PV units attached to network buses."""

    generators: list[Generator]
    pv_units: list[PvUnit]
    _net: Network = field(repr=False)

    def __post_init__(self) -> None:
        for g in self.generators:
            if g.bus not in self._net.bus_index:
                raise GridValidationError(f"generator {g.id}: unknown bus '{g.bus}'")
            if g.p_min_kw > g.p_max_kw:
                raise GridValidationError(f"generator {g.id}: p_min > p_max")
            if g.s_max_kva <= 0:
                raise GridValidationError(f"generator {g.id}: s_max must be > 0")
            if g.region not in ("circular", "cosphi"):
                raise GridValidationError(f"generator {g.id}: unknown region '{g.region}'")
        for u in self.pv_units:
            if u.bus not in self._net.bus_index:
                raise GridValidationError(f"pv unit {u.id}: unknown bus '{u.bus}'")
        slack_gens = [g for g in self.generators if g.is_slack]
        if len(slack_gens) != 1:
            raise GridValidationError("exactly one generator must be marked as the feeder head")
        if slack_gens[0].bus != self._net.slack_bus:
            raise GridValidationError("feeder-head generator must sit on the slack bus")

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    @property
    def n_pv(self) -> int:
        return len(self.pv_units)

    @property
    def storage(self) -> list[Generator]:
        return [g for g in self.generators if not g.is_slack]

    def gen_incidence(self) -> np.ndarray:
        """Bus-by-generator 0/1 incidence (one nonzero per column)."""
        m = np.zeros((self._net.n_bus, self.n_gen))
        for k, g in enumerate(self.generators):
            m[self._net.bus_index[g.bus], k] = 1.0
        return m

    def pv_incidence(self) -> np.ndarray:
        m = np.zeros((self._net.n_bus, self.n_pv))
        for k, u in enumerate(self.pv_units):
            m[self._net.bus_index[u.bus], k] = 1.0
        return m


def per_unit(value_kw: float, base: PerUnitBase) -> float:
    """Convert a physical power (kW or kVA or kVar) to per unit."""
    if base.s_kva <= 0:
        raise ValueError("base power must be > 0")
    return value_kw / base.s_kva


def from_per_unit(value_pu: float, base: PerUnitBase) -> float:
    """Inverse of :func:`per_unit`; round trip is exact up to fp rounding."""
    if base.s_kva <= 0:
        raise ValueError("base power must be > 0")
    return value_pu * base.s_kva


def load_network(path: str | Path) -> tuple[Network, DeviceMap]:
    """Parse and validate a grid file; returns the network and its devices.

    Raises :class:`GridFormatError` on malformed input and
    :class:`GridValidationError` when structural invariants fail; messages
    name the offending element.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise GridFormatError(f"{path}: not valid JSON ({exc})") from exc

    try:
        version = raw["format_version"]
        if version != GRID_FORMAT_VERSION:
            raise GridFormatError(
                f"{path}: unsupported format_version {version} (expected {GRID_FORMAT_VERSION})"
            )
        base = PerUnitBase(
            s_kva=float(raw.get("base", {}).get("s_kva", 100.0)),
            v_ll_v=float(raw.get("base", {}).get("v_ll_v", 400.0)),
        )
        slack = raw["slack"]
        buses = [
            Bus(id=str(b["id"]), v_min=float(b["v_min"]), v_max=float(b["v_max"]))
            for b in raw["buses"]
        ]
        branches = [
            Branch(
                from_bus=str(br["from"]),
                to_bus=str(br["to"]),
                r_pu=float(br["r_pu"]),
                x_pu=float(br["x_pu"]),
                i_max_pu=float(br["i_max_pu"]),
            )
            for br in raw["branches"]
        ]
        generators = [
            Generator(
                id=str(g["id"]),
                bus=str(g["bus"]),
                p_min_kw=float(g["p_min_kw"]),
                p_max_kw=float(g["p_max_kw"]),
                s_max_kva=float(g["s_max_kva"]),
                region=str(g.get("region", "circular")),
                power_factor=float(g.get("power_factor", 0.9)),
                is_slack=bool(g.get("is_slack", False)),
            )
            for g in raw.get("generators", [])
        ]
        pv_units = [
            PvUnit(id=str(u["id"]), bus=str(u["bus"]), p_max_kw=float(u["p_max_kw"]))
            for u in raw.get("pv", [])
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise GridFormatError(f"{path}: schema error ({exc})") from exc

    net = Network(
        buses=buses,
        branches=branches,
        slack_bus=str(slack["bus"]),
        slack_v_pu=float(slack.get("v_pu", 1.0)),
        base=base,
    )
    devices = DeviceMap(generators=generators, pv_units=pv_units, _net=net)
    return net, devices
