"""Charge-capacity fade maps and their lower convex envelope.

A degradation map gives the normalized capacity-loss rate as a function of
normalized battery power (C-rate, discharge positive) and state of energy.
Maps are nonconvex: resting degradation (calendar aging) is positive and
SoE-dependent, cycling stress saturates with power, and both blow up at
the SoE extremes.  The hourly scheduler needs the map inside an LP, so the
optimization layers consume the lower convex envelope extracted from a
Delaunay/convex-hull construction over the sampled surface: a set of
planes whose pointwise maximum under-approximates the map everywhere and
touches it at the envelope's support vertices.

The built-in generator is parametric and calibrated: the surface is scaled
so that continuous rated-power full cycling accumulates 20% capacity loss
after the technology's anchor cycle count.  The map values themselves are
configuration, not measured truth; alternative maps can be loaded from the
same JSON file format.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull

MAP_FORMAT_VERSION = 1

# SoE knot positions shared by both technologies; the generated surface is
# concave between knots so the convex envelope is supported here only,
# which keeps the plane count stable under grid refinement.
_SOE_KNOTS = np.array([0.0, 0.25, 0.5, 0.75, 1.0])


@dataclass(frozen=True)
class TechnologyShape:
    """Knot values (arbitrary units before calibration) for one chemistry."""

    name: str
    calendar_knots: tuple[float, ...]  # resting rate at the SoE knots
    cycling_knots: tuple[float, ...]  # added rate at rated power, same knots
    anchor_cycles: int  # full cycles to 80% capacity under rated cycling
    bump_fraction: float = 0.12  # concave lift between knots (nonconvexity)
    power_exponent: float = 0.75  # concave growth of stress with |power|


TECHNOLOGIES: dict[str, TechnologyShape] = {
    # Strong SoE dependence: parking or cycling near empty/full is punished
    # hard, which is what an SoE-blind scheduler ends up doing.
    "licoo2": TechnologyShape(
        name="licoo2",
        calendar_knots=(3.1, 0.85, 0.80, 1.10, 2.9),
        cycling_knots=(5.5, 1.25, 0.85, 1.05, 2.6),
        anchor_cycles=4000,
    ),
    # Much flatter SoE dependence and a longer cycle life.
    "lifepo4": TechnologyShape(
        name="lifepo4",
        calendar_knots=(1.70, 1.02, 0.90, 1.00, 1.45),
        cycling_knots=(2.60, 1.10, 0.90, 1.00, 1.55),
        anchor_cycles=8000,
    ),
}

RATED_C_RATE = 0.5  # rated power over capacity for the bundled 10 kW / 20 kWh unit
EOL_CAPACITY_FRACTION = 0.8


def _knot_interp_with_bump(knots_x: np.ndarray, knots_y: np.ndarray, x: np.ndarray,
                           bump_fraction: float) -> np.ndarray:
    """Piecewise-linear interpolation lifted by a concave bump per segment.

    The bump keeps every interior point strictly above the chord of its
    segment, so only the knots can support the convex envelope.
    """
    x = np.asarray(x, dtype=float)
    y = np.interp(x, knots_x, knots_y)
    seg = np.clip(np.searchsorted(knots_x, x, side="right") - 1, 0, len(knots_x) - 2)
    x0, x1 = knots_x[seg], knots_x[seg + 1]
    t = np.where(x1 > x0, (x - x0) / np.where(x1 > x0, x1 - x0, 1.0), 0.0)
    lift = bump_fraction * np.minimum(knots_y[seg], knots_y[seg + 1])
    return y + lift * 4.0 * t * (1.0 - t)


class _RawSurface:
    """Unscaled analytic surface zeta_raw(c_rate, soe) for one technology."""

    def __init__(self, shape: TechnologyShape, c_rate_max: float = RATED_C_RATE):
        self.shape = shape
        self.c_rate_max = c_rate_max
        self._cal = np.asarray(shape.calendar_knots, dtype=float)
        self._cyc = np.asarray(shape.cycling_knots, dtype=float)

    def __call__(self, c_rate: np.ndarray, soe: np.ndarray) -> np.ndarray:
        c_rate = np.asarray(c_rate, dtype=float)
        soe = np.asarray(soe, dtype=float)
        cal = _knot_interp_with_bump(_SOE_KNOTS, self._cal, soe, self.shape.bump_fraction)
        cyc = _knot_interp_with_bump(_SOE_KNOTS, self._cyc, soe, self.shape.bump_fraction)
        stress = (np.abs(c_rate) / self.c_rate_max) ** self.shape.power_exponent
        return cal + cyc * stress


@dataclass
class DegradationMap:
    """Sampled normalized fade-rate surface.

    ``rate[i, j]`` is the capacity-loss fraction per hour at normalized
    power ``c_rate_grid[i]`` and state of energy ``soe_grid[j]``.
    """

    technology: str
    c_rate_grid: np.ndarray
    soe_grid: np.ndarray
    rate: np.ndarray
    anchor_cycles: int
    scale: float

    def interpolate(self, c_rate: float, soe: float) -> float:
        """Bilinear interpolation on the sampled grid (clamped to range)."""
        x = float(np.clip(c_rate, self.c_rate_grid[0], self.c_rate_grid[-1]))
        y = float(np.clip(soe, self.soe_grid[0], self.soe_grid[-1]))
        i = int(np.clip(np.searchsorted(self.c_rate_grid, x) - 1, 0, len(self.c_rate_grid) - 2))
        j = int(np.clip(np.searchsorted(self.soe_grid, y) - 1, 0, len(self.soe_grid) - 2))
        x0, x1 = self.c_rate_grid[i], self.c_rate_grid[i + 1]
        y0, y1 = self.soe_grid[j], self.soe_grid[j + 1]
        tx = (x - x0) / (x1 - x0)
        ty = (y - y0) / (y1 - y0)
        z = self.rate
        return float(
            z[i, j] * (1 - tx) * (1 - ty)
            + z[i + 1, j] * tx * (1 - ty)
            + z[i, j + 1] * (1 - tx) * ty
            + z[i + 1, j + 1] * tx * ty
        )


@dataclass
class DegradationModel:
    """Map plus its convex envelope planes and the calibration record."""

    map: DegradationMap
    planes: np.ndarray = field(default=None)  # type: ignore[assignment]  # (n_p, 3)

    def __post_init__(self) -> None:
        if self.planes is None:
            self.planes = convexify_map(self.map)

    @property
    def n_planes(self) -> int:
        return self.planes.shape[0]

    def hull_rate(self, c_rate: float, soe: float) -> float:
        """Convex under-approximation: max over planes."""
        vals = self.planes[:, 0] * c_rate + self.planes[:, 1] * soe + self.planes[:, 2]
        return float(np.max(vals))

    def map_rate(self, c_rate: float, soe: float) -> float:
        return self.map.interpolate(c_rate, soe)

    def absolute_hull_rate_kw(self, p_bat_kw: float, e_kwh: float, capacity_kwh: float) -> float:
        """Capacity-loss rate in kWh/h for a battery of the given size."""
        return capacity_kwh * self.hull_rate(p_bat_kw / capacity_kwh, e_kwh / capacity_kwh)

    def absolute_map_rate_kw(self, p_bat_kw: float, e_kwh: float, capacity_kwh: float) -> float:
        return capacity_kwh * self.map_rate(p_bat_kw / capacity_kwh, e_kwh / capacity_kwh)


def generate_degradation_map(
    technology: str,
    power_points: int = 17,
    soe_points: int = 17,
    c_rate_max: float = RATED_C_RATE,
) -> DegradationMap:
    """Sample the calibrated parametric surface for one technology.

    The grid must be at least 5 x 5.  Resolutions of the form 4k + 1 place
    sample points exactly on the surface knots, which makes the envelope
    support set (and hence the plane count) insensitive to refinement.

    Calibration: the scale factor is chosen so that ``anchor_cycles`` full
    cycles at rated power accumulate a capacity loss of
    ``1 - EOL_CAPACITY_FRACTION`` (20%) of the initial capacity.
    """
    if technology not in TECHNOLOGIES:
        raise ValueError(f"unknown technology '{technology}' (have {sorted(TECHNOLOGIES)})")
    if power_points < 5 or soe_points < 5:
        raise ValueError("resolution must be at least 5 x 5")
    shape = TECHNOLOGIES[technology]
    raw = _RawSurface(shape, c_rate_max)

    # one full cycle: soe 1 -> 0 at rated discharge, then 0 -> 1 at rated
    # charge; time per unit soe is 1/c_rate_max hours in each direction
    soe_dense = np.linspace(0.0, 1.0, 4001)
    wall = raw(np.full_like(soe_dense, c_rate_max), soe_dense)
    cycle_raw = 2.0 * np.trapezoid(wall, soe_dense) / c_rate_max
    target = 1.0 - EOL_CAPACITY_FRACTION
    scale = target / (shape.anchor_cycles * cycle_raw)

    c_rate_grid = np.linspace(-c_rate_max, c_rate_max, power_points)
    soe_grid = np.linspace(0.0, 1.0, soe_points)
    mesh_c, mesh_s = np.meshgrid(c_rate_grid, soe_grid, indexing="ij")
    rate = scale * raw(mesh_c, mesh_s)
    return DegradationMap(
        technology=technology,
        c_rate_grid=c_rate_grid,
        soe_grid=soe_grid,
        rate=rate,
        anchor_cycles=shape.anchor_cycles,
        scale=scale,
    )


def convexify_map(map_: DegradationMap, merge_tol: float = 1e-12) -> np.ndarray:
    """Lower convex envelope of the sampled surface as plane triples.

    Builds the 3D convex hull of the sample points and keeps the downward
    facets; each yields a plane ``rate = a_p * c_rate + a_s * soe + a_0``.
    A degenerate (coplanar) sample set collapses to the single fitted
    plane.
    """
    mesh_c, mesh_s = np.meshgrid(map_.c_rate_grid, map_.soe_grid, indexing="ij")
    pts = np.column_stack([mesh_c.ravel(), mesh_s.ravel(), map_.rate.ravel()])
    try:
        hull = ConvexHull(pts)
    except Exception:
        # coplanar samples: fit the unique plane through them
        a, res, *_ = np.linalg.lstsq(
            np.column_stack([pts[:, 0], pts[:, 1], np.ones(len(pts))]), pts[:, 2], rcond=None
        )
        return a.reshape(1, 3)

    planes = []
    for eq in hull.equations:  # n . x + d = 0 with n outward
        nx, ny, nz, d = eq
        if nz >= -1e-12:
            continue  # not a lower facet
        planes.append((-nx / nz, -ny / nz, -d / nz))
    planes = np.asarray(planes)
    if planes.size == 0:
        raise RuntimeError("no lower facets found; surface is degenerate")
    # qhull can emit duplicate equations for adjacent coplanar triangles
    rounded = np.round(planes / max(merge_tol, 1e-15)) * merge_tol
    _, keep = np.unique(rounded, axis=0, return_index=True)
    return planes[np.sort(keep)]


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------


def save_map(map_: DegradationMap, path: str | Path) -> None:
    doc = {
        "format_version": MAP_FORMAT_VERSION,
        "technology": map_.technology,
        "anchor_cycles": map_.anchor_cycles,
        "scale": map_.scale,
        "c_rate_grid": map_.c_rate_grid.tolist(),
        "soe_grid": map_.soe_grid.tolist(),
        "rate": map_.rate.tolist(),
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_map(path: str | Path) -> DegradationMap:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != MAP_FORMAT_VERSION:
        raise ValueError(f"unsupported map format_version {doc.get('format_version')}")
    return DegradationMap(
        technology=str(doc["technology"]),
        c_rate_grid=np.asarray(doc["c_rate_grid"], dtype=float),
        soe_grid=np.asarray(doc["soe_grid"], dtype=float),
        rate=np.asarray(doc["rate"], dtype=float),
        anchor_cycles=int(doc["anchor_cycles"]),
        scale=float(doc["scale"]),
    )


def save_planes(planes: np.ndarray, path: str | Path) -> None:
    doc = {"format_version": MAP_FORMAT_VERSION, "planes": np.asarray(planes).tolist()}
    Path(path).write_text(json.dumps(doc, indent=1))
