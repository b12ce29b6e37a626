"""Linear programming backend and SOS2-aware branch and bound.

All controllers talk to this module through :class:`LpProblem` /
:class:`LpSolution`, so the underlying solver is swappable.  Plain LPs are
delegated to HiGHS (through :func:`scipy.optimize.linprog`); SOS2 adjacency
is enforced by an embedded branch-and-bound layer that branches on the
ordered groups and bounds with the LP relaxation.  Solutions returned as
``optimal`` are re-verified against every row at an absolute feasibility
tolerance of 1e-7.

Problems can be written to and read back from a line-oriented text format
(``dump_problem`` / ``load_problem``) for debugging or hand-off to an
external solver.
"""

from __future__ import annotations

import heapq
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize
import scipy.sparse as sp

FEASIBILITY_TOL = 1e-7
OPTIMALITY_TOL = 1e-7
ADJACENCY_TOL = 1e-9

_STATUS_FROM_SCIPY = {
    0: "optimal",
    1: "iteration_limit",
    2: "infeasible",
    3: "unbounded",
    4: "numerical_error",
}


class LpError(Exception):
    pass


@dataclass
class SolveStats:
    iterations: int = 0
    nodes: int = 0
    wall_time_s: float = 0.0


@dataclass
class LpSolution:
    status: str
    x: np.ndarray | None
    objective: float | None
    stats: SolveStats = field(default_factory=SolveStats)
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


@dataclass
class LpProblem:
    """min objective @ x subject to ranged rows, equalities, and bounds.

    ``ineq_matrix`` rows satisfy ``ineq_lower <= A x <= ineq_upper`` (either
    side may be infinite).  ``sos2_groups`` maps a group name to an ordered
    list of variable indices; at most two members may be nonzero and they
    must be adjacent in the given order.
    """

    objective: np.ndarray
    ineq_matrix: sp.csr_matrix | None = None
    ineq_lower: np.ndarray | None = None
    ineq_upper: np.ndarray | None = None
    eq_matrix: sp.csr_matrix | None = None
    eq_rhs: np.ndarray | None = None
    var_lower: np.ndarray | None = None
    var_upper: np.ndarray | None = None
    sos2_groups: dict[str, list[int]] = field(default_factory=dict)
    row_tags: list[str] | None = None

    @property
    def n_var(self) -> int:
        return self.objective.shape[0]

    @property
    def n_rows(self) -> int:
        rows = 0
        if self.ineq_matrix is not None:
            rows += self.ineq_matrix.shape[0]
        if self.eq_matrix is not None:
            rows += self.eq_matrix.shape[0]
        return rows

    def validate(self) -> None:
        n = self.n_var
        if self.ineq_matrix is not None:
            m = self.ineq_matrix.shape[0]
            if self.ineq_matrix.shape[1] != n:
                raise LpError("inequality matrix width does not match objective")
            if self.ineq_lower is None or self.ineq_upper is None:
                raise LpError("ranged rows need both lower and upper vectors")
            if self.ineq_lower.shape != (m,) or self.ineq_upper.shape != (m,):
                raise LpError("row bound vectors do not match row count")
            if np.any(self.ineq_lower > self.ineq_upper + 1e-15):
                raise LpError("row lower bound exceeds upper bound")
        if self.eq_matrix is not None:
            if self.eq_matrix.shape[1] != n:
                raise LpError("equality matrix width does not match objective")
            if self.eq_rhs is None or self.eq_rhs.shape != (self.eq_matrix.shape[0],):
                raise LpError("equality rhs does not match row count")
        lo = self.bounds_lower()
        hi = self.bounds_upper()
        if np.any(lo > hi + 1e-15):
            raise LpError("variable lower bound exceeds upper bound")
        for name, members in self.sos2_groups.items():
            if len(members) < 2:
                raise LpError(f"SOS2 group '{name}' needs at least 2 members")
            if any(i < 0 or i >= n for i in members):
                raise LpError(f"SOS2 group '{name}' references unknown variable")
            if len(set(members)) != len(members):
                raise LpError(f"SOS2 group '{name}' repeats a variable")

    def bounds_lower(self) -> np.ndarray:
        if self.var_lower is None:
            return np.full(self.n_var, -np.inf)
        return self.var_lower

    def bounds_upper(self) -> np.ndarray:
        if self.var_upper is None:
            return np.full(self.n_var, np.inf)
        return self.var_upper


def _max_violation(problem: LpProblem, x: np.ndarray) -> float:
    worst = 0.0
    if problem.ineq_matrix is not None:
        ax = problem.ineq_matrix @ x
        worst = max(
            worst,
            float(np.max(np.maximum(problem.ineq_lower - ax, 0.0), initial=0.0)),
            float(np.max(np.maximum(ax - problem.ineq_upper, 0.0), initial=0.0)),
        )
    if problem.eq_matrix is not None:
        worst = max(worst, float(np.max(np.abs(problem.eq_matrix @ x - problem.eq_rhs), initial=0.0)))
    lo, hi = problem.bounds_lower(), problem.bounds_upper()
    worst = max(worst, float(np.max(np.maximum(lo - x, 0.0), initial=0.0)))
    worst = max(worst, float(np.max(np.maximum(x - hi, 0.0), initial=0.0)))
    return worst


def _scipy_form(
    problem: LpProblem, var_lower: np.ndarray, var_upper: np.ndarray
) -> dict:
    a_ub = None
    b_ub = None
    if problem.ineq_matrix is not None:
        blocks = []
        rhs = []
        upper_rows = np.isfinite(problem.ineq_upper)
        if np.any(upper_rows):
            blocks.append(problem.ineq_matrix[upper_rows])
            rhs.append(problem.ineq_upper[upper_rows])
        lower_rows = np.isfinite(problem.ineq_lower)
        if np.any(lower_rows):
            blocks.append(-problem.ineq_matrix[lower_rows])
            rhs.append(-problem.ineq_lower[lower_rows])
        if blocks:
            a_ub = sp.vstack(blocks, format="csr")
            b_ub = np.concatenate(rhs)
    bounds = np.column_stack([var_lower, var_upper])
    return dict(
        c=problem.objective,
        A_ub=a_ub,
        b_ub=b_ub,
        A_eq=problem.eq_matrix,
        b_eq=problem.eq_rhs,
        bounds=bounds,
    )


def solve_lp(
    problem: LpProblem,
    var_lower: np.ndarray | None = None,
    var_upper: np.ndarray | None = None,
) -> LpSolution:
    """Solve a plain LP (SOS2 groups, if any, are ignored here).

    ``var_lower``/``var_upper`` override the problem's bounds; the branch
    and bound layer uses this to fix group members per node.
    """
    problem.validate()
    lo = problem.bounds_lower() if var_lower is None else var_lower
    hi = problem.bounds_upper() if var_upper is None else var_upper
    t0 = time.perf_counter()
    res = scipy.optimize.linprog(
        method="highs",
        options={
            "primal_feasibility_tolerance": 1e-9,
            "dual_feasibility_tolerance": 1e-9,
        },
        **_scipy_form(problem, lo, hi),
    )
    wall = time.perf_counter() - t0
    status = _STATUS_FROM_SCIPY.get(res.status, "numerical_error")
    iterations = int(getattr(res, "nit", 0) or 0)
    if status != "optimal":
        return LpSolution(
            status=status,
            x=None,
            objective=None,
            stats=SolveStats(iterations=iterations, wall_time_s=wall),
            message=str(res.message),
        )
    x = np.asarray(res.x, dtype=float)
    violation = _max_violation(problem, np.clip(x, lo, hi))
    if violation > FEASIBILITY_TOL:
        return LpSolution(
            status="numerical_error",
            x=x,
            objective=float(res.fun),
            stats=SolveStats(iterations=iterations, wall_time_s=wall),
            message=f"solver reported optimal but max violation {violation:.2e}",
        )
    return LpSolution(
        status="optimal",
        x=x,
        objective=float(res.fun),
        stats=SolveStats(iterations=iterations, wall_time_s=wall),
    )


def sos2_violations(
    problem: LpProblem, x: np.ndarray, tol: float = ADJACENCY_TOL
) -> list[str]:
    """Names of groups whose members are not two adjacent nonzeros."""
    bad = []
    for name, members in problem.sos2_groups.items():
        vals = np.abs(x[members])
        nz = np.flatnonzero(vals > tol)
        if nz.size > 2 or (nz.size == 2 and nz[1] - nz[0] != 1):
            bad.append(name)
    return bad


@dataclass
class _Node:
    bound: float
    order: int
    windows: dict[str, tuple[int, int]]

    def __lt__(self, other: "_Node") -> bool:
        return (self.bound, self.order) < (other.bound, other.order)


def solve_sos2(
    problem: LpProblem,
    node_limit: int = 2000,
    abs_gap: float = 1e-9,
) -> LpSolution:
    """Branch and bound over SOS2 adjacency patterns.

    Nodes hold, per group, the window of member indices still allowed to be
    nonzero.  A violated group is split at its weighted-centroid index; the
    relaxation bound comes from :func:`solve_lp` with the excluded members
    clamped to zero.  Best-bound node selection with deterministic
    tie-breaking keeps results independent of timing.

    If ``node_limit`` is exhausted the best incumbent is returned with
    status ``node_limit``.
    """
    problem.validate()
    if not problem.sos2_groups:
        return solve_lp(problem)
    lo0 = problem.bounds_lower().copy()
    hi0 = problem.bounds_upper().copy()
    for name, members in problem.sos2_groups.items():
        if np.any(lo0[members] > 0) or np.any(hi0[members] < 0):
            raise LpError(f"SOS2 group '{name}' members must admit zero")

    t0 = time.perf_counter()
    root_windows = {
        name: (0, len(members) - 1) for name, members in problem.sos2_groups.items()
    }

    def node_bounds(windows: dict[str, tuple[int, int]]) -> tuple[np.ndarray, np.ndarray]:
        lo = lo0.copy()
        hi = hi0.copy()
        for name, (w0, w1) in windows.items():
            members = problem.sos2_groups[name]
            for pos, var in enumerate(members):
                if pos < w0 or pos > w1:
                    lo[var] = 0.0
                    hi[var] = 0.0
        return lo, hi

    total_iters = 0
    nodes_evaluated = 0
    incumbent: np.ndarray | None = None
    incumbent_obj = np.inf
    counter = 0
    heap: list[_Node] = []

    def evaluate(windows: dict[str, tuple[int, int]]) -> LpSolution:
        lo, hi = node_bounds(windows)
        return solve_lp(problem, var_lower=lo, var_upper=hi)

    def round_to_windows(x: np.ndarray) -> dict[str, tuple[int, int]]:
        """Project a relaxation onto one adjacent window per group (the
        mass-weighted centroid's best neighbor)."""
        windows: dict[str, tuple[int, int]] = {}
        for name, members in problem.sos2_groups.items():
            vals = np.abs(x[members])
            total = float(vals.sum())
            k = len(members)
            if total <= ADJACENCY_TOL:
                windows[name] = (0, 1)
                continue
            centroid = float(np.dot(np.arange(k), vals) / total)
            left = int(np.clip(np.floor(centroid), 0, k - 2))
            windows[name] = (left, left + 1)
        return windows

    def try_heuristic(x: np.ndarray) -> None:
        nonlocal incumbent, incumbent_obj, nodes_evaluated, total_iters
        fixed = evaluate(round_to_windows(x))
        nodes_evaluated += 1
        total_iters += fixed.stats.iterations
        if fixed.status == "optimal" and fixed.objective < incumbent_obj - abs_gap:
            if not sos2_violations(problem, fixed.x):
                incumbent = fixed.x
                incumbent_obj = fixed.objective

    root = evaluate(root_windows)
    nodes_evaluated += 1
    total_iters += root.stats.iterations
    if root.status == "infeasible":
        return LpSolution(
            status="infeasible",
            x=None,
            objective=None,
            stats=SolveStats(total_iters, nodes_evaluated, time.perf_counter() - t0),
            message="root relaxation infeasible",
        )
    if root.status == "unbounded":
        return LpSolution(
            status="unbounded",
            x=None,
            objective=None,
            stats=SolveStats(total_iters, nodes_evaluated, time.perf_counter() - t0),
            message="root relaxation unbounded",
        )
    if root.status != "optimal":
        return root

    if not sos2_violations(problem, root.x):
        # zero branch nodes: relaxation already satisfies every group
        return LpSolution(
            status="optimal",
            x=root.x,
            objective=root.objective,
            stats=SolveStats(total_iters, 0, time.perf_counter() - t0),
        )

    try_heuristic(root.x)  # seed the incumbent so best-bound search can prune

    heapq.heappush(heap, _Node(root.objective, counter, root_windows))
    node_cache: dict[int, LpSolution] = {counter: root}

    while heap:
        node = heapq.heappop(heap)
        relax = node_cache.pop(node.order, None)
        if relax is None:
            relax = evaluate(node.windows)
            nodes_evaluated += 1
            total_iters += relax.stats.iterations
            if relax.status == "infeasible":
                continue
            if relax.status != "optimal":
                continue
        if relax.objective >= incumbent_obj - abs_gap:
            continue
        if not sos2_violations(problem, relax.x):
            incumbent = relax.x
            incumbent_obj = relax.objective
            continue
        if nodes_evaluated % 40 == 0:
            try_heuristic(relax.x)
            if relax.objective >= incumbent_obj - abs_gap:
                continue

        # most fractional group: largest spread of nonzero members
        target = None
        target_score = -1.0
        target_centroid = 0
        for name, members in problem.sos2_groups.items():
            w0, w1 = node.windows[name]
            vals = np.abs(relax.x[members])
            nz = np.flatnonzero(vals > ADJACENCY_TOL)
            if nz.size <= 2 and (nz.size < 2 or nz[1] - nz[0] == 1):
                continue
            weight = vals[nz]
            centroid = float(np.sum(nz * weight) / np.sum(weight))
            score = float(nz[-1] - nz[0])
            if score > target_score:
                target, target_score = name, score
                target_centroid = int(round(centroid))
        if target is None:
            # numerically SOS2-feasible after all
            if relax.objective < incumbent_obj - abs_gap:
                incumbent, incumbent_obj = relax.x, relax.objective
            continue

        w0, w1 = node.windows[target]
        split = min(max(target_centroid, w0 + 1), w1 - 1)
        for child_window in ((w0, split), (split, w1)):
            counter += 1
            windows = dict(node.windows)
            windows[target] = child_window
            child = evaluate(windows)
            nodes_evaluated += 1
            total_iters += child.stats.iterations
            if child.status != "optimal":
                continue
            if child.objective >= incumbent_obj - abs_gap:
                continue
            heapq.heappush(heap, _Node(child.objective, counter, windows))
            node_cache[counter] = child
        if nodes_evaluated >= node_limit:
            wall = time.perf_counter() - t0
            if incumbent is None:
                return LpSolution(
                    status="node_limit",
                    x=None,
                    objective=None,
                    stats=SolveStats(total_iters, nodes_evaluated, wall),
                    message="node limit reached without incumbent",
                )
            return LpSolution(
                status="node_limit",
                x=incumbent,
                objective=incumbent_obj,
                stats=SolveStats(total_iters, nodes_evaluated, wall),
                message="node limit reached; best incumbent returned",
            )

    wall = time.perf_counter() - t0
    if incumbent is None:
        return LpSolution(
            status="infeasible",
            x=None,
            objective=None,
            stats=SolveStats(total_iters, nodes_evaluated, wall),
            message="no SOS2-feasible point",
        )
    return LpSolution(
        status="optimal",
        x=incumbent,
        objective=incumbent_obj,
        stats=SolveStats(total_iters, nodes_evaluated, wall),
    )


# ---------------------------------------------------------------------------
# text round trip
# ---------------------------------------------------------------------------

_FMT = "%.17g"


def _write_vector(lines: list[str], key: str, vec: np.ndarray) -> None:
    lines.append(key + " " + " ".join(_FMT % v for v in vec))


def _write_matrix(lines: list[str], key: str, mat: sp.csr_matrix) -> None:
    coo = mat.tocoo()
    lines.append(f"{key} {mat.shape[0]} {mat.shape[1]} {coo.nnz}")
    for r, c, v in zip(coo.row, coo.col, coo.data):
        lines.append(f"{r} {c} " + _FMT % v)


def dump_problem(problem: LpProblem, comments: list[str] | None = None) -> str:
    """Serialize to the documented ``LPPROBLEM v1`` text format."""
    problem.validate()
    lines = ["LPPROBLEM v1"]
    for comment in comments or []:
        lines.append("# " + comment)
    lines.append(f"nvar {problem.n_var}")
    _write_vector(lines, "objective", problem.objective)
    _write_vector(lines, "var_lower", problem.bounds_lower())
    _write_vector(lines, "var_upper", problem.bounds_upper())
    if problem.ineq_matrix is not None:
        _write_matrix(lines, "ineq", problem.ineq_matrix.tocsr())
        _write_vector(lines, "ineq_lower", problem.ineq_lower)
        _write_vector(lines, "ineq_upper", problem.ineq_upper)
        if problem.row_tags is not None:
            lines.append("row_tags " + " ".join(problem.row_tags))
    if problem.eq_matrix is not None:
        _write_matrix(lines, "eq", problem.eq_matrix.tocsr())
        _write_vector(lines, "eq_rhs", problem.eq_rhs)
    for name, members in problem.sos2_groups.items():
        lines.append(f"sos2 {name} " + " ".join(str(i) for i in members))
    return "\n".join(lines) + "\n"


def load_problem(text: str) -> LpProblem:
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    if not lines or lines[0] != "LPPROBLEM v1":
        raise LpError("not an LPPROBLEM v1 document")
    idx = 1

    def take() -> str:
        nonlocal idx
        line = lines[idx]
        idx += 1
        return line

    fields: dict[str, object] = {}
    sos2: dict[str, list[int]] = {}
    row_tags: list[str] | None = None
    while idx < len(lines):
        line = take()
        key, rest = line.split(" ", 1) if " " in line else (line, "")
        if key in ("objective", "var_lower", "var_upper", "ineq_lower", "ineq_upper", "eq_rhs"):
            fields[key] = np.array([float(v) for v in rest.split()])
        elif key == "nvar":
            fields[key] = int(rest)
        elif key in ("ineq", "eq"):
            m, n, nnz = (int(v) for v in rest.split())
            rows = np.zeros(nnz, dtype=int)
            cols = np.zeros(nnz, dtype=int)
            vals = np.zeros(nnz)
            for k in range(nnz):
                r, c, v = take().split()
                rows[k], cols[k], vals[k] = int(r), int(c), float(v)
            fields[key] = sp.csr_matrix((vals, (rows, cols)), shape=(m, n))
        elif key == "sos2":
            name, *members = rest.split()
            sos2[name] = [int(v) for v in members]
        elif key == "row_tags":
            row_tags = rest.split()
        else:
            raise LpError(f"unknown section '{key}'")

    return LpProblem(
        objective=fields["objective"],
        ineq_matrix=fields.get("ineq"),
        ineq_lower=fields.get("ineq_lower"),
        ineq_upper=fields.get("ineq_upper"),
        eq_matrix=fields.get("eq"),
        eq_rhs=fields.get("eq_rhs"),
        var_lower=fields.get("var_lower"),
        var_upper=fields.get("var_upper"),
        sos2_groups=sos2,
        row_tags=row_tags,
    )
