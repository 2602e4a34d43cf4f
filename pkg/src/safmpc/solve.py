"""LP/MILP solution drivers.

``solve_lp`` relaxes a model and hands it to an LP engine: HiGHS dual
simplex through scipy (default) or the package's own dense simplex.
``solve_milp`` is a deterministic branch-and-bound over those LP
relaxations: most-fractional binary branching with lowest-id ties,
depth-first dives, best-bound node selection on backtrack, and a
root-LP rounding heuristic (group-aware for the one-hot segment rows).
``enumerate_oracle`` solves tiny models exactly by trying every binary
assignment — the independent reference the search is tested against.
``backend_solve`` routes a model to a named external solver through the
LP-format interchange file.
"""

from __future__ import annotations

import heapq
import itertools
import json
import math
import os
import subprocess
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import Bounds, LinearConstraint, linprog
from scipy.optimize import milp as scipy_milp

from . import simplex
from .lp_format import read_lp, write_lp
from .model import MilpModel, ModelArrays

_INT_TOL = 1e-6
_CERT_TOL = 1e-7


class SolverError(RuntimeError):
    """Numerical failure or malformed input reported by an engine."""


class OracleSizeError(ValueError):
    """enumerate_oracle refuses models with more than 20 binaries."""


class BackendUnavailableError(RuntimeError):
    """The requested external backend cannot be executed."""


class BackendParseError(RuntimeError):
    """An external backend produced output this adapter cannot read."""


@dataclass(frozen=True)
class SolveLimits:
    rel_gap: float = 1e-6
    node_cap: int = 1_000_000
    time_cap: float | None = None

    def __post_init__(self) -> None:
        if self.rel_gap < 0 or self.node_cap < 1:
            raise ValueError("invalid solve limits")


@dataclass
class LpSolution:
    status: str  # optimal | infeasible | unbounded
    x: np.ndarray | None
    objective: float | None
    iterations: int = 0


@dataclass
class MipSolution:
    """Branch-and-bound outcome.

    status is one of optimal / infeasible / unbounded / gap_limit /
    node_limit / time_limit; "optimal" covers proofs up to the default
    1e-6 relative gap, "gap_limit" marks stops at a user-loosened gap,
    and "time_limit" (for the time_cap limit) extends the nominal status
    set for honesty's sake.
    """

    status: str
    x: np.ndarray | None
    objective: float | None
    best_bound: float
    rel_gap: float
    node_count: int
    wall_time: float
    bound_trace: list[tuple[int, float, float]] = field(default_factory=list)


def _as_arrays(model: MilpModel | ModelArrays) -> ModelArrays:
    return model if isinstance(model, ModelArrays) else model.to_arrays()


def solve_lp_arrays(
    arrays: ModelArrays,
    lb: np.ndarray | None = None,
    ub: np.ndarray | None = None,
    engine: str = "auto",
) -> LpSolution:
    lo = arrays.lb if lb is None else lb
    hi = arrays.ub if ub is None else ub
    if engine in ("auto", "highs"):
        res = linprog(
            arrays.c,
            A_ub=arrays.A_ub if arrays.A_ub.shape[0] else None,
            b_ub=arrays.b_ub if arrays.A_ub.shape[0] else None,
            A_eq=arrays.A_eq if arrays.A_eq.shape[0] else None,
            b_eq=arrays.b_eq if arrays.A_eq.shape[0] else None,
            bounds=np.column_stack([lo, hi]),
            method="highs-ds",
        )
        if res.status == 0:
            return LpSolution("optimal", res.x, float(res.fun), int(res.nit))
        if res.status == 2:
            return LpSolution("infeasible", None, None, int(res.nit or 0))
        if res.status == 3:
            return LpSolution("unbounded", None, None, int(res.nit or 0))
        raise SolverError(f"HiGHS failed: status {res.status} ({res.message})")
    if engine == "dense":
        out = simplex.solve_dense(
            arrays.c,
            arrays.A_ub.toarray() if arrays.A_ub.shape[0] else np.zeros((0, arrays.c.size)),
            arrays.b_ub,
            arrays.A_eq.toarray() if arrays.A_eq.shape[0] else np.zeros((0, arrays.c.size)),
            arrays.b_eq,
            lo,
            hi,
        )
        return LpSolution(out.status, out.x, out.objective, out.iterations)
    raise SolverError(f"unknown LP engine {engine!r}")


def solve_lp(model: MilpModel | ModelArrays, engine: str = "auto") -> LpSolution:
    """Solve the LP relaxation (binaries relaxed to [0, 1])."""
    return solve_lp_arrays(_as_arrays(model), engine=engine)


def _sos1_groups(model: MilpModel | None, arrays: ModelArrays) -> list[np.ndarray]:
    """Rows of the form sum(binaries) = 1 — used for group-aware rounding."""
    if model is None:
        return []
    bins = set(int(b) for b in arrays.binaries)
    groups = []
    for name, terms, sense, rhs in model.rows:
        if sense == "=" and rhs == 1.0 and len(terms) > 1:
            if all(coef == 1.0 and vid in bins for vid, coef in terms):
                groups.append(np.array([vid for vid, _ in terms], dtype=np.int64))
    return groups


def _round_root(
    x: np.ndarray, binaries: np.ndarray, groups: list[np.ndarray]
) -> dict[int, int]:
    fix: dict[int, int] = {}
    grouped: set[int] = set()
    for g in groups:
        winner = int(g[np.argmax(x[g])])
        for vid in g:
            fix[int(vid)] = 1 if vid == winner else 0
            grouped.add(int(vid))
    for b in binaries:
        if int(b) not in grouped:
            fix[int(b)] = int(math.floor(x[b] + 0.5))
    return fix


def solve_milp(
    model: MilpModel | ModelArrays,
    limits: SolveLimits | None = None,
    engine: str = "auto",
) -> MipSolution:
    """Deterministic branch-and-bound on the binary variables.

    Branches on the most fractional binary (ties: lowest variable id),
    dives depth-first into the child nearest the LP value, and pops the
    best-bound open node when a dive ends.  Incumbents are re-checked
    against every row within 1e-7 before being accepted.  Identical
    model bytes yield identical solutions and node counts.
    """
    limits = limits or SolveLimits()
    arrays = _as_arrays(model)
    src = model if isinstance(model, MilpModel) else None
    binaries = arrays.binaries
    t0 = time.perf_counter()
    trace: list[tuple[int, float, float]] = []

    def make(status, x, obj, bound, nodes):
        inc = obj if obj is not None else math.inf
        gap = 0.0
        if x is not None and math.isfinite(bound):
            gap = abs(inc - bound) / max(abs(inc), 1e-10)
        return MipSolution(
            status=status, x=x, objective=obj, best_bound=bound,
            rel_gap=gap, node_count=nodes, wall_time=time.perf_counter() - t0,
            bound_trace=trace,
        )

    def lp_at(fix: dict[int, int]) -> LpSolution:
        if not fix:
            return solve_lp_arrays(arrays, engine=engine)
        lo = arrays.lb.copy()
        hi = arrays.ub.copy()
        for vid, val in fix.items():
            lo[vid] = hi[vid] = float(val)
        return solve_lp_arrays(arrays, lo, hi, engine=engine)

    nodes = 1
    root = lp_at({})
    if root.status != "optimal":
        return make(root.status, None, None, -math.inf, nodes)
    if binaries.size == 0:
        return make("optimal", root.x, root.objective, root.objective, nodes)

    incumbent: np.ndarray | None = None
    inc_obj = math.inf

    def consider(x: np.ndarray, obj: float) -> None:
        nonlocal incumbent, inc_obj
        if obj < inc_obj - 1e-12 and arrays.residuals(x) <= _CERT_TOL:
            incumbent, inc_obj = x.copy(), obj

    frac = np.abs(root.x[binaries] - np.round(root.x[binaries]))
    if frac.max(initial=0.0) <= _INT_TOL:
        return make("optimal", root.x, root.objective, root.objective, nodes)

    # root rounding heuristic
    fix0 = _round_root(root.x, binaries, _sos1_groups(src, arrays))
    nodes += 1
    heur = lp_at(fix0)
    if heur.status == "optimal":
        consider(heur.x, heur.objective)

    heap: list[tuple[float, int, dict[int, int]]] = []
    tick = itertools.count()
    current: tuple[dict[int, int], LpSolution] | None = ({}, root)
    status_on_stop = None

    while True:
        if current is not None:
            fix, res = current
            current = None
            if res.status == "optimal" and res.objective < inc_obj - 1e-9:
                vals = res.x[binaries]
                frac = np.abs(vals - np.round(vals))
                free_mask = frac > _INT_TOL
                if not free_mask.any():
                    consider(res.x, res.objective)
                else:
                    worst = np.where(free_mask)[0]
                    dist = np.abs(vals[worst] - np.round(vals[worst]))
                    # most fractional; ties resolve to the lowest variable id
                    top = dist.max()
                    tied = worst[np.abs(dist - top) <= 1e-12]
                    bvar = int(binaries[tied.min()])
                    val = res.x[bvar]
                    near = int(math.floor(val + 0.5))
                    far_fix = dict(fix)
                    far_fix[bvar] = 1 - near
                    heapq.heappush(heap, (res.objective, next(tick), far_fix))
                    near_fix = dict(fix)
                    near_fix[bvar] = near
                    if nodes >= limits.node_cap:
                        status_on_stop = "node_limit"
                    elif limits.time_cap is not None and time.perf_counter() - t0 > limits.time_cap:
                        status_on_stop = "time_limit"
                    else:
                        nodes += 1
                        current = (near_fix, lp_at(near_fix))
                        continue

        # backtrack: drop dominated nodes, check termination
        while heap and heap[0][0] >= inc_obj - 1e-9:
            heapq.heappop(heap)
        bound = heap[0][0] if heap else inc_obj
        bound = min(bound, inc_obj)
        trace.append((nodes, bound, inc_obj))
        if status_on_stop:
            st = status_on_stop if incumbent is not None else "infeasible"
            return make(st, incumbent, inc_obj if incumbent is not None else None, bound, nodes)
        if not heap:
            if incumbent is None:
                return make("infeasible", None, None, math.inf, nodes)
            return make("optimal", incumbent, inc_obj, inc_obj, nodes)
        gap = abs(inc_obj - bound) / max(abs(inc_obj), 1e-10)
        if incumbent is not None and gap <= limits.rel_gap:
            status = "optimal" if limits.rel_gap <= 1e-6 or gap <= 1e-6 else "gap_limit"
            return make(status, incumbent, inc_obj, bound, nodes)
        if nodes >= limits.node_cap:
            st = "node_limit" if incumbent is not None else "infeasible"
            return make(st, incumbent, inc_obj if incumbent is not None else None, bound, nodes)
        if limits.time_cap is not None and time.perf_counter() - t0 > limits.time_cap:
            st = "time_limit" if incumbent is not None else "infeasible"
            return make(st, incumbent, inc_obj if incumbent is not None else None, bound, nodes)
        _, _, fix = heapq.heappop(heap)
        nodes += 1
        current = (fix, lp_at(fix))


def enumerate_oracle(
    model: MilpModel | ModelArrays, engine: str = "auto"
) -> MipSolution:
    """Exact reference: solve one LP per binary assignment, keep the best.

    Assignments are tried in lexicographic order over variable ids (0
    before 1), and objective ties keep the first assignment found, so the
    result is deterministic.  Refuses more than 20 binaries.
    """
    arrays = _as_arrays(model)
    binaries = [int(b) for b in arrays.binaries]
    if len(binaries) > 20:
        raise OracleSizeError(f"{len(binaries)} binaries exceed the oracle cap of 20")
    t0 = time.perf_counter()
    best_x, best_obj = None, math.inf
    lps = 0
    for bits in itertools.product((0, 1), repeat=len(binaries)):
        lo = arrays.lb.copy()
        hi = arrays.ub.copy()
        for vid, val in zip(binaries, bits):
            lo[vid] = hi[vid] = float(val)
        res = solve_lp_arrays(arrays, lo, hi, engine=engine)
        lps += 1
        if res.status == "optimal" and res.objective < best_obj - 1e-12:
            best_x, best_obj = res.x.copy(), res.objective
    if best_x is None:
        return MipSolution("infeasible", None, None, math.inf, 0.0, lps,
                           time.perf_counter() - t0)
    return MipSolution("optimal", best_x, best_obj, best_obj, 0.0, lps,
                       time.perf_counter() - t0)


def _scipy_backend(model: MilpModel, limits: SolveLimits) -> MipSolution:
    # Round-trip through the interchange format so this path exercises it.
    parsed = read_lp(write_lp(model))
    arrays = parsed.to_arrays()
    t0 = time.perf_counter()
    constraints = []
    if arrays.A_ub.shape[0]:
        constraints.append(LinearConstraint(arrays.A_ub, -np.inf, arrays.b_ub))
    if arrays.A_eq.shape[0]:
        constraints.append(LinearConstraint(arrays.A_eq, arrays.b_eq, arrays.b_eq))
    integrality = np.zeros(arrays.c.size)
    integrality[arrays.binaries] = 1
    options = {"mip_rel_gap": limits.rel_gap}
    if limits.time_cap is not None:
        options["time_limit"] = limits.time_cap
    res = scipy_milp(
        arrays.c,
        constraints=constraints,
        integrality=integrality,
        bounds=Bounds(arrays.lb, arrays.ub),
        options=options,
    )
    wall = time.perf_counter() - t0
    name_pos = {v.name: i for i, v in enumerate(parsed.vars)}

    def attr(name, fallback):
        # pure-LP results carry the mip_* attributes with value None
        value = getattr(res, name, None)
        return fallback if value is None else value

    if res.status == 0:
        x = np.empty(model.n_vars)
        for i, v in enumerate(model.vars):
            x[i] = res.x[name_pos[v.name]]
        return MipSolution("optimal", x, float(res.fun),
                           float(attr("mip_dual_bound", res.fun)),
                           float(attr("mip_gap", 0.0)),
                           int(attr("mip_node_count", 0)), wall)
    if res.status == 2:
        return MipSolution("infeasible", None, None, math.inf, 0.0, 0, wall)
    if res.status == 3:
        return MipSolution("unbounded", None, None, -math.inf, 0.0, 0, wall)
    if res.status == 1 and res.x is not None:
        x = np.empty(model.n_vars)
        for i, v in enumerate(model.vars):
            x[i] = res.x[name_pos[v.name]]
        return MipSolution("time_limit", x, float(res.fun),
                           float(attr("mip_dual_bound", -math.inf)),
                           float(attr("mip_gap", math.inf)),
                           int(attr("mip_node_count", 0)), wall)
    raise BackendParseError(f"scipy backend returned status {res.status}: {res.message}")


def _exe_backend(model: MilpModel, exe: str, limits: SolveLimits) -> MipSolution:
    if not (os.path.isfile(exe) and os.access(exe, os.X_OK)):
        raise BackendUnavailableError(f"backend executable not found: {exe}")
    t0 = time.perf_counter()
    with tempfile.TemporaryDirectory(prefix="safmpc_backend_") as tmp:
        lp_path = os.path.join(tmp, "model.lp")
        out_path = os.path.join(tmp, "solution.json")
        with open(lp_path, "w") as fh:
            fh.write(write_lp(model))
        try:
            subprocess.run([exe, lp_path, out_path], check=True, capture_output=True,
                           timeout=limits.time_cap)
        except (subprocess.CalledProcessError, subprocess.TimeoutExpired) as exc:
            raise BackendUnavailableError(f"backend run failed: {exc}") from exc
        try:
            with open(out_path) as fh:
                payload = json.load(fh)
            status = payload["status"]
            if status not in ("optimal", "infeasible", "unbounded",
                              "gap_limit", "node_limit", "time_limit"):
                raise KeyError(f"unknown status {status!r}")
            x = None
            obj = None
            if payload.get("values") is not None:
                values = payload["values"]
                x = np.array([float(values[v.name]) for v in model.vars])
                obj = float(payload["objective"])
        except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
            raise BackendParseError(f"cannot read backend output: {exc}") from exc
    return MipSolution(status, x, obj, payload.get("bound", -math.inf),
                       payload.get("gap", 0.0), payload.get("nodes", 0),
                       time.perf_counter() - t0)


def resolve_backend(name: str | None) -> str:
    """Pick the backend: explicit name, else $SAFMPC_BACKEND, else internal."""
    if name:
        return name
    return os.environ.get("SAFMPC_BACKEND", "internal")


def backend_solve(
    model: MilpModel,
    backend: str = "internal",
    limits: SolveLimits | None = None,
) -> MipSolution:
    """Solve through a named backend.

    "internal" runs the package's branch-and-bound; "scipy" round-trips
    the model through the LP interchange format into scipy's MILP solver;
    anything else is treated as the path of an executable invoked as
    ``exe model.lp solution.json``.
    """
    limits = limits or SolveLimits()
    if backend == "internal":
        return solve_milp(model, limits)
    if backend == "scipy":
        return _scipy_backend(model, limits)
    return _exe_backend(model, backend, limits)
