"""Mixed-integer linear relaxation of the signal-control problem.

The non-convexities of the exact problem — the bilinear products
X = s * phi (saturation law) and f = G * s / C (transport law), and the
quadratic queue penalties — are replaced by:

* an N-piece convex-hull envelope of X = s * phi, with one binary per
  (piece, link, step) selecting the active saturation segment,
* McCormick envelopes for the green-times-saturation products, and
* chord (epigraph) cuts for the convex quadratic penalty terms.

Everything else in the model is already linear.  Internal units are
vehicles and seconds; saturation rates are veh/s.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .dynamics import HeadwayParams, Indexer, QueueState, TurningRates
from .network import CostMatrix, admissible_successors


class ModelError(ValueError):
    """Malformed or structurally infeasible model input."""


class InfeasibleBoundsError(ModelError):
    """Bounds alone make the model infeasible (e.g. min greens exceed the cycle)."""


@dataclass(frozen=True)
class Weights:
    """Objective weights: HDV queues, terminal routing, terminal totals, smoothing."""

    w1: float = 1.0
    w2: float = 10.0
    w3: float = 100.0
    w4: float = 0.001

    def __post_init__(self) -> None:
        if min(self.w1, self.w2, self.w3, self.w4) < 0:
            raise ModelError("objective weights must be nonnegative")


@dataclass(frozen=True)
class Partition:
    """Uniform partition of the saturation range into N segments.

    Segment n (1-based) covers [lam[n-1], lam[n]] in veh/s, where
    lam[0] = 1/h_hdv (all HDV) and lam[N] = 1/h_cav (all CAV).
    """

    N: int
    beta: float
    lam: np.ndarray

    def segment_of(self, s: float) -> int:
        """1-based index of the segment containing rate s (clamped)."""
        n = int(np.searchsorted(self.lam, s, side="right"))
        return min(max(n, 1), self.N)


def partition(N: int, h: HeadwayParams) -> Partition:
    if not isinstance(N, (int, np.integer)) or N < 1:
        raise ModelError(f"partition needs an integer N >= 1, got {N!r}")
    beta = (h.s_max - h.s_min) / N
    lam = h.s_min + beta * np.arange(N + 1)
    return Partition(N=int(N), beta=beta, lam=lam)


@dataclass
class Var:
    name: str
    lb: float
    ub: float
    binary: bool = False


class MilpModel:
    """Sparse linear model: variables with bounds, rows, linear objective.

    Rows are (name, terms, sense, rhs) with sense in {"<=", ">=", "="};
    terms is a list of (var id, coefficient).  ``index`` maps structured
    keys like ("x", z, d, k) to variable ids so solutions can be read
    back without string parsing.
    """

    def __init__(self, name: str = "model"):
        self.name = name
        self.vars: list[Var] = []
        self.rows: list[tuple[str, list[tuple[int, float]], str, float]] = []
        self.obj: dict[int, float] = {}
        self.index: dict[tuple, int] = {}
        self.meta: dict = {}

    def add_var(
        self,
        name: str,
        lb: float = 0.0,
        ub: float = math.inf,
        binary: bool = False,
        key: tuple | None = None,
    ) -> int:
        if binary and (lb, ub) != (0.0, 1.0):
            raise ModelError(f"binary variable {name} must have bounds [0, 1]")
        if lb > ub:
            raise InfeasibleBoundsError(f"variable {name} has lb {lb} > ub {ub}")
        vid = len(self.vars)
        self.vars.append(Var(name=name, lb=lb, ub=ub, binary=binary))
        if key is not None:
            if key in self.index:
                raise ModelError(f"duplicate variable key {key}")
            self.index[key] = vid
        return vid

    def add_row(
        self,
        name: str,
        terms: Iterable[tuple[int, float]],
        sense: str,
        rhs: float,
    ) -> int:
        if sense not in ("<=", ">=", "="):
            raise ModelError(f"unknown row sense {sense!r}")
        merged: dict[int, float] = {}
        for vid, coef in terms:
            if not 0 <= vid < len(self.vars):
                raise ModelError(f"row {name} references unknown variable id {vid}")
            if coef != 0.0:
                merged[vid] = merged.get(vid, 0.0) + coef
        if not math.isfinite(rhs):
            raise ModelError(f"row {name} has non-finite rhs")
        self.rows.append((name, sorted(merged.items()), sense, float(rhs)))
        return len(self.rows) - 1

    def add_obj(self, vid: int, coef: float) -> None:
        if coef != 0.0:
            self.obj[vid] = self.obj.get(vid, 0.0) + coef

    @property
    def n_vars(self) -> int:
        return len(self.vars)

    @property
    def binaries(self) -> list[int]:
        return [i for i, v in enumerate(self.vars) if v.binary]

    def value(self, solution: np.ndarray, key: tuple) -> float:
        return float(solution[self.index[key]])

    def objective_value(self, solution: np.ndarray) -> float:
        return float(sum(coef * solution[vid] for vid, coef in self.obj.items()))

    def validate(self) -> None:
        names = set()
        for v in self.vars:
            if v.name in names:
                raise ModelError(f"duplicate variable name {v.name}")
            names.add(v.name)
            if v.lb > v.ub:
                raise InfeasibleBoundsError(f"variable {v.name} has empty domain")
        for name, terms, sense, rhs in self.rows:
            for vid, coef in terms:
                if not math.isfinite(coef):
                    raise ModelError(f"row {name} has non-finite coefficient")

    def to_arrays(self) -> "ModelArrays":
        n = self.n_vars
        c = np.zeros(n)
        for vid, coef in self.obj.items():
            c[vid] = coef
        lb = np.array([v.lb for v in self.vars])
        ub = np.array([v.ub for v in self.vars])
        ub_rows, ub_rhs, eq_rows, eq_rhs = [], [], [], []
        for name, terms, sense, rhs in self.rows:
            if sense == "=":
                eq_rows.append(terms)
                eq_rhs.append(rhs)
            elif sense == "<=":
                ub_rows.append(terms)
                ub_rhs.append(rhs)
            else:
                ub_rows.append([(vid, -coef) for vid, coef in terms])
                ub_rhs.append(-rhs)

        def to_csr(rows: list[list[tuple[int, float]]]) -> sp.csr_matrix:
            data, indices, indptr = [], [], [0]
            for terms in rows:
                for vid, coef in terms:
                    indices.append(vid)
                    data.append(coef)
                indptr.append(len(indices))
            return sp.csr_matrix(
                (np.array(data), np.array(indices, dtype=np.int64), np.array(indptr, dtype=np.int64)),
                shape=(len(rows), n),
            )

        return ModelArrays(
            c=c,
            A_ub=to_csr(ub_rows),
            b_ub=np.array(ub_rhs),
            A_eq=to_csr(eq_rows),
            b_eq=np.array(eq_rhs),
            lb=lb,
            ub=ub,
            binaries=np.array(self.binaries, dtype=np.int64),
        )


@dataclass
class ModelArrays:
    """scipy-ready arrays of a MilpModel (rows split by sense)."""

    c: np.ndarray
    A_ub: sp.csr_matrix
    b_ub: np.ndarray
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    binaries: np.ndarray

    def residuals(self, x: np.ndarray) -> float:
        """Largest constraint violation of a candidate point (bounds included)."""
        res = 0.0
        if self.A_ub.shape[0]:
            res = max(res, float((self.A_ub @ x - self.b_ub).max(initial=0.0)))
        if self.A_eq.shape[0]:
            res = max(res, float(np.abs(self.A_eq @ x - self.b_eq).max(initial=0.0)))
        res = max(res, float((self.lb - x).max(initial=0.0)))
        res = max(res, float((x - self.ub).max(initial=0.0)))
        return res


def add_pwl_quadratic(
    model: MilpModel,
    var: int,
    x_max: float,
    segments: int = 8,
    name: str | None = None,
    key: tuple | None = None,
) -> int:
    """Epigraph variable t >= v^2 / x_max via chords of the parabola.

    The chord interpolant of a convex function majorizes it, so with a
    minimization objective t lands on the piecewise-linear interpolant:
    exact at the breakpoints, above the true square by at most
    (range/segments)^2 / (4 x_max) in between.  No binaries needed.
    """
    if segments < 1:
        raise ModelError("need at least one segment")
    if x_max <= 0:
        raise ModelError("x_max must be positive")
    v = model.vars[var]
    if not (math.isfinite(v.lb) and math.isfinite(v.ub)):
        raise ModelError(f"pwl quadratic needs finite bounds on {v.name}")
    base = name or f"sq_{v.name}"
    bp = np.linspace(v.lb, v.ub, segments + 1)
    if v.lb <= 0.0 <= v.ub:
        t_lo = 0.0
    else:
        t_lo = min(v.lb**2, v.ub**2) / x_max
    t_hi = max(v.lb**2, v.ub**2) / x_max
    t = model.add_var(base, lb=t_lo, ub=t_hi, key=key)
    for i in range(segments):
        slope = (bp[i] + bp[i + 1]) / x_max
        intercept = -bp[i] * bp[i + 1] / x_max
        model.add_row(f"{base}_cut{i}", [(t, 1.0), (var, -slope)], ">=", intercept)
    return t


def movement_tuples(
    idx: Indexer,
    costs: CostMatrix,
    turning: TurningRates,
    carried: set[tuple[int, int]],
    epsilon: float = 0.0,
) -> list[tuple[int, int, int]]:
    """All (from link, to link, commodity) transfers the model may route.

    CAV commodities move only along cost-decreasing arcs; HDV flow follows
    the positive entries of the turning rates.
    """
    net = idx.net
    moves: list[tuple[int, int, int]] = []
    for z in idx.link_ids:
        if net.links[z].downstream is None:
            continue
        for m, frac in sorted(turning.successor_split(z).items()):
            if frac > 0:
                moves.append((z, m, 0))
        for d in idx.commodities[1:]:
            if (z, d) not in carried or z == d:
                continue
            for m in admissible_successors(net, costs, z, d, epsilon):
                moves.append((z, m, d))
    return moves


def build_milp(
    idx: Indexer,
    costs: CostMatrix,
    x0: QueueState,
    demand: np.ndarray,
    turning: TurningRates,
    weights: Weights,
    h: HeadwayParams,
    K: int,
    N: int,
    C: float,
    g_min: float = 30.0,
    g_prev: Mapping[tuple[int, int], float] | None = None,
    constant_s: float | None = None,
    pwl_segments: int = 8,
    epsilon: float = 0.0,
) -> MilpModel:
    """Assemble the full horizon-K control model.

    demand is a (K, n_links, n_commodities) array of boundary rates in
    veh/s, held constant within each step.  With ``constant_s`` set, the
    saturation rate is pinned to that value and the transport rows become
    exact linear equalities (no hull, no binaries) — the fixed-rate
    baseline.  Otherwise the N-piece hull and McCormick rows are built
    and the model carries N * n_links * K binaries.
    """
    net = idx.net
    if K < 1:
        raise ModelError("horizon K must be at least 1")
    demand = np.asarray(demand, dtype=float)
    if demand.shape != (K, idx.n_links, idx.n_comm):
        raise ModelError(
            f"demand must have shape (K, links, commodities) = "
            f"{(K, idx.n_links, idx.n_comm)}, got {demand.shape}"
        )
    if (demand < 0).any():
        raise ModelError("negative demand rate")
    turning.validate(net)

    part = partition(N, h) if constant_s is None else None
    if constant_s is not None and constant_s <= 0:
        raise ModelError("constant saturation rate must be positive")

    # feasibility of the green bounds, and per-phase upper bounds
    g_ub: dict[tuple[int, int], float] = {}
    for j in sorted(net.nodes):
        node = net.nodes[j]
        budget = C - node.lost_time
        if budget <= 0:
            raise InfeasibleBoundsError(f"lost time at intersection {j} exceeds the cycle")
        if g_min * len(node.phases) > budget + 1e-12:
            raise InfeasibleBoundsError(
                f"minimum greens at intersection {j} ({g_min} x {len(node.phases)}) "
                f"exceed the usable cycle time {budget}"
            )
        for i in range(len(node.phases)):
            # implied by the cycle row plus the other phases' minimums
            g_ub[(j, i)] = budget - g_min * (len(node.phases) - 1)

    # carried (link, commodity) pairs
    carried: set[tuple[int, int]] = {(z, 0) for z in idx.link_ids}
    for d in idx.commodities[1:]:
        for z in idx.link_ids:
            reachable = math.isfinite(costs.cost(z, d))
            has_mass = x0.x[idx.link_pos[z], idx.comm_pos[d]] > 0
            has_demand = demand[:, idx.link_pos[z], idx.comm_pos[d]].sum() > 0
            if reachable:
                carried.add((z, d))
            elif has_mass or has_demand:
                raise ModelError(
                    f"link {z} holds or receives demand for destination {d} "
                    f"but cannot reach it"
                )

    moves = movement_tuples(idx, costs, turning, carried, epsilon)
    moves_from: dict[tuple[int, int], list[tuple[int, int, int]]] = {}
    moves_into: dict[tuple[int, int], list[tuple[int, int, int]]] = {}
    for zmd in moves:
        z, m, d = zmd
        moves_from.setdefault((z, d), []).append(zmd)
        moves_into.setdefault((m, d), []).append(zmd)

    model = MilpModel(name=f"horizon{K}_N{N if part else 'const'}")
    model.meta.update(
        dict(K=K, N=(N if part else 0), C=C, g_min=g_min, moves=moves,
             link_ids=idx.link_ids, commodities=idx.commodities,
             constant_s=constant_s, weights=weights)
    )

    def Gmax(z: int) -> float:
        return C - net.nodes[net.links[z].downstream].lost_time

    s_lo = h.s_min if constant_s is None else constant_s
    s_hi = h.s_max if constant_s is None else constant_s

    # ---- variables -------------------------------------------------------
    for k in range(K + 1):
        for z in idx.link_ids:
            for d in idx.commodities:
                if (z, d) in carried:
                    model.add_var(f"x_{z}_{d}_{k}", 0.0, net.links[z].x_max,
                                  key=("x", z, d, k))
    for k in range(K + 1):
        for z in idx.link_ids:
            model.add_var(f"X_{z}_{k}", 0.0, net.links[z].x_max, key=("X", z, k))
    for k in range(K):
        for j in sorted(net.nodes):
            for i in range(len(net.nodes[j].phases)):
                model.add_var(f"g_{j}_{i}_{k}", g_min, g_ub[(j, i)], key=("g", j, i, k))
    for k in range(K):
        for z, m, d in moves:
            model.add_var(f"G_{z}_{m}_{d}_{k}", 0.0, Gmax(z), key=("G", z, m, d, k))
            model.add_var(f"f_{z}_{m}_{d}_{k}", 0.0, Gmax(z) * s_hi / C,
                          key=("f", z, m, d, k))
    for k in range(K):
        for z in idx.link_ids:
            for d in idx.commodities:
                if (z, d) in moves_into and (z, d) in carried:
                    model.add_var(f"p_{z}_{d}_{k}", 0.0, math.inf, key=("p", z, d, k))
    for k in range(K):
        for z in idx.link_ids:
            for d in idx.commodities:
                if (z, d) not in carried:
                    continue
                if z == d or (z, d) in moves_from:
                    model.add_var(f"q_{z}_{d}_{k}", 0.0, math.inf, key=("q", z, d, k))
    for k in range(K):
        for z in idx.link_ids:
            if turning.exit_share.get(z, 0.0) > 0:
                model.add_var(f"r_{z}_{k}", 0.0, math.inf, key=("r", z, k))
    for k in range(K):
        for z in idx.link_ids:
            model.add_var(f"s_{z}_{k}", s_lo, s_hi, key=("s", z, k))
            model.add_var(f"phi_{z}_{k}", 0.0, h.h_hdv * net.links[z].x_max,
                          key=("phi", z, k))
    if part is not None:
        for k in range(K):
            for z in idx.link_ids:
                phi_max = h.h_hdv * net.links[z].x_max
                for n in range(1, N + 1):
                    model.add_var(f"w_{n}_{z}_{k}", 0.0, 1.0, binary=True,
                                  key=("omega", n, z, k))
                    model.add_var(f"dphi_{n}_{z}_{k}", 0.0, phi_max,
                                  key=("dphi", n, z, k))
                model.add_var(f"ds_{z}_{k}", 0.0, part.beta, key=("ds", z, k))
                model.add_var(f"dX_{z}_{k}", 0.0, part.beta * phi_max,
                              key=("dX", z, k))

    # ---- rows ------------------------------------------------------------
    # initial state
    for z in idx.link_ids:
        for d in idx.commodities:
            if (z, d) in carried:
                model.add_row(
                    f"init_{z}_{d}",
                    [(model.index[("x", z, d, 0)], 1.0)],
                    "=",
                    float(x0.x[idx.link_pos[z], idx.comm_pos[d]]),
                )

    # conservation dynamics
    for k in range(K):
        for z in idx.link_ids:
            e = turning.exit_share.get(z, 0.0)
            for d in idx.commodities:
                if (z, d) not in carried:
                    continue
                terms = [
                    (model.index[("x", z, d, k + 1)], 1.0),
                    (model.index[("x", z, d, k)], -1.0),
                ]
                if ("p", z, d, k) in model.index:
                    terms.append((model.index[("p", z, d, k)], -C))
                if ("q", z, d, k) in model.index:
                    terms.append((model.index[("q", z, d, k)], C))
                if d == 0 and ("r", z, k) in model.index:
                    terms.append((model.index[("r", z, k)], C))
                rhs = C * demand[k, idx.link_pos[z], idx.comm_pos[d]]
                model.add_row(f"dyn_{z}_{d}_{k}", terms, "=", rhs)

    # inflow aggregation
    for k in range(K):
        for (z, d), key in ((kd, ("p",) + kd + (k,)) for kd in moves_into):
            if key in model.index:
                terms = [(model.index[key], 1.0)]
                for i, m, dd in moves_into[(z, d)]:
                    terms.append((model.index[("f", i, m, dd, k)], -1.0))
                model.add_row(f"inflow_{z}_{d}_{k}", terms, "=", 0.0)

    # outflow definitions
    for k in range(K):
        for z in idx.link_ids:
            for d in idx.commodities:
                key = ("q", z, d, k)
                if key not in model.index:
                    continue
                if z == d:
                    model.add_row(
                        f"arrive_{z}_{k}",
                        [(model.index[key], 1.0), (model.index[("x", z, d, k)], -1.0 / C)],
                        "=",
                        0.0,
                    )
                else:
                    terms = [(model.index[key], 1.0)]
                    for zz, m, dd in moves_from[(z, d)]:
                        terms.append((model.index[("f", zz, m, dd, k)], -1.0))
                    model.add_row(f"outflow_{z}_{d}_{k}", terms, "=", 0.0)

    # HDV exit flow
    for k in range(K):
        for z in idx.link_ids:
            if ("r", z, k) in model.index:
                e = turning.exit_share[z]
                model.add_row(
                    f"exit_{z}_{k}",
                    [(model.index[("r", z, k)], 1.0), (model.index[("x", z, 0, k)], -e / C)],
                    "=",
                    0.0,
                )

    # HDV turning split: f(z, m, 0) = that successor's share of q(z, 0)
    for k in range(K):
        for z in idx.link_ids:
            split = turning.successor_split(z)
            if ("q", z, 0, k) not in model.index:
                continue
            for m, frac in sorted(split.items()):
                model.add_row(
                    f"split_{z}_{m}_{k}",
                    [
                        (model.index[("f", z, m, 0, k)], 1.0),
                        (model.index[("q", z, 0, k)], -frac),
                    ],
                    "=",
                    0.0,
                )

    # transport law per movement
    for k in range(K):
        for z, m, d in moves:
            fv = model.index[("f", z, m, d, k)]
            Gv = model.index[("G", z, m, d, k)]
            if constant_s is not None:
                model.add_row(
                    f"lin_{z}_{m}_{d}_{k}",
                    [(fv, 1.0), (Gv, -constant_s / C)],
                    "=",
                    0.0,
                )
                continue
            sv = model.index[("s", z, k)]
            gm = Gmax(z)
            # f >= s_min G / C
            model.add_row(f"mc1_{z}_{m}_{d}_{k}", [(fv, 1.0), (Gv, -h.s_min / C)], ">=", 0.0)
            # f >= (Gmax s + s_max (G - Gmax)) / C
            model.add_row(
                f"mc2_{z}_{m}_{d}_{k}",
                [(fv, 1.0), (sv, -gm / C), (Gv, -h.s_max / C)],
                ">=",
                -gm * h.s_max / C,
            )
            # f <= (Gmax s + s_min (G - Gmax)) / C
            model.add_row(
                f"mc3_{z}_{m}_{d}_{k}",
                [(fv, 1.0), (sv, -gm / C), (Gv, -h.s_min / C)],
                "<=",
                -gm * h.s_min / C,
            )
            # f <= s_max G / C
            model.add_row(f"mc4_{z}_{m}_{d}_{k}", [(fv, 1.0), (Gv, -h.s_max / C)], "<=", 0.0)

    # green budget per link, cycle allocation per intersection
    for k in range(K):
        for z in idx.link_ids:
            if (z, 0) not in moves_from and not any(
                (z, d) in moves_from for d in idx.commodities[1:]
            ):
                continue
            j = net.links[z].downstream
            terms = []
            for d in idx.commodities:
                for zz, m, dd in moves_from.get((z, d), ()):
                    terms.append((model.index[("G", zz, m, dd, k)], 1.0))
            for i in net.row_phases[z]:
                terms.append((model.index[("g", j, i, k)], -1.0))
            model.add_row(f"budget_{z}_{k}", terms, "<=", 0.0)
        for j in sorted(net.nodes):
            node = net.nodes[j]
            model.add_row(
                f"cycle_{j}_{k}",
                [(model.index[("g", j, i, k)], 1.0) for i in range(len(node.phases))],
                "=",
                C - node.lost_time,
            )

    # total queue per link
    for k in range(K + 1):
        for z in idx.link_ids:
            terms = [(model.index[("X", z, k)], 1.0)]
            for d in idx.commodities:
                if (z, d) in carried:
                    terms.append((model.index[("x", z, d, k)], -1.0))
            model.add_row(f"total_{z}_{k}", terms, "=", 0.0)

    # weighted occupancy phi = h_cav * CAV queue + h_hdv * HDV queue
    for k in range(K):
        for z in idx.link_ids:
            terms = [(model.index[("phi", z, k)], 1.0)]
            for d in idx.commodities:
                if (z, d) in carried:
                    hh = h.h_hdv if d == 0 else h.h_cav
                    terms.append((model.index[("x", z, d, k)], -hh))
            model.add_row(f"occ_{z}_{k}", terms, "=", 0.0)

    # convex hull of X = s * phi over the saturation partition
    if part is not None:
        for k in range(K):
            for z in idx.link_ids:
                phi_max = h.h_hdv * net.links[z].x_max
                omegas = [model.index[("omega", n, z, k)] for n in range(1, N + 1)]
                dphis = [model.index[("dphi", n, z, k)] for n in range(1, N + 1)]
                sv = model.index[("s", z, k)]
                phiv = model.index[("phi", z, k)]
                Xv = model.index[("X", z, k)]
                dsv = model.index[("ds", z, k)]
                dXv = model.index[("dX", z, k)]
                model.add_row(
                    f"seg_{z}_{k}", [(w, 1.0) for w in omegas], "=", 1.0
                )
                model.add_row(
                    f"rate_{z}_{k}",
                    [(sv, 1.0), (dsv, -1.0)]
                    + [(w, -part.beta * n) for n, w in zip(range(0, N), omegas)],
                    "=",
                    h.s_min,
                )
                model.add_row(
                    f"occsum_{z}_{k}",
                    [(phiv, 1.0)] + [(dp, -1.0) for dp in dphis],
                    "=",
                    0.0,
                )
                for n, dp, w in zip(range(1, N + 1), dphis, omegas):
                    model.add_row(
                        f"occseg_{n}_{z}_{k}", [(dp, 1.0), (w, -phi_max)], "<=", 0.0
                    )
                model.add_row(
                    f"mcu1_{z}_{k}", [(dXv, 1.0), (dsv, -phi_max)], "<=", 0.0
                )
                model.add_row(
                    f"mcu2_{z}_{k}", [(dXv, 1.0), (phiv, -part.beta)], "<=", 0.0
                )
                model.add_row(
                    f"mcl_{z}_{k}",
                    [(dXv, 1.0), (dsv, -phi_max), (phiv, -part.beta)],
                    ">=",
                    -part.beta * phi_max,
                )
                model.add_row(
                    f"prod_{z}_{k}",
                    [(Xv, 1.0), (phiv, -h.s_min), (dXv, -1.0)]
                    + [(dp, -part.beta * n) for n, dp in zip(range(0, N), dphis)],
                    "=",
                    0.0,
                )

    # ---- objective ---------------------------------------------------------
    for k in range(K + 1):
        for z in idx.link_ids:
            xmax = net.links[z].x_max
            for d in idx.commodities[1:]:
                if (z, d) in carried:
                    t = add_pwl_quadratic(
                        model, model.index[("x", z, d, k)], xmax, pwl_segments,
                        name=f"tx_{z}_{d}_{k}", key=("tx", z, d, k),
                    )
                    model.add_obj(t, 1.0)
            if weights.w1 > 0:
                t = add_pwl_quadratic(
                    model, model.index[("x", z, 0, k)], xmax, pwl_segments,
                    name=f"tx_{z}_0_{k}", key=("tx", z, 0, k),
                )
                model.add_obj(t, weights.w1)
    if weights.w2 > 0:
        for z in idx.link_ids:
            for d in idx.commodities[1:]:
                if (z, d) in carried and z != d:
                    model.add_obj(model.index[("x", z, d, K)], weights.w2 * costs.cost(z, d))
    if weights.w3 > 0:
        for z in idx.link_ids:
            t = add_pwl_quadratic(
                model, model.index[("X", z, K)], net.links[z].x_max, pwl_segments,
                name=f"tX_{z}", key=("tX", z),
            )
            model.add_obj(t, weights.w3)
    if weights.w4 > 0:
        if g_prev is None:
            g_prev = {
                (j, i): (C - net.nodes[j].lost_time) / len(net.nodes[j].phases)
                for j in sorted(net.nodes)
                for i in range(len(net.nodes[j].phases))
            }
        for k in range(K):
            for j in sorted(net.nodes):
                for i in range(len(net.nodes[j].phases)):
                    span = g_ub[(j, i)] - g_min
                    dg = model.add_var(
                        f"dg_{j}_{i}_{k}", -span, span, key=("dg", j, i, k)
                    )
                    terms = [(dg, 1.0), (model.index[("g", j, i, k)], -1.0)]
                    if k == 0:
                        rhs = -float(g_prev[(j, i)])
                    else:
                        terms.append((model.index[("g", j, i, k - 1)], 1.0))
                        rhs = 0.0
                    model.add_row(f"smooth_{j}_{i}_{k}", terms, "=", rhs)
                    t = add_pwl_quadratic(
                        model, dg, 1.0, pwl_segments,
                        name=f"tdg_{j}_{i}_{k}", key=("tdg", j, i, k),
                    )
                    model.add_obj(t, weights.w4)

    model.validate()
    return model


def nonlinear_objective(
    states: Sequence,
    plans: Sequence,
    costs: CostMatrix,
    idx: Indexer,
    weights: Weights,
    g_prev: Mapping[tuple[int, int], float] | None = None,
    C: float = 120.0,
) -> float:
    """Exact cost of a simulated trajectory, quadratic terms unrelaxed.

    Mirrors the horizon objective term for term — queue quadratics over
    every step including the initial one, remaining-distance and capacity
    pressure on the final state, and squared green changes anchored at
    g_prev — but evaluates the true x^2 / x_max instead of the chord
    interpolant.  Comparing it with the relaxed optimum measures the
    envelope approximation error.
    """
    net = idx.net
    K = len(plans)
    if len(states) != K + 1:
        raise ModelError(f"got {len(states)} states for {K} plan steps")
    J = 0.0
    for st in states:
        for pos, z in enumerate(idx.link_ids):
            xmax = net.links[z].x_max
            for cpos, d in enumerate(idx.commodities):
                v = float(st.x[pos, cpos])
                if d == 0:
                    if weights.w1 > 0:
                        J += weights.w1 * v * v / xmax
                else:
                    J += v * v / xmax
    final = states[K]
    if weights.w2 > 0:
        for pos, z in enumerate(idx.link_ids):
            for cpos, d in enumerate(idx.commodities):
                if d == 0 or z == d:
                    continue
                v = float(final.x[pos, cpos])
                if v > 0:
                    J += weights.w2 * costs.cost(z, d) * v
    if weights.w3 > 0:
        for pos, z in enumerate(idx.link_ids):
            tot = float(final.x[pos].sum())
            J += weights.w3 * tot * tot / net.links[z].x_max
    if weights.w4 > 0:
        if g_prev is None:
            g_prev = {
                (j, i): (C - net.nodes[j].lost_time) / len(net.nodes[j].phases)
                for j in sorted(net.nodes)
                for i in range(len(net.nodes[j].phases))
            }
        prev = dict(g_prev)
        for plan in plans:
            for key in sorted(plan.greens):
                dg = plan.greens[key] - prev.get(key, plan.greens[key])
                J += weights.w4 * dg * dg
            prev = dict(plan.greens)
    return J
