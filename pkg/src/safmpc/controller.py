"""Receding-horizon controller: activation, smoothing, solve, plan extraction.

Each cycle the controller measures the network, smooths the observed HDV
turning rates, updates the congestion-activation flag by hysteresis, and
— while active — solves the horizon model and applies only the first
step of the optimized plan.  When inactive, infeasible, or running the
FixedTime preset it falls back to an equal-split signal plan with
shortest-path CAV routing.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .dynamics import HeadwayParams, Indexer, PlanStep, QueueState, TurningRates
from .model import Weights, build_milp
from .network import CostMatrix, Network, admissible_successors
from .solve import MipSolution, SolveLimits, backend_solve


class ThresholdOrderError(ValueError):
    """Activation threshold must sit strictly above the deactivation one."""


class RepairError(RuntimeError):
    """A solved signal plan violates the cycle identity beyond tolerance."""


def activation_update(max_queue: float, gamma_prev: int, x_act: float, x_deact: float) -> int:
    """Hysteresis switch: on above x_act, off below x_deact, else hold."""
    if not (0 <= x_deact < x_act):
        raise ThresholdOrderError(
            f"need 0 <= x_deact < x_act, got x_act={x_act}, x_deact={x_deact}"
        )
    if max_queue > x_act:
        return 1
    if max_queue < x_deact:
        return 0
    return int(gamma_prev)


def smooth_turning(prev: float, observed: float, alpha: float = 0.9) -> float:
    """Exponential smoothing of one turning fraction."""
    if not 0 <= alpha <= 1:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * observed + (1.0 - alpha) * prev


@dataclass
class Measurements:
    """What the controller sees at a cycle boundary.

    observed_turning maps link -> (successor fractions, exit share) as
    estimated from that cycle's HDV outflow; links with no HDV outflow
    that cycle are absent.
    """

    state: QueueState
    observed_turning: dict[int, tuple[dict[int, float], float]] = field(default_factory=dict)


@dataclass
class StepDiagnostics:
    step: int
    gamma: int
    status: str
    objective: float | None
    best_bound: float | None
    rel_gap: float | None
    nodes: int
    solve_seconds: float
    greens: dict[tuple[int, int], float]
    fault: str | None = None
    s_model: dict[int, float] | None = None


@dataclass
class ControllerParams:
    mode: str = "DynamicSF"  # FixedTime | ConstantSF | DynamicSF
    K: int = 2
    N: int = 5
    C: float = 120.0
    g_min: float = 30.0
    weights: Weights = field(default_factory=Weights)
    headways: HeadwayParams = field(default_factory=HeadwayParams)
    x_act: float = 20.0
    x_deact: float = 10.0
    alpha: float = 0.9
    constant_s: float = 1600.0 / 3600.0  # veh/s, fixed-rate baseline
    pwl_segments: int = 8
    limits: SolveLimits = field(default_factory=SolveLimits)
    backend: str = "internal"
    epsilon: float = 0.0

    def __post_init__(self) -> None:
        if self.mode not in ("FixedTime", "ConstantSF", "DynamicSF"):
            raise ValueError(f"unknown control mode {self.mode!r}")
        if not (0 <= self.x_deact < self.x_act):
            raise ThresholdOrderError(
                f"need 0 <= x_deact < x_act, got {self.x_act}, {self.x_deact}"
            )


def fixed_time_greens(net: Network, C: float) -> dict[tuple[int, int], float]:
    """Equal split of the usable cycle over each intersection's phases."""
    greens = {}
    for j in sorted(net.nodes):
        node = net.nodes[j]
        share = (C - node.lost_time) / len(node.phases)
        for i in range(len(node.phases)):
            greens[(j, i)] = share
    return greens


def shortest_path_routing(
    net: Network, costs: CostMatrix, idx: Indexer, epsilon: float = 0.0
) -> dict[tuple[int, int], dict[int, float]]:
    """All-or-nothing CAV splits: best admissible successor, ties lowest id."""
    routing: dict[tuple[int, int], dict[int, float]] = {}
    for z in idx.link_ids:
        for d in idx.commodities[1:]:
            if z == d:
                continue
            options = admissible_successors(net, costs, z, d, epsilon)
            if options:
                best = min(options, key=lambda m: (costs.cost(m, d), m))
                routing[(z, d)] = {best: 1.0}
    return routing


def extract_cav_turning(
    G: Mapping[tuple[int, int, int], float],
    net: Network,
    costs: CostMatrix,
    idx: Indexer,
    epsilon: float = 0.0,
    tol: float = 1e-9,
) -> dict[tuple[int, int], dict[int, float]]:
    """Turn optimized greens into CAV routing commands.

    t(z, m, d) = G(z, m, d) / sum_m G(z, ., d); when a destination got no
    green on a link, fall back to its shortest admissible successor.
    """
    fallback = shortest_path_routing(net, costs, idx, epsilon)
    groups: dict[tuple[int, int], dict[int, float]] = {}
    for (z, m, d), val in G.items():
        if d == 0:
            continue
        row = groups.setdefault((z, d), {})
        row[m] = row.get(m, 0.0) + val
    routing = dict(fallback)
    for (z, d), row in groups.items():
        denom = sum(row.values())
        if denom > tol:
            routing[(z, d)] = {m: v / denom for m, v in sorted(row.items())}
    return routing


def repair_greens(
    greens: dict[tuple[int, int], float],
    net: Network,
    C: float,
    g_min: float,
    tol: float = 1e-6,
) -> dict[tuple[int, int], float]:
    """Force each intersection's greens to sum exactly to C - L(j).

    Solver output satisfies the cycle rows only to LP tolerance; residuals
    up to ``tol`` seconds are absorbed by the phase with the most slack
    above g_min.  Anything larger is treated as a solver fault.
    """
    repaired = dict(greens)
    for j in sorted(net.nodes):
        node = net.nodes[j]
        budget = C - node.lost_time
        phases = [(j, i) for i in range(len(node.phases))]
        total = sum(repaired[p] for p in phases)
        if abs(total - budget) > tol:
            raise RepairError(
                f"intersection {j} greens sum to {total}, budget {budget}"
            )
        for p in phases:
            repaired[p] = max(repaired[p], g_min)
        slack_phase = max(phases, key=lambda p: repaired[p] - g_min)
        others = sum(repaired[p] for p in phases if p != slack_phase)
        repaired[slack_phase] = budget - others
        if repaired[slack_phase] < g_min - 1e-9:
            raise RepairError(f"cannot repair greens at intersection {j}")
    return repaired


def disaggregate_plan(
    greens: dict[tuple[int, int], float],
    state: QueueState,
    turning: TurningRates,
    routing: dict[tuple[int, int], dict[int, float]],
    idx: Indexer,
) -> PlanStep:
    """Spread link greens over (successor, commodity) movements by queue share.

    Used for plans with no optimized G (fixed-time and fallback): each
    commodity on a link receives green proportional to its share of the
    queue, split across successors by the routing (CAVs) or smoothed
    turning rates (HDVs).  Empty links get no movement green — nothing to
    discharge under store-and-forward dynamics.
    """
    net = idx.net
    G: dict[tuple[int, int, int], float] = {}
    totals = state.total()
    for z in idx.link_ids:
        if net.links[z].downstream is None:
            continue
        X = totals[idx.link_pos[z]]
        if X <= 0:
            continue
        j = net.links[z].downstream
        g_link = sum(greens[(j, i)] for i in net.row_phases[z])
        for d in idx.commodities:
            veh = state.x[idx.link_pos[z], idx.comm_pos[d]]
            if veh <= 0 or (d != 0 and z == d):
                continue
            share = veh / X
            split = turning.successor_split(z) if d == 0 else routing.get((z, d), {})
            for m, frac in sorted(split.items()):
                if frac > 0:
                    G[(z, m, d)] = G.get((z, m, d), 0.0) + g_link * share * frac
    return PlanStep(greens=dict(greens), G=G, t_cav=dict(routing))


class MpcController:
    """Stateful cycle-by-cycle controller."""

    def __init__(
        self,
        net: Network,
        costs: CostMatrix,
        idx: Indexer,
        params: ControllerParams,
        turning_init: TurningRates | None = None,
    ):
        self.net = net
        self.costs = costs
        self.idx = idx
        self.params = params
        self.turning = turning_init or TurningRates.uniform(net)
        self.turning.validate(net)
        self.gamma = 0
        self.g_prev = fixed_time_greens(net, params.C)
        self.step_count = 0
        self.faults: list[str] = []

    # -- state updates -----------------------------------------------------

    def _update_turning(self, observed: dict[int, tuple[dict[int, float], float]]) -> None:
        a = self.params.alpha
        for z, (obs_row, obs_exit) in sorted(observed.items()):
            succ = self.net.successors(z)
            prev_row = self.turning.rates.get(z, {})
            prev_exit = self.turning.exit_share.get(z, 0.0)
            blended = {
                m: smooth_turning(prev_row.get(m, 0.0), obs_row.get(m, 0.0), a)
                for m in succ
            }
            e = smooth_turning(prev_exit, obs_exit, a)
            total = e + sum(blended.values())
            if total <= 0:
                continue
            self.turning.rates[z] = {m: v / total for m, v in blended.items()}
            self.turning.exit_share[z] = e / total

    def _fallback_plan(self, meas: Measurements) -> PlanStep:
        greens = fixed_time_greens(self.net, self.params.C)
        routing = shortest_path_routing(self.net, self.costs, self.idx, self.params.epsilon)
        return disaggregate_plan(greens, meas.state, self.turning, routing, self.idx)

    # -- main entry ----------------------------------------------------------

    def step(self, meas: Measurements, demand_rates: np.ndarray) -> tuple[PlanStep, StepDiagnostics]:
        """Compute the plan to apply for the coming cycle.

        demand_rates is the current (links, commodities) boundary-rate
        matrix in veh/s; the horizon holds it constant.
        """
        p = self.params
        self._update_turning(meas.observed_turning)

        if p.mode == "FixedTime":
            plan = self._fallback_plan(meas)
            diag = StepDiagnostics(
                step=self.step_count, gamma=0, status="fixed", objective=None,
                best_bound=None, rel_gap=None, nodes=0, solve_seconds=0.0,
                greens=plan.greens,
            )
            self._commit(plan)
            return plan, diag

        max_queue = float(meas.state.total().max(initial=0.0))
        self.gamma = activation_update(max_queue, self.gamma, p.x_act, p.x_deact)

        if self.gamma == 0:
            plan = self._fallback_plan(meas)
            diag = StepDiagnostics(
                step=self.step_count, gamma=0, status="inactive", objective=None,
                best_bound=None, rel_gap=None, nodes=0, solve_seconds=0.0,
                greens=plan.greens,
            )
            self._commit(plan)
            return plan, diag

        demand = np.tile(np.asarray(demand_rates, dtype=float), (p.K, 1, 1))
        t0 = time.perf_counter()
        fault = None
        sol: MipSolution | None = None
        try:
            model = build_milp(
                self.idx, self.costs, meas.state, demand, self.turning,
                p.weights, p.headways, p.K, p.N, p.C, g_min=p.g_min,
                g_prev=self.g_prev,
                constant_s=(p.constant_s if p.mode == "ConstantSF" else None),
                pwl_segments=p.pwl_segments, epsilon=p.epsilon,
            )
            sol = backend_solve(model, p.backend, p.limits)
        except Exception as exc:  # solver faults degrade to the fallback plan
            fault = f"{type(exc).__name__}: {exc}"
        solve_seconds = time.perf_counter() - t0

        if fault is None and sol is not None and sol.x is not None:
            try:
                raw = {
                    (j, i): model.value(sol.x, ("g", j, i, 0))
                    for j in sorted(self.net.nodes)
                    for i in range(len(self.net.nodes[j].phases))
                }
                greens = repair_greens(raw, self.net, p.C, p.g_min)
                G = {
                    (z, m, d): max(model.value(sol.x, ("G", z, m, d, 0)), 0.0)
                    for (z, m, d) in model.meta["moves"]
                }
                G = _clamp_to_budget(G, greens, self.net, self.idx)
                routing = extract_cav_turning(
                    G, self.net, self.costs, self.idx, p.epsilon
                )
                plan = PlanStep(greens=greens, G=G, t_cav=routing)
                s_model = {
                    z: model.value(sol.x, ("s", z, 0)) for z in self.idx.link_ids
                }
                diag = StepDiagnostics(
                    step=self.step_count, gamma=1, status=sol.status,
                    objective=sol.objective, best_bound=sol.best_bound,
                    rel_gap=sol.rel_gap, nodes=sol.node_count,
                    solve_seconds=solve_seconds, greens=greens, s_model=s_model,
                )
                self._commit(plan)
                return plan, diag
            except RepairError as exc:
                fault = str(exc)
        if fault is None and sol is not None:
            fault = f"no plan available (solver status {sol.status})"

        self.faults.append(f"step {self.step_count}: {fault}")
        plan = self._fallback_plan(meas)
        diag = StepDiagnostics(
            step=self.step_count, gamma=1, status="fallback", objective=None,
            best_bound=None, rel_gap=None, nodes=(sol.node_count if sol else 0),
            solve_seconds=solve_seconds, greens=plan.greens, fault=fault,
        )
        self._commit(plan)
        return plan, diag

    def _commit(self, plan: PlanStep) -> None:
        self.g_prev = dict(plan.greens)
        self.step_count += 1


def _clamp_to_budget(
    G: dict[tuple[int, int, int], float],
    greens: dict[tuple[int, int], float],
    net: Network,
    idx: Indexer,
) -> dict[tuple[int, int, int], float]:
    """Scale each link's movement greens down to its repaired phase green."""
    totals: dict[int, float] = {}
    for (z, m, d), v in G.items():
        totals[z] = totals.get(z, 0.0) + v
    out = dict(G)
    for z, tot in totals.items():
        j = net.links[z].downstream
        g_link = sum(greens[(j, i)] for i in net.row_phases[z])
        if tot > g_link and tot > 0:
            scale = g_link / tot
            for key in list(out):
                if key[0] == z:
                    out[key] *= scale
    return out
