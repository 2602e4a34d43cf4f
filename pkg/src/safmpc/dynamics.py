"""Store-and-forward traffic dynamics with composition-dependent discharge.

Queues are tracked per (link, commodity): commodity 0 is the aggregate
HDV flow, every other commodity is a CAV destination (an exit link).
Saturation rates depend on the queue mix through the space-mean headway,
so a platoon's discharge capacity rises with its CAV share.

All internal quantities are vehicles and seconds; flow variables are
rates in veh/s that act over one cycle of C seconds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .network import CostMatrix, Network


class ConservationError(RuntimeError):
    """A state update tried to remove more vehicles than a queue holds."""


@dataclass(frozen=True)
class HeadwayParams:
    """Time headways (s/veh) of the two vehicle classes at saturation."""

    h_cav: float = 1.8
    h_hdv: float = 2.7

    def __post_init__(self) -> None:
        if not 0 < self.h_cav <= self.h_hdv:
            raise ValueError(
                f"need 0 < h_cav <= h_hdv, got h_cav={self.h_cav}, h_hdv={self.h_hdv}"
            )

    @property
    def s_min(self) -> float:
        """All-HDV saturation rate, veh/s."""
        return 1.0 / self.h_hdv

    @property
    def s_max(self) -> float:
        """All-CAV saturation rate, veh/s."""
        return 1.0 / self.h_cav


def saturation_rate(x_cav, x_hdv, h: HeadwayParams):
    """Queue-composition saturation rate X / (h_cav*x_cav + h_hdv*x_hdv), veh/s.

    Empty links fall back to the all-HDV rate.  Works elementwise on
    arrays; scalars in, float out.
    """
    xc = np.asarray(x_cav, dtype=float)
    xh = np.asarray(x_hdv, dtype=float)
    total = xc + xh
    phi = h.h_cav * xc + h.h_hdv * xh
    s = np.divide(total, phi, out=np.full(np.broadcast(xc, xh).shape, h.s_min), where=phi > 0)
    s = np.clip(s, h.s_min, h.s_max)
    if s.ndim == 0:
        return float(s)
    return s


def autonomy_level(x_cav, x_total):
    """CAV fraction of a queue; 0 for an empty queue."""
    xc = np.asarray(x_cav, dtype=float)
    xt = np.asarray(x_total, dtype=float)
    theta = np.divide(xc, xt, out=np.zeros(np.broadcast(xc, xt).shape), where=xt > 0)
    if theta.ndim == 0:
        return float(theta)
    return theta


class Indexer:
    """Maps (link id, commodity id) to dense array positions.

    Shared by the dynamics, the optimization model, the plant, and the
    metrics so every array means the same thing everywhere.  Commodity
    order is (0, *sorted destinations).
    """

    def __init__(self, net: Network):
        self.net = net
        self.link_ids: tuple[int, ...] = tuple(sorted(net.links))
        self.link_pos: dict[int, int] = {z: i for i, z in enumerate(self.link_ids)}
        self.commodities: tuple[int, ...] = (0,) + net.destinations
        self.comm_pos: dict[int, int] = {d: c for c, d in enumerate(self.commodities)}
        self.n_links = len(self.link_ids)
        self.n_comm = len(self.commodities)
        self.x_max = np.array([net.links[z].x_max for z in self.link_ids])
        self.lengths = np.array([net.links[z].length for z in self.link_ids])

    def zeros(self) -> np.ndarray:
        return np.zeros((self.n_links, self.n_comm))

    def state_from_pairs(self, pairs: Mapping[tuple[int, int], float], step: int = 0) -> "QueueState":
        x = self.zeros()
        for (z, d), veh in pairs.items():
            x[self.link_pos[z], self.comm_pos[d]] = veh
        return QueueState(x=x, step=step)


@dataclass
class QueueState:
    """Per-(link, commodity) queue lengths in vehicles at one cycle boundary."""

    x: np.ndarray
    step: int = 0

    def total(self) -> np.ndarray:
        """X(z): vehicles on each link regardless of commodity."""
        return self.x.sum(axis=1)

    def cav_total(self) -> np.ndarray:
        return self.x[:, 1:].sum(axis=1)

    def hdv(self) -> np.ndarray:
        return self.x[:, 0]

    def copy(self) -> "QueueState":
        return QueueState(x=self.x.copy(), step=self.step)


@dataclass
class TurningRates:
    """HDV turning fractions per link plus the exit share e(z).

    ``rates[z][m]`` is the fraction of link z's HDV outflow heading to
    successor m; ``exit_share[z]`` the fraction leaving the network at z.
    For every link the row plus exit share must sum to 1.
    """

    rates: dict[int, dict[int, float]]
    exit_share: dict[int, float]

    @classmethod
    def uniform(cls, net: Network, exit_share: Mapping[int, float] | None = None) -> "TurningRates":
        """Equal split over successors; exits absorb their HDV queue."""
        shares = dict(exit_share or {})
        rates: dict[int, dict[int, float]] = {}
        out_share: dict[int, float] = {}
        for z in sorted(net.links):
            succ = net.successors(z)
            e = shares.get(z, 1.0 if net.links[z].is_exit else 0.0)
            out_share[z] = e
            if succ:
                rates[z] = {m: (1.0 - e) / len(succ) for m in succ}
            else:
                rates[z] = {}
        return cls(rates=rates, exit_share=out_share)

    def validate(self, net: Network, tol: float = 1e-9) -> None:
        for z in sorted(net.links):
            row = self.rates.get(z, {})
            succ = set(net.successors(z))
            if not set(row) <= succ:
                raise ValueError(f"turning row of link {z} references non-successor links")
            e = self.exit_share.get(z, 0.0)
            if e < -tol or any(v < -tol for v in row.values()):
                raise ValueError(f"negative turning fraction on link {z}")
            total = e + sum(row.values())
            if succ or e:
                if abs(total - 1.0) > tol:
                    raise ValueError(
                        f"turning row of link {z} sums to {total}, expected 1"
                    )

    def successor_split(self, z: int) -> dict[int, float]:
        """Turning row renormalized over successors only (exit share removed)."""
        row = {m: v for m, v in self.rates.get(z, {}).items() if v > 0}
        total = sum(row.values())
        if total <= 0:
            return {}
        return {m: v / total for m, v in row.items()}


@dataclass
class PlanStep:
    """One cycle's control actions, the shape every controller emits.

    greens: seconds of green per (intersection, phase).
    G: seconds of green effectively allotted to each (link, successor,
       commodity) movement; sums over (m, d) stay within the link's phases.
    t_cav: routing splits per (link, destination) over successors, the
       command actually broadcast to CAVs.
    """

    greens: dict[tuple[int, int], float]
    G: dict[tuple[int, int, int], float]
    t_cav: dict[tuple[int, int], dict[int, float]]

    def green_for_link(self, net: Network, z: int) -> float:
        j = net.links[z].downstream
        if j is None:
            return 0.0
        return sum(self.greens[(j, i)] for i in net.row_phases[z])


@dataclass
class FlowSet:
    """Flows of one cycle (veh/s).  f maps (from, to, commodity) transfers;
    p/q/b/r are dense (link, commodity) arrays of inflow, outflow, boundary
    demand, and HDV exit rates; s records the saturation rate used."""

    f: dict[tuple[int, int, int], float]
    p: np.ndarray
    q: np.ndarray
    b: np.ndarray
    r: np.ndarray
    s: np.ndarray


def _apply_caps(
    idx: Indexer,
    x: np.ndarray,
    f: dict[tuple[int, int, int], float],
    arrivals: np.ndarray,
    r: np.ndarray,
    b: np.ndarray,
    C: float,
    max_rounds: int = 100,
) -> tuple[dict[tuple[int, int, int], float], np.ndarray, np.ndarray, np.ndarray]:
    """Scale flows so no queue overdraws and no link exceeds capacity.

    First each (link, commodity) group's total outflow is capped at
    x/C (proportional scaling).  Then links whose inflow would push them
    past x_max have all incoming transfers and demand scaled to the
    receiving headroom; since that reduces upstream outflow (and hence
    upstream headroom), the pass repeats until a fixed point.  Blocked
    transfers stay upstream, blocked demand is dropped.
    """
    # outflow availability, per commodity
    out_group = np.zeros_like(arrivals)
    for (z, m, d), v in f.items():
        out_group[idx.link_pos[z], idx.comm_pos[d]] += v
    out_group += arrivals + r
    cap = x / C
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(out_group > cap + 1e-15, cap / np.where(out_group > 0, out_group, 1.0), 1.0)
    scale = np.clip(scale, 0.0, 1.0)
    f = {k: v * scale[idx.link_pos[k[0]], idx.comm_pos[k[2]]] for k, v in f.items()}
    arrivals = arrivals * scale
    r = r * scale

    X = x.sum(axis=1)
    for _ in range(max_rounds):
        inflow = np.zeros(idx.n_links)
        for (z, m, d), v in f.items():
            inflow[idx.link_pos[m]] += v
        inflow += b.sum(axis=1)
        outgoing = arrivals.sum(axis=1) + r.sum(axis=1)
        for (z, m, d), v in f.items():
            outgoing[idx.link_pos[z]] += v
        headroom = (idx.x_max - X) / C + outgoing
        violated = inflow > headroom + 1e-12
        if not violated.any():
            break
        shrink = np.ones(idx.n_links)
        shrink[violated] = np.maximum(headroom[violated], 0.0) / inflow[violated]
        f = {k: v * shrink[idx.link_pos[k[1]]] for k, v in f.items()}
        b = b * shrink[:, None]
    else:
        raise RuntimeError("inflow capping did not reach a fixed point")
    return f, arrivals, r, b


def transport_flows(
    state: QueueState,
    plan: PlanStep,
    turning: TurningRates,
    costs: CostMatrix,
    idx: Indexer,
    h: HeadwayParams,
    C: float,
    demand: np.ndarray | None = None,
    s_override: np.ndarray | None = None,
) -> FlowSet:
    """Deterministic one-cycle flows under the store-and-forward law.

    CAV movements discharge at G(z, m, d) * s(z) / C; HDV outflow uses the
    link's total HDV green and splits along the turning rates; vehicles
    reaching their destination link leave at x(d, d)/C; HDVs additionally
    exit at e(z) * x(z, 0)/C.  Flows are then capped by availability and
    by downstream storage (see _apply_caps).

    s_override replaces the queue-composition saturation rates with a
    caller-supplied per-link vector (the stochastic plant perturbs them).
    """
    net = idx.net
    x = state.x
    s = saturation_rate(state.cav_total(), state.hdv(), h) if s_override is None else np.asarray(s_override, dtype=float)

    f: dict[tuple[int, int, int], float] = {}
    for (z, m, d), g in plan.G.items():
        if d == 0 or g == 0.0:
            continue
        f[(z, m, d)] = g * s[idx.link_pos[z]] / C
    # HDV: total green over movements, split by turning rates
    g_hdv: dict[int, float] = {}
    for (z, m, d), g in plan.G.items():
        if d == 0:
            g_hdv[z] = g_hdv.get(z, 0.0) + g
    for z, g in g_hdv.items():
        if g <= 0:
            continue
        q_raw = g * s[idx.link_pos[z]] / C
        for m, frac in turning.successor_split(z).items():
            if frac > 0:
                f[(z, m, 0)] = f.get((z, m, 0), 0.0) + frac * q_raw

    arrivals = idx.zeros()
    for d in idx.commodities[1:]:
        arrivals[idx.link_pos[d], idx.comm_pos[d]] = x[idx.link_pos[d], idx.comm_pos[d]] / C
    r = idx.zeros()
    for z in idx.link_ids:
        e = turning.exit_share.get(z, 0.0)
        if e > 0:
            r[idx.link_pos[z], 0] = e * x[idx.link_pos[z], 0] / C

    b = np.zeros_like(x) if demand is None else np.array(demand, dtype=float)
    f, arrivals, r, b = _apply_caps(idx, x, f, arrivals, r, b, C)

    p = idx.zeros()
    q = arrivals.copy()
    for (z, m, d), v in f.items():
        p[idx.link_pos[m], idx.comm_pos[d]] += v
        q[idx.link_pos[z], idx.comm_pos[d]] += v
    return FlowSet(f=f, p=p, q=q, b=b, r=r, s=s)


def step(state: QueueState, flows: FlowSet, C: float) -> QueueState:
    """Advance the queues one cycle: x' = x + C (p - q + b - r)."""
    x_new = state.x + C * (flows.p - flows.q + flows.b - flows.r)
    if (x_new < -1e-9).any():
        worst = float(x_new.min())
        raise ConservationError(f"queue driven negative by {worst:.3e} veh")
    return QueueState(x=np.maximum(x_new, 0.0), step=state.step + 1)


def rollout(
    x0: QueueState,
    plans: Sequence[PlanStep],
    turning: TurningRates,
    costs: CostMatrix,
    idx: Indexer,
    h: HeadwayParams,
    C: float,
    demand: Sequence[np.ndarray] | None = None,
) -> tuple[list[QueueState], list[FlowSet]]:
    """Open-loop rollout: apply a plan sequence from x0, return all states/flows."""
    states = [x0]
    flow_log: list[FlowSet] = []
    for k, plan in enumerate(plans):
        dem = demand[k] if demand is not None else None
        flows = transport_flows(states[-1], plan, turning, costs, idx, h, C, demand=dem)
        flow_log.append(flows)
        states.append(step(states[-1], flows, C))
    return states, flow_log
