"""Directed link-level road network, grid builder, and routing costs.

Links are the modelling unit: each link holds one queue per commodity at
its downstream end.  Interior links connect two signalized intersections,
entry links bring demand into the network, exit links absorb it.  Routing
works on the link graph (z -> m whenever m leaves the intersection that z
feeds), with all-pairs costs computed by Floyd-Warshall.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np


class NetworkError(ValueError):
    """A network definition violates a structural invariant."""


@dataclass(frozen=True)
class Link:
    """One directed road link.

    ``upstream`` is the intersection the link leaves, ``downstream`` the
    one it feeds; entry links have no upstream intersection, exit links
    no downstream one.  ``cost`` is the routing cost charged for entering
    the link (defaults to its length in meters).
    """

    upstream: int | None
    downstream: int | None
    length: float = 200.0
    x_max: float = 40.0
    cost: float | None = None

    def __post_init__(self) -> None:
        if self.upstream is None and self.downstream is None:
            raise NetworkError("a link must touch at least one intersection")
        if self.upstream is not None and self.upstream == self.downstream:
            raise NetworkError("self-loop link")
        if self.length <= 0:
            raise NetworkError(f"link length must be positive, got {self.length}")
        if self.x_max <= 0:
            raise NetworkError(f"link capacity must be positive, got {self.x_max}")

    @property
    def is_entry(self) -> bool:
        return self.upstream is None

    @property
    def is_exit(self) -> bool:
        return self.downstream is None

    @property
    def arc_cost(self) -> float:
        return self.length if self.cost is None else self.cost


@dataclass(frozen=True)
class Node:
    """Signalized intersection.

    ``phases`` lists, per signal phase, the set of incoming links that
    get right of way during that phase.  ``lost_time`` is the total lost
    time per cycle (seconds).
    """

    phases: tuple[frozenset[int], ...]
    lost_time: float = 10.0

    def __post_init__(self) -> None:
        if not self.phases:
            raise NetworkError("an intersection needs at least one phase")
        if self.lost_time < 0:
            raise NetworkError("lost time cannot be negative")


class Network:
    """Container for links, intersections, and the CAV destination set.

    Derived adjacency (incoming/outgoing links per node, link successors,
    right-of-way phases per link) is precomputed once.  Destinations
    default to every exit link; commodity 0 (aggregate HDV traffic) is
    implicit and never appears in ``destinations``.
    """

    def __init__(
        self,
        links: Mapping[int, Link],
        nodes: Mapping[int, Node],
        destinations: Iterable[int] | None = None,
    ) -> None:
        self.links: dict[int, Link] = dict(links)
        self.nodes: dict[int, Node] = dict(nodes)
        self.incoming: dict[int, tuple[int, ...]] = {}
        self.outgoing: dict[int, tuple[int, ...]] = {}
        inc: dict[int, list[int]] = {j: [] for j in self.nodes}
        out: dict[int, list[int]] = {j: [] for j in self.nodes}
        for z in sorted(self.links):
            ln = self.links[z]
            for j, bucket in ((ln.downstream, inc), (ln.upstream, out)):
                if j is not None:
                    if j not in self.nodes:
                        raise NetworkError(f"link {z} references unknown intersection {j}")
                    bucket[j].append(z)
        self.incoming = {j: tuple(v) for j, v in inc.items()}
        self.outgoing = {j: tuple(v) for j, v in out.items()}
        if destinations is None:
            destinations = (z for z in sorted(self.links) if self.links[z].is_exit)
        self.destinations: tuple[int, ...] = tuple(sorted(set(destinations)))
        # Right-of-way phases per link: (node, phase index) pairs.
        self.row_phases: dict[int, tuple[int, ...]] = {}
        self._validate()

    def _validate(self) -> None:
        if 0 in self.links:
            raise NetworkError("link id 0 is reserved for the HDV commodity")
        for d in self.destinations:
            if d == 0:
                raise NetworkError("destination 0 is reserved for HDV traffic")
            if d not in self.links:
                raise NetworkError(f"destination {d} is not a link")
            if not self.links[d].is_exit:
                raise NetworkError(f"destination {d} is not an exit link")
        for j, node in self.nodes.items():
            incoming = set(self.incoming[j])
            if not incoming:
                raise NetworkError(f"intersection {j} has no incoming links")
            if not self.outgoing[j]:
                raise NetworkError(f"intersection {j} has no outgoing links")
            granted: set[int] = set()
            for i, phase in enumerate(node.phases):
                if not phase <= incoming:
                    raise NetworkError(
                        f"phase {i} of intersection {j} grants right of way to "
                        f"links that do not enter it"
                    )
                granted |= phase
            if granted != incoming:
                raise NetworkError(
                    f"links {sorted(incoming - granted)} entering intersection {j} "
                    f"appear in no phase"
                )
        for z in sorted(self.links):
            j = self.links[z].downstream
            if j is None:
                self.row_phases[z] = ()
            else:
                self.row_phases[z] = tuple(
                    i for i, phase in enumerate(self.nodes[j].phases) if z in phase
                )

    def successors(self, z: int) -> tuple[int, ...]:
        """Links reachable from z in one hop: everything leaving z's downstream node."""
        j = self.links[z].downstream
        return self.outgoing[j] if j is not None else ()

    @property
    def entry_links(self) -> tuple[int, ...]:
        return tuple(z for z in sorted(self.links) if self.links[z].is_entry)

    @property
    def exit_links(self) -> tuple[int, ...]:
        return tuple(z for z in sorted(self.links) if self.links[z].is_exit)

    def to_config(self) -> dict:
        """Plain-dict form, YAML-friendly, round-trips through from_config."""
        links = {}
        for z in sorted(self.links):
            ln = self.links[z]
            entry = {"upstream": ln.upstream, "downstream": ln.downstream,
                     "length": ln.length, "x_max": ln.x_max}
            if ln.cost is not None:
                entry["cost"] = ln.cost
            links[z] = entry
        nodes = {
            j: {"phases": [sorted(p) for p in nd.phases], "lost_time": nd.lost_time}
            for j, nd in sorted(self.nodes.items())
        }
        return {"links": links, "nodes": nodes, "destinations": list(self.destinations)}

    @classmethod
    def from_config(cls, cfg: Mapping) -> "Network":
        links = {
            int(z): Link(
                upstream=spec.get("upstream"),
                downstream=spec.get("downstream"),
                length=float(spec.get("length", 200.0)),
                x_max=float(spec.get("x_max", 40.0)),
                cost=spec.get("cost"),
            )
            for z, spec in cfg["links"].items()
        }
        nodes = {
            int(j): Node(
                phases=tuple(frozenset(int(z) for z in phase) for phase in spec["phases"]),
                lost_time=float(spec.get("lost_time", 10.0)),
            )
            for j, spec in cfg["nodes"].items()
        }
        return cls(links, nodes, cfg.get("destinations"))


def build_grid(
    rows: int,
    cols: int,
    *,
    link_length: float = 200.0,
    x_max: float = 40.0,
    lost_time: float = 10.0,
) -> Network:
    """Rectangular grid of one-way streets with alternating directions.

    Horizontal row i runs east when i is even, west when odd; vertical
    column j runs south when j is even, north when odd.  Each row/column
    gets an entry link at its upstream boundary and an exit link at its
    downstream one, so the grid has rows*(cols-1) + (rows-1)*cols interior
    links plus 2*(rows+cols) boundary links.

    Links are numbered by scanning intersections row-major and, at each
    intersection, numbering its not-yet-numbered adjacent link segments in
    west, north, east, south order.
    """
    if rows < 2 or cols < 2:
        raise NetworkError("grid needs at least 2 rows and 2 columns")

    def node_id(r: int, c: int) -> int:
        return r * cols + c + 1

    row_east = lambda r: r % 2 == 0
    col_south = lambda c: c % 2 == 0

    links: dict[int, Link] = {}
    orientation: dict[int, str] = {}
    seen_segments: dict[tuple, int] = {}
    counter = 0

    def add(segment: tuple, upstream: int | None, downstream: int | None, orient: str) -> None:
        nonlocal counter
        if segment in seen_segments:
            return
        counter += 1
        seen_segments[segment] = counter
        links[counter] = Link(upstream=upstream, downstream=downstream,
                              length=link_length, x_max=x_max)
        orientation[counter] = orient

    for r in range(rows):
        for c in range(cols):
            me = node_id(r, c)
            # west
            if c == 0:
                if row_east(r):
                    add(("bw", r), None, me, "h")
                else:
                    add(("bw", r), me, None, "h")
            else:
                if row_east(r):
                    add(("h", r, c - 1), node_id(r, c - 1), me, "h")
                else:
                    add(("h", r, c - 1), me, node_id(r, c - 1), "h")
            # north
            if r == 0:
                if col_south(c):
                    add(("bn", c), None, me, "v")
                else:
                    add(("bn", c), me, None, "v")
            else:
                if col_south(c):
                    add(("v", r - 1, c), node_id(r - 1, c), me, "v")
                else:
                    add(("v", r - 1, c), me, node_id(r - 1, c), "v")
            # east
            if c == cols - 1:
                if row_east(r):
                    add(("be", r), me, None, "h")
                else:
                    add(("be", r), None, me, "h")
            else:
                if row_east(r):
                    add(("h", r, c), me, node_id(r, c + 1), "h")
                else:
                    add(("h", r, c), node_id(r, c + 1), me, "h")
            # south
            if r == rows - 1:
                if col_south(c):
                    add(("bs", c), me, None, "v")
                else:
                    add(("bs", c), None, me, "v")
            else:
                if col_south(c):
                    add(("v", r, c), me, node_id(r + 1, c), "v")
                else:
                    add(("v", r, c), node_id(r + 1, c), me, "v")

    nodes: dict[int, Node] = {}
    for r in range(rows):
        for c in range(cols):
            j = node_id(r, c)
            inc_h = frozenset(z for z, ln in links.items()
                              if ln.downstream == j and orientation[z] == "h")
            inc_v = frozenset(z for z, ln in links.items()
                              if ln.downstream == j and orientation[z] == "v")
            nodes[j] = Node(phases=(inc_h, inc_v), lost_time=lost_time)
    return Network(links, nodes)


@dataclass
class CostMatrix:
    """All-pairs shortest-path costs over the link graph.

    ``values[i, j]`` is the cheapest cost of travelling from link ids[i]
    to link ids[j]; unreachable pairs hold math.inf.
    """

    ids: tuple[int, ...]
    values: np.ndarray
    pos: dict[int, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.pos = {z: i for i, z in enumerate(self.ids)}

    def cost(self, z: int, d: int) -> float:
        return float(self.values[self.pos[z], self.pos[d]])

    def to_csv(self, path, destinations: Iterable[int] | None = None) -> None:
        dests = tuple(destinations) if destinations is not None else self.ids
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["link"] + [f"to_{d}" for d in dests])
            for z in self.ids:
                row = [z]
                for d in dests:
                    v = self.cost(z, d)
                    row.append("inf" if math.isinf(v) else f"{v:.6g}")
                writer.writerow(row)


def floyd_warshall(net: Network) -> CostMatrix:
    """All-pairs routing costs F(z, d) on the link graph.

    The cost of the hop z -> m is the arc cost of the entered link m, so
    with default costs F is the driving distance remaining after leaving
    link z (plus the length of d itself); F(z, z) = 0.
    """
    ids = tuple(sorted(net.links))
    pos = {z: i for i, z in enumerate(ids)}
    n = len(ids)
    dist = np.full((n, n), math.inf)
    np.fill_diagonal(dist, 0.0)
    for z in ids:
        for m in net.successors(z):
            c = net.links[m].arc_cost
            if c < dist[pos[z], pos[m]]:
                dist[pos[z], pos[m]] = c
    for k in range(n):
        np.minimum(dist, dist[:, k, None] + dist[None, k, :], out=dist)
    return CostMatrix(ids=ids, values=dist)


def admissible_successors(
    net: Network, costs: CostMatrix, z: int, d: int, epsilon: float = 0.0
) -> tuple[int, ...]:
    """Successor links m of z that strictly reduce the routing cost to d.

    Flow for destination d may only move z -> m when
    F(z, d) - F(m, d) > epsilon, which rules out routing loops.
    """
    fz = costs.cost(z, d)
    if not math.isfinite(fz):
        return ()
    winners = []
    for m in net.successors(z):
        fm = costs.cost(m, d)
        if math.isfinite(fm) and fz - fm > epsilon:
            winners.append(m)
    return tuple(winners)
