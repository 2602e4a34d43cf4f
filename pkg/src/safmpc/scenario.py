"""Scenario definition: grid geometry, demand program, and run settings.

Scenarios are plain YAML (see src/safmpc/data/ for the bundled ones).
Demand rows give vehicles per hour between a start and an end minute;
interval edges snap to the nearest cycle boundary.  CAV rows name a
destination (an exit link); HDV rows feed the aggregate commodity and
route by turning rates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .controller import ControllerParams
from .dynamics import HeadwayParams, Indexer, QueueState, TurningRates
from .model import Weights
from .network import CostMatrix, Network, build_grid, floyd_warshall
from .plant import NoiseConfig
from .solve import SolveLimits


class ScenarioError(ValueError):
    """The scenario file is inconsistent with the network it declares."""


def snap_cycle(minutes: float, C: float) -> int:
    """Nearest cycle boundary to a time given in minutes."""
    return int(round(minutes * 60.0 / C))


@dataclass(frozen=True)
class DemandRow:
    vclass: str  # "cav" | "hdv"
    origin: int
    destination: int | None
    start_min: float
    end_min: float
    rate_vph: float

    def __post_init__(self) -> None:
        if self.vclass not in ("cav", "hdv"):
            raise ScenarioError(f"vehicle class must be cav or hdv, got {self.vclass!r}")
        if self.vclass == "cav" and self.destination is None:
            raise ScenarioError(f"cav demand from link {self.origin} needs a destination")
        if self.vclass == "hdv" and self.destination is not None:
            raise ScenarioError(f"hdv demand from link {self.origin} must not name a destination")
        if self.rate_vph < 0:
            raise ScenarioError("demand rate must be nonnegative")
        if self.end_min <= self.start_min:
            raise ScenarioError(f"empty demand interval [{self.start_min}, {self.end_min}]")


@dataclass
class Scenario:
    name: str
    net: Network
    costs: CostMatrix
    idx: Indexer
    cycles: int
    C: float = 120.0
    g_min: float = 30.0
    headways: HeadwayParams = field(default_factory=HeadwayParams)
    weights: Weights = field(default_factory=Weights)
    x_act: float = 20.0
    x_deact: float = 10.0
    alpha: float = 0.9
    constant_rate_vph: float = 1600.0
    horizon: int = 2
    envelopes: int = 5
    pwl_segments: int = 8
    demand: list[DemandRow] = field(default_factory=list)
    turning: TurningRates | None = None
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    x0: QueueState | None = None

    def __post_init__(self) -> None:
        if self.cycles < 1:
            raise ScenarioError("need at least one cycle")
        if self.turning is None:
            self.turning = TurningRates.uniform(self.net)
        self.turning.validate(self.net)
        if self.x0 is None:
            self.x0 = QueueState(x=self.idx.zeros(), step=0)
        for row in self.demand:
            if row.origin not in self.net.links:
                raise ScenarioError(f"demand origin {row.origin} is not a link")
            if row.destination is not None:
                if row.destination not in self.net.destinations:
                    raise ScenarioError(
                        f"demand destination {row.destination} is not an exit link"
                    )
                if not np.isfinite(self.costs.cost(row.origin, row.destination)):
                    raise ScenarioError(
                        f"destination {row.destination} unreachable from link {row.origin}"
                    )
        by_od: dict[tuple[str, int, int | None], list[DemandRow]] = {}
        for row in self.demand:
            by_od.setdefault((row.vclass, row.origin, row.destination), []).append(row)
        for od, rows in by_od.items():
            rows = sorted(rows, key=lambda r: r.start_min)
            for prev, nxt in zip(rows, rows[1:]):
                if nxt.start_min < prev.end_min:
                    raise ScenarioError(
                        f"overlapping demand intervals for {od[0]} {od[1]}->{od[2]}: "
                        f"[{prev.start_min}, {prev.end_min}) and [{nxt.start_min}, {nxt.end_min})"
                    )

    def demand_matrix(self, k: int) -> np.ndarray:
        """Boundary demand rates (veh/s) active during cycle k."""
        b = self.idx.zeros()
        for row in self.demand:
            if snap_cycle(row.start_min, self.C) <= k < snap_cycle(row.end_min, self.C):
                d = 0 if row.destination is None else row.destination
                b[self.idx.link_pos[row.origin], self.idx.comm_pos[d]] += row.rate_vph / 3600.0
        return b

    def demand_schedule(self) -> list[np.ndarray]:
        return [self.demand_matrix(k) for k in range(self.cycles)]

    def controller_params(self, mode: str, backend: str = "internal",
                          limits: SolveLimits | None = None) -> ControllerParams:
        return ControllerParams(
            mode=mode,
            K=self.horizon,
            N=self.envelopes,
            C=self.C,
            g_min=self.g_min,
            weights=self.weights,
            headways=self.headways,
            x_act=self.x_act,
            x_deact=self.x_deact,
            alpha=self.alpha,
            constant_s=self.constant_rate_vph / 3600.0,
            pwl_segments=self.pwl_segments,
            limits=limits or SolveLimits(),
            backend=backend,
        )


def scenario_from_dict(cfg: dict, name: str = "scenario") -> Scenario:
    grid = cfg.get("grid", {})
    net = build_grid(
        rows=int(grid.get("rows", 2)),
        cols=int(grid.get("cols", 2)),
        link_length=float(cfg.get("link_length", 200.0)),
        x_max=float(cfg.get("x_max", 40.0)),
        lost_time=float(cfg.get("lost_time", 10.0)),
    )
    costs = floyd_warshall(net)
    idx = Indexer(net)

    h = cfg.get("headways", {})
    headways = HeadwayParams(h_cav=float(h.get("cav", 1.8)), h_hdv=float(h.get("hdv", 2.7)))
    w = cfg.get("weights", {})
    weights = Weights(
        w1=float(w.get("hdv", 1.0)),
        w2=float(w.get("terminal", 10.0)),
        w3=float(w.get("capacity", 100.0)),
        w4=float(w.get("smooth", 0.001)),
    )
    th = cfg.get("thresholds", {})
    nz = cfg.get("noise", {})
    noise = NoiseConfig(
        demand_cv=float(nz.get("demand_cv", 0.1)),
        turning_concentration=float(nz.get("turning_concentration", 50.0)),
        headway_jitter_cv=float(nz.get("headway_jitter_cv", 0.05)),
    )

    turning = None
    if "turning" in cfg:
        turning = TurningRates.uniform(net)
        for row in cfg["turning"]:
            z = int(row["link"])
            if z not in net.links:
                raise ScenarioError(f"turning row for unknown link {z}")
            rates = {int(m): float(v) for m, v in row.get("rates", {}).items()}
            turning.rates[z] = rates
            turning.exit_share[z] = float(row.get("exit", 0.0))

    demand = []
    for row in cfg.get("demand", []):
        demand.append(DemandRow(
            vclass=str(row["class"]).lower(),
            origin=int(row["origin"]),
            destination=(int(row["destination"]) if "destination" in row and row["destination"] is not None else None),
            start_min=float(row.get("start_min", 0.0)),
            end_min=float(row["end_min"]),
            rate_vph=float(row["rate_vph"]),
        ))

    x0 = None
    if "initial_queues" in cfg:
        pairs = {}
        for row in cfg["initial_queues"]:
            d = int(row.get("commodity", 0))
            pairs[(int(row["link"]), d)] = pairs.get((int(row["link"]), d), 0.0) + float(row["veh"])
        x0 = idx.state_from_pairs(pairs)

    return Scenario(
        name=str(cfg.get("name", name)),
        net=net,
        costs=costs,
        idx=idx,
        cycles=int(cfg["cycles"]),
        C=float(cfg.get("cycle_seconds", 120.0)),
        g_min=float(cfg.get("g_min", 30.0)),
        headways=headways,
        weights=weights,
        x_act=float(th.get("activate", 20.0)),
        x_deact=float(th.get("deactivate", 10.0)),
        alpha=float(cfg.get("alpha", 0.9)),
        constant_rate_vph=float(cfg.get("constant_rate_vph", 1600.0)),
        horizon=int(cfg.get("horizon", 2)),
        envelopes=int(cfg.get("envelopes", 5)),
        pwl_segments=int(cfg.get("pwl_segments", 8)),
        demand=demand,
        turning=turning,
        noise=noise,
        x0=x0,
    )


def load_scenario(path: Path | str) -> Scenario:
    path = Path(path)
    with path.open() as fh:
        cfg = yaml.safe_load(fh)
    if not isinstance(cfg, dict):
        raise ScenarioError(f"{path} does not contain a mapping")
    return scenario_from_dict(cfg, name=path.stem)


def bundled_scenario(name: str) -> Scenario:
    """Load one of the scenarios shipped in safmpc/data."""
    path = Path(__file__).parent / "data" / f"{name}.yaml"
    if not path.exists():
        raise ScenarioError(f"no bundled scenario named {name!r}")
    return load_scenario(path)
