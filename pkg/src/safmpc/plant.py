"""Stochastic macroscopic plant: the "true" network the controller acts on.

Same store-and-forward update as the deterministic core, with three noise
channels applied each cycle:

* boundary demand scaled by mean-one lognormal multipliers,
* HDV turning rows resampled from a Dirichlet centred on the true rates,
* per-link saturation headways jittered by mean-one lognormal multipliers.

With every channel switched off the plant reproduces the deterministic
rollout exactly, which the test suite pins down.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .controller import Measurements, disaggregate_plan
from .dynamics import (
    FlowSet,
    HeadwayParams,
    Indexer,
    PlanStep,
    QueueState,
    TurningRates,
    saturation_rate,
    step,
    transport_flows,
)
from .network import CostMatrix


def _lognormal_mult(rng: np.random.Generator, cv: float, size) -> np.ndarray:
    """Mean-one lognormal multipliers with coefficient of variation cv."""
    if cv <= 0:
        return np.ones(size)
    sigma = math.sqrt(math.log(1.0 + cv * cv))
    return rng.lognormal(mean=-0.5 * sigma * sigma, sigma=sigma, size=size)


@dataclass(frozen=True)
class NoiseConfig:
    """Plant noise levels; zero disables a channel.

    turning_concentration is the Dirichlet precision: realized rows are
    drawn from Dirichlet(kappa * row) over the row's positive entries, so
    larger kappa keeps realizations closer to the nominal rates.
    """

    demand_cv: float = 0.1
    turning_concentration: float = 50.0
    headway_jitter_cv: float = 0.05

    def __post_init__(self) -> None:
        for name in ("demand_cv", "turning_concentration", "headway_jitter_cv"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @classmethod
    def off(cls) -> "NoiseConfig":
        return cls(demand_cv=0.0, turning_concentration=0.0, headway_jitter_cv=0.0)


@dataclass
class PlantState:
    state: QueueState
    rng: np.random.Generator
    entered: float = 0.0
    exited: float = 0.0
    blocked: float = 0.0

    @classmethod
    def create(cls, x0: QueueState, base_seed: int, rep: int) -> "PlantState":
        return cls(state=x0.copy(), rng=np.random.default_rng([base_seed, rep]))


def realize_demand(
    rng: np.random.Generator, rates: np.ndarray, cv: float
) -> np.ndarray:
    """Scale each positive demand entry by an independent mean-one draw.

    Draw order follows the row-major order of the positive entries, so a
    fixed scenario consumes the stream identically across runs.
    """
    rates = np.asarray(rates, dtype=float)
    if cv <= 0:
        return rates.copy()
    out = rates.copy()
    rows, cols = np.nonzero(rates > 0)
    mults = _lognormal_mult(rng, cv, rows.size)
    out[rows, cols] = rates[rows, cols] * mults
    return out


def realize_turning(
    rng: np.random.Generator, turning: TurningRates, kappa: float
) -> TurningRates:
    """Resample each HDV turning row from Dirichlet(kappa * row).

    The exit share participates as one more component of the row.  Zero
    entries stay zero (they are excluded from the Dirichlet support).
    kappa == 0 returns the nominal rates unchanged.
    """
    if kappa <= 0:
        return TurningRates(
            rates={z: dict(row) for z, row in turning.rates.items()},
            exit_share=dict(turning.exit_share),
        )
    rates: dict[int, dict[int, float]] = {}
    exit_share: dict[int, float] = {}
    for z in sorted(set(turning.rates) | set(turning.exit_share)):
        row = turning.rates.get(z, {})
        e = turning.exit_share.get(z, 0.0)
        succ = [m for m in sorted(row) if row[m] > 0]
        support = [row[m] for m in succ]
        if e > 0:
            support.append(e)
        if len(support) <= 1:
            rates[z] = dict(row)
            exit_share[z] = e
            continue
        draw = rng.dirichlet(kappa * np.asarray(support))
        realized = dict(row)
        for i, m in enumerate(succ):
            realized[m] = float(draw[i])
        rates[z] = realized
        exit_share[z] = float(draw[-1]) if e > 0 else e
    return TurningRates(rates=rates, exit_share=exit_share)


def observed_turning_from_flows(
    flows: FlowSet, idx: Indexer, tol: float = 1e-12
) -> dict[int, tuple[dict[int, float], float]]:
    """Estimate turning rows from one cycle's realized HDV outflow."""
    moved: dict[int, dict[int, float]] = {}
    for (z, m, d), v in flows.f.items():
        if d == 0 and v > 0:
            row = moved.setdefault(z, {})
            row[m] = row.get(m, 0.0) + v
    observed: dict[int, tuple[dict[int, float], float]] = {}
    for pos, z in enumerate(idx.link_ids):
        row = moved.get(z, {})
        exited = float(flows.r[pos, 0])
        total = exited + sum(row.values())
        if total <= tol:
            continue
        observed[z] = ({m: v / total for m, v in sorted(row.items())}, exited / total)
    return observed


def plant_step(
    ps: PlantState,
    plan: PlanStep,
    demand_rates: np.ndarray,
    turning_true: TurningRates,
    costs: CostMatrix,
    idx: Indexer,
    h: HeadwayParams,
    C: float,
    noise: NoiseConfig,
) -> tuple[Measurements, FlowSet]:
    """Advance the plant one cycle under the given plan.

    Only the plan's signal timings (greens) and CAV routing commands
    (t_cav) reach the street: green serves whoever is queued, so the
    per-movement allocation is rebuilt from the true queue composition.
    A controller's own movement greens (plan.G) reflect its predicted
    composition and would strand green on movements the prediction got
    wrong.

    Returns the measurements taken at the new cycle boundary and the
    realized flows.  The PlantState is updated in place (queues, RNG
    stream, and the entered/exited/blocked vehicle counters).
    """
    b = realize_demand(ps.rng, demand_rates, noise.demand_cv)
    turning = realize_turning(ps.rng, turning_true, noise.turning_concentration)
    if noise.headway_jitter_cv > 0:
        jit = _lognormal_mult(ps.rng, noise.headway_jitter_cv, idx.n_links)
        s_eff = saturation_rate(ps.state.cav_total(), ps.state.hdv(), h) / jit
    else:
        s_eff = None

    applied = disaggregate_plan(plan.greens, ps.state, turning, plan.t_cav, idx)
    flows = transport_flows(
        ps.state, applied, turning, costs, idx, h, C, demand=b, s_override=s_eff
    )
    new_state = step(ps.state, flows, C)

    transfers = sum(flows.f.values())
    ps.entered += C * float(flows.b.sum())
    ps.exited += C * (float(flows.q.sum()) - transfers + float(flows.r.sum()))
    # blocked compares the *realized* demand with what the full entry links
    # admitted; comparing against the nominal rates would let the demand
    # noise drive the counter negative
    ps.blocked += C * float(b.sum() - flows.b.sum())
    ps.state = new_state

    meas = Measurements(
        state=new_state.copy(),
        observed_turning=observed_turning_from_flows(flows, idx),
    )
    return meas, flows
