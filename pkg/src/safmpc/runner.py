"""Experiment orchestration: closed-loop runs, sweeps, and output files.

A run couples one controller mode with one plant replication; an
experiment is a grid of (mode, horizon, envelope count, replication).
Outputs live under ``out/<mode>_K<horizon>_N<envelopes>/seed<rep>/``.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .controller import ControllerParams, Measurements, MpcController, StepDiagnostics
from .dynamics import FlowSet, PlanStep, QueueState, rollout
from .metrics import (
    KpiReport,
    SaturationErrors,
    approximation_error,
    saturation_errors,
    traffic_kpis,
    write_outflow,
    write_per_link,
    write_report,
)
from .model import build_milp, nonlinear_objective
from .plant import PlantState, plant_step
from .scenario import Scenario
from .solve import SolveLimits, backend_solve


@dataclass
class RunResult:
    scenario: str
    mode: str
    rep: int
    states: list[QueueState]
    flows: list[FlowSet]
    diags: list[StepDiagnostics]
    plans: list[PlanStep]
    s_plant: list[np.ndarray]
    requested: list[np.ndarray]
    kpis: KpiReport
    sat_errors: SaturationErrors
    faults: list[str] = field(default_factory=list)


def run_closed_loop(
    scenario: Scenario,
    mode: str,
    rep: int = 0,
    base_seed: int = 20240501,
    backend: str = "internal",
    limits: SolveLimits | None = None,
) -> RunResult:
    """Simulate the full scenario under one controller mode."""
    params = scenario.controller_params(mode, backend=backend, limits=limits)
    ctrl = MpcController(scenario.net, scenario.costs, scenario.idx, params)
    plant = PlantState.create(scenario.x0, base_seed, rep)

    meas = Measurements(state=scenario.x0.copy(), observed_turning={})
    states: list[QueueState] = [scenario.x0.copy()]
    flows: list[FlowSet] = []
    diags: list[StepDiagnostics] = []
    plans: list[PlanStep] = []
    s_plant: list[np.ndarray] = []
    requested: list[np.ndarray] = []

    for k in range(scenario.cycles):
        rates = scenario.demand_matrix(k)
        requested.append(rates)
        plan, diag = ctrl.step(meas, rates)
        meas, fl = plant_step(
            plant, plan, rates, scenario.turning, scenario.costs,
            scenario.idx, scenario.headways, scenario.C, scenario.noise,
        )
        states.append(plant.state.copy())
        flows.append(fl)
        diags.append(diag)
        plans.append(plan)
        s_plant.append(fl.s)

    kpis = traffic_kpis(states, flows, scenario.idx, scenario.C)
    # the plant counts blocking against the *realized* demand draw;
    # comparing admissions with the nominal rates would mistake demand
    # noise for blocked vehicles
    kpis.vehicles_blocked = plant.blocked
    sat = saturation_errors([d.s_model for d in diags], s_plant, scenario.idx)
    return RunResult(
        scenario=scenario.name, mode=mode, rep=rep, states=states, flows=flows,
        diags=diags, plans=plans, s_plant=s_plant, requested=requested, kpis=kpis,
        sat_errors=sat, faults=list(ctrl.faults),
    )


# -- open-loop analysis ------------------------------------------------------


def open_loop_solve(
    scenario: Scenario,
    N: int,
    K: int | None = None,
    mode: str = "DynamicSF",
    backend: str = "internal",
    limits: SolveLimits | None = None,
) -> dict:
    """Solve one horizon problem and replay its plan on the nonlinear core.

    Returns the relaxed optimum, the objective the plan actually achieves
    under queue-dependent saturation, and their relative deviation — the
    price paid for the piecewise-linear envelopes.
    """
    K = K or scenario.horizon
    demand = np.stack([scenario.demand_matrix(k) for k in range(K)])
    constant_s = scenario.constant_rate_vph / 3600.0 if mode == "ConstantSF" else None
    t0 = time.perf_counter()
    model = build_milp(
        scenario.idx, scenario.costs, scenario.x0, demand, scenario.turning,
        scenario.weights, scenario.headways, K, N, scenario.C,
        g_min=scenario.g_min, constant_s=constant_s,
        pwl_segments=scenario.pwl_segments,
    )
    sol = backend_solve(model, backend, limits or SolveLimits())
    seconds = time.perf_counter() - t0
    out = {
        "N": N, "K": K, "mode": mode, "status": sol.status,
        "nodes": sol.node_count, "seconds": seconds,
        "j_model": sol.objective, "j_sim": None, "approx_err_pct": None,
    }
    if sol.x is None:
        return out

    plans = []
    for k in range(K):
        greens = {
            (j, i): model.value(sol.x, ("g", j, i, k))
            for j in sorted(scenario.net.nodes)
            for i in range(len(scenario.net.nodes[j].phases))
        }
        G = {
            (z, m, d): max(model.value(sol.x, ("G", z, m, d, k)), 0.0)
            for (z, m, d) in model.meta["moves"]
        }
        plans.append(PlanStep(greens=greens, G=G, t_cav={}))
    sim_states, _ = rollout(
        scenario.x0, plans, scenario.turning, scenario.costs, scenario.idx,
        scenario.headways, scenario.C, demand=list(demand),
    )
    j_sim = nonlinear_objective(
        sim_states, plans, scenario.costs, scenario.idx, scenario.weights,
        g_prev=None, C=scenario.C,
    )
    out["j_sim"] = j_sim
    if j_sim:
        out["approx_err_pct"] = abs(sol.objective - j_sim) / abs(j_sim) * 100.0
    return out


def envelope_sweep(
    scenario: Scenario,
    envelope_counts: list[int],
    K: int | None = None,
    reference_N: int | None = None,
    backend: str = "internal",
    limits: SolveLimits | None = None,
) -> list[dict]:
    """Solve the same instance at several envelope counts.

    With reference_N given, each row also carries its objective's relative
    deviation from the reference solve — finer partitions should deviate
    less, since refining the hull can only tighten the relaxation.
    """
    rows = [
        open_loop_solve(scenario, N, K=K, backend=backend, limits=limits)
        for N in envelope_counts
    ]
    if reference_N is not None:
        ref = open_loop_solve(scenario, reference_N, K=K, backend=backend, limits=limits)
        ref["err_vs_ref_pct"] = 0.0
        for r in rows:
            r["err_vs_ref_pct"] = None
            if r["j_model"] is not None and ref["j_model"]:
                r["err_vs_ref_pct"] = approximation_error(r["j_model"], ref["j_model"])
        rows.append(ref)
    return rows


# -- output files ------------------------------------------------------------


def write_run_outputs(outdir: Path | str, scenario: Scenario, result: RunResult) -> None:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    idx = scenario.idx

    with (outdir / "states.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cycle", "link", "commodity", "veh"])
        for k, st in enumerate(result.states):
            for pos, z in enumerate(idx.link_ids):
                for cpos, d in enumerate(idx.commodities):
                    w.writerow([k, z, d, f"{st.x[pos, cpos]:.6f}"])

    with (outdir / "control.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cycle", "gamma", "status", "objective", "bound",
                    "rel_gap", "nodes", "solve_seconds", "fault"])
        for d in result.diags:
            w.writerow([
                d.step, d.gamma, d.status,
                "" if d.objective is None else f"{d.objective:.6f}",
                "" if d.best_bound is None else f"{d.best_bound:.6f}",
                "" if d.rel_gap is None else f"{d.rel_gap:.3e}",
                d.nodes, f"{d.solve_seconds:.3f}", d.fault or "",
            ])

    with (outdir / "greens.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cycle", "node", "phase", "seconds"])
        for d in result.diags:
            for (j, i) in sorted(d.greens):
                w.writerow([d.step, j, i, f"{d.greens[(j, i)]:.6f}"])

    with (outdir / "saturation.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cycle", "link", "s_plant_vph", "s_model_vph"])
        for k, (sp, d) in enumerate(zip(result.s_plant, result.diags)):
            for pos, z in enumerate(idx.link_ids):
                model_val = ""
                if d.s_model is not None and z in d.s_model:
                    model_val = f"{d.s_model[z] * 3600.0:.3f}"
                w.writerow([k, z, f"{sp[pos] * 3600.0:.3f}", model_val])

    with (outdir / "flows.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cycle", "from_link", "to_link", "commodity", "veh"])
        for k, fl in enumerate(result.flows):
            for (z, m, d), v in sorted(fl.f.items()):
                w.writerow([k, z, m, d, f"{v * scenario.C:.6f}"])

    extra = {}
    if result.sat_errors.pooled_mpe is not None:
        extra["saturation_mpe_pct"] = result.sat_errors.pooled_mpe
        extra["saturation_mad_vph"] = result.sat_errors.pooled_mad
    write_report(outdir / "report.csv", result.kpis, extra)
    write_per_link(outdir / "per_link.csv", result.sat_errors)
    write_outflow(outdir / "outflow.csv", result.kpis)
    if result.faults:
        (outdir / "faults.txt").write_text("\n".join(result.faults) + "\n")


@dataclass(frozen=True)
class ExperimentSpec:
    modes: tuple[str, ...] = ("FixedTime", "ConstantSF", "DynamicSF")
    horizons: tuple[int, ...] = (2,)
    envelopes: tuple[int, ...] = (5,)
    reps: int = 1
    base_seed: int = 20240501


def run_experiments(
    scenario: Scenario,
    spec: ExperimentSpec,
    out_root: Path | str,
    backend: str = "internal",
    limits: SolveLimits | None = None,
) -> list[dict]:
    """Run the full grid and write one summary.csv plus per-run folders."""
    out_root = Path(out_root)
    rows = []
    for mode in spec.modes:
        for K in spec.horizons:
            for N in spec.envelopes:
                sc = scenario
                if K != scenario.horizon or N != scenario.envelopes:
                    sc = _with_horizon(scenario, K, N)
                for rep in range(spec.reps):
                    result = run_closed_loop(
                        sc, mode, rep=rep, base_seed=spec.base_seed,
                        backend=backend, limits=limits,
                    )
                    outdir = out_root / f"{mode}_K{K}_N{N}" / f"seed{rep}"
                    write_run_outputs(outdir, sc, result)
                    row = {
                        "mode": mode, "K": K, "N": N, "rep": rep,
                        "faults": len(result.faults),
                        "nodes": sum(d.nodes for d in result.diags),
                        "solve_seconds": sum(d.solve_seconds for d in result.diags),
                    }
                    row.update({k: v for k, v in result.kpis.rows()})
                    if result.sat_errors.pooled_mpe is not None:
                        row["saturation_mpe_pct"] = result.sat_errors.pooled_mpe
                        row["saturation_mad_vph"] = result.sat_errors.pooled_mad
                    rows.append(row)
    if rows:
        ident = ("mode", "K", "N", "rep")
        keys = sorted({k for r in rows for k in r},
                      key=lambda k: (ident.index(k) if k in ident else len(ident), k))
        out_root.mkdir(parents=True, exist_ok=True)
        with (out_root / "summary.csv").open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            for r in rows:
                w.writerow({k: r.get(k, "") for k in keys})
    return rows


def _with_horizon(scenario: Scenario, K: int, N: int) -> Scenario:
    from dataclasses import replace

    return replace(scenario, horizon=K, envelopes=N)
