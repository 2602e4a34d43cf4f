"""Run evaluation: error statistics, traffic KPIs, and CSV reporting.

All statistics are deterministic functions of the logged trajectory; the
report files contain no wall-clock timestamps so identical runs produce
byte-identical output.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dynamics import FlowSet, Indexer, QueueState

FREE_FLOW_KMH = 50.0


class EmptySeriesError(ValueError):
    """A statistic was requested over an empty sample."""


class ZeroDenominatorError(ValueError):
    """A relative error was requested against a zero reference."""


def mpe(model: Iterable[float], actual: Iterable[float]) -> float:
    """Median percentage error of model values against actual ones.

    Positive means the model overestimates.  Raises if the sample is
    empty or any actual value is zero.
    """
    m = np.asarray(list(model), dtype=float)
    a = np.asarray(list(actual), dtype=float)
    if m.size == 0 or m.shape != a.shape:
        raise EmptySeriesError(f"need matching nonempty series, got {m.size} and {a.size}")
    if (a == 0).any():
        raise ZeroDenominatorError("actual series contains zeros")
    return float(np.median((m - a) / a * 100.0))


def mad(model: Iterable[float], actual: Iterable[float]) -> float:
    """Median absolute difference between paired model and actual values.

    Same units as the inputs, invariant under a common shift of both
    series.  Raises if the sample is empty or the lengths differ.
    """
    m = np.asarray(list(model), dtype=float)
    a = np.asarray(list(actual), dtype=float)
    if m.size == 0 or m.shape != a.shape:
        raise EmptySeriesError(f"need matching nonempty series, got {m.size} and {a.size}")
    return float(np.median(np.abs(m - a)))


def approximation_error(j_test: float, j_ref: float) -> float:
    """Relative objective deviation |j_test - j_ref| / |j_ref| in percent."""
    if j_ref == 0:
        raise ZeroDenominatorError("reference objective is zero")
    return abs(j_test - j_ref) / abs(j_ref) * 100.0


@dataclass
class KpiReport:
    cycles: int
    cycle_seconds: float
    time_mean_queue: float        # veh, averaged over end-of-cycle totals
    vehicle_hours: float          # total time spent queued, veh*h
    vehicles_entered: float
    vehicles_exited: float
    vehicles_blocked: float
    att_minutes: float            # vehicle_hours per exited vehicle, minutes
    distance_km: float            # veh*km moved onto links
    delay_s_per_km: float
    outflow_per_cycle: np.ndarray

    def rows(self) -> list[tuple[str, float]]:
        return [
            ("cycles", self.cycles),
            ("cycle_seconds", self.cycle_seconds),
            ("time_mean_queue_veh", self.time_mean_queue),
            ("vehicle_hours", self.vehicle_hours),
            ("vehicles_entered", self.vehicles_entered),
            ("vehicles_exited", self.vehicles_exited),
            ("vehicles_blocked", self.vehicles_blocked),
            ("att_minutes", self.att_minutes),
            ("distance_km", self.distance_km),
            ("delay_s_per_km", self.delay_s_per_km),
        ]


def traffic_kpis(
    states: Sequence[QueueState],
    flows: Sequence[FlowSet],
    idx: Indexer,
    C: float,
    requested: Sequence[np.ndarray] | None = None,
) -> KpiReport:
    """KPIs of one closed-loop run.

    states must hold the initial state followed by one state per cycle;
    flows holds the realized flows of each cycle.  requested (optional)
    gives the pre-noise, pre-blocking demand matrices used to count
    blocked vehicles.
    """
    if len(states) != len(flows) + 1:
        raise ValueError(f"got {len(states)} states for {len(flows)} cycles")
    if not flows:
        raise EmptySeriesError("no cycles to report")

    totals = np.array([s.total().sum() for s in states[1:]])
    vehicle_seconds = C * float(totals.sum())

    entered = 0.0
    exited = 0.0
    blocked = 0.0
    dist_m = 0.0
    outflow = np.zeros(len(flows))
    for k, fl in enumerate(flows):
        transfers = sum(fl.f.values())
        entered += C * float(fl.b.sum())
        out_k = C * (float(fl.q.sum()) - transfers + float(fl.r.sum()))
        exited += out_k
        outflow[k] = out_k
        if requested is not None:
            blocked += C * float(np.asarray(requested[k]).sum() - fl.b.sum())
        for (z, m, d), v in fl.f.items():
            dist_m += C * v * idx.lengths[idx.link_pos[m]]
        dist_m += C * float((fl.b.sum(axis=1) * idx.lengths).sum())

    vehicle_hours = vehicle_seconds / 3600.0
    att_minutes = (vehicle_seconds / exited) / 60.0 if exited > 0 else float("inf")
    dist_km = dist_m / 1000.0
    if dist_km > 0:
        free_s = dist_km / FREE_FLOW_KMH * 3600.0
        delay = (vehicle_seconds - free_s) / dist_km
    elif vehicle_seconds == 0:
        delay = 0.0  # nothing entered and nothing queued: no delay accrued
    else:
        delay = float("inf")
    return KpiReport(
        cycles=len(flows),
        cycle_seconds=C,
        time_mean_queue=float(totals.mean()),
        vehicle_hours=vehicle_hours,
        vehicles_entered=entered,
        vehicles_exited=exited,
        vehicles_blocked=blocked,
        att_minutes=att_minutes,
        distance_km=dist_km,
        delay_s_per_km=delay,
        outflow_per_cycle=outflow,
    )


@dataclass
class SaturationErrors:
    # link -> (n, mpe %, mad veh/h, median model veh/h, median plant veh/h)
    per_link: dict[int, tuple[int, float, float, float, float]]
    pooled_mpe: float | None   # percent
    pooled_mad: float | None   # veh/h


def saturation_errors(
    s_model_log: Sequence[dict[int, float] | None],
    s_plant_log: Sequence[np.ndarray],
    idx: Indexer,
) -> SaturationErrors:
    """Compare the controller's modeled saturation rates with the plant's.

    Rates are logged in veh/s and reported in veh/h.  Only cycles where
    the optimizer ran contribute (entries of s_model_log that are None
    are skipped), and only links whose plant rate is positive that
    cycle.
    """
    if len(s_model_log) != len(s_plant_log):
        raise ValueError("model and plant logs differ in length")
    samples: dict[int, tuple[list[float], list[float]]] = {z: ([], []) for z in idx.link_ids}
    for s_model, s_plant in zip(s_model_log, s_plant_log):
        if s_model is None:
            continue
        for pos, z in enumerate(idx.link_ids):
            actual = float(s_plant[pos])
            if z in s_model and actual > 0:
                samples[z][0].append(s_model[z] * 3600.0)
                samples[z][1].append(actual * 3600.0)
    per_link: dict[int, tuple[int, float, float, float, float]] = {}
    pooled_m: list[float] = []
    pooled_a: list[float] = []
    for z, (ms, acts) in samples.items():
        if ms:
            per_link[z] = (len(ms), mpe(ms, acts), mad(ms, acts),
                           float(np.median(ms)), float(np.median(acts)))
            pooled_m.extend(ms)
            pooled_a.extend(acts)
    if pooled_m:
        return SaturationErrors(per_link, mpe(pooled_m, pooled_a), mad(pooled_m, pooled_a))
    return SaturationErrors(per_link, None, None)


# -- CSV writers -------------------------------------------------------------


def write_report(path: Path | str, kpis: KpiReport, extra: dict[str, float] | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for key, val in kpis.rows():
            w.writerow([key, f"{val:.6f}"])
        for key in sorted(extra or {}):
            w.writerow([key, f"{extra[key]:.6f}"])


def write_per_link(path: Path | str, errors: SaturationErrors) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["link", "samples", "mpe_pct", "mad_vph",
                    "median_model_vph", "median_plant_vph"])
        for z in sorted(errors.per_link):
            n, m, d, mm, ma = errors.per_link[z]
            w.writerow([z, n, f"{m:.6f}", f"{d:.6f}", f"{mm:.6f}", f"{ma:.6f}"])
        if errors.pooled_mpe is not None:
            w.writerow(["all", sum(v[0] for v in errors.per_link.values()),
                        f"{errors.pooled_mpe:.6f}", f"{errors.pooled_mad:.6f}", "", ""])


def write_outflow(path: Path | str, kpis: KpiReport) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cycle", "exited_veh", "cumulative_veh"])
        total = 0.0
        for k, v in enumerate(kpis.outflow_per_cycle):
            total += float(v)
            w.writerow([k, f"{v:.6f}", f"{total:.6f}"])
