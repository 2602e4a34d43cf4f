"""Deterministic 3-mode comparison + node-1 greens trace on the 5-phase scenario."""
import dataclasses
import time

import numpy as np

from safmpc.plant import NoiseConfig
from safmpc.runner import run_closed_loop
from safmpc.scenario import bundled_scenario

sc0 = bundled_scenario("desk2x2")
sc = dataclasses.replace(sc0, noise=NoiseConfig.off())
idx = sc.idx
entries = [1, 2, 11, 12]
results = {}
for mode in ("FixedTime", "ConstantSF", "DynamicSF"):
    t0 = time.perf_counter()
    res = run_closed_loop(sc, mode, backend="scipy")
    wall = time.perf_counter() - t0
    results[mode] = res
    k = res.kpis
    active = sum(1 for d in res.diags if d.status == "optimal")
    maxq = max(st.total().max() for st in res.states)
    print(f"{mode:>10} TMQ={k.time_mean_queue:7.2f} maxq={maxq:5.1f} "
          f"exited={k.vehicles_exited:7.1f} blocked={k.vehicles_blocked:6.1f} "
          f"active={active} faults={len(res.faults)} wall={wall:5.0f}s",
          flush=True)
    for z in entries:
        peaks = [st.x[idx.link_pos[z]].sum() for st in res.states]
        print(f"      L{z}: peak={max(peaks):5.1f} mean={np.mean(peaks):5.1f}", flush=True)

print("\nnode-1 greens (phase link1 / phase link2) per cycle:", flush=True)
for mode in ("ConstantSF", "DynamicSF"):
    res = results[mode]
    gs = [f"{p.greens[(1, 0)]:.0f}/{p.greens[(1, 1)]:.0f}" for p in res.plans]
    print(f"{mode:>10}: {' '.join(gs)}", flush=True)
print("\nFixed L1 queue trace:", " ".join(f"{st.x[idx.link_pos[1]].sum():.0f}"
      for st in results["FixedTime"].states), flush=True)
print("Dyn   L1 queue trace:", " ".join(f"{st.x[idx.link_pos[1]].sum():.0f}"
      for st in results["DynamicSF"].states), flush=True)
print("Const L1 queue trace:", " ".join(f"{st.x[idx.link_pos[1]].sum():.0f}"
      for st in results["ConstantSF"].states), flush=True)
