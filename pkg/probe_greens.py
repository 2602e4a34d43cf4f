"""Probe: do DynamicSF greens oscillate cycle-to-cycle at binding load?"""
import dataclasses

import numpy as np

from safmpc.runner import run_closed_loop
from safmpc.scenario import bundled_scenario

sc = dataclasses.replace(bundled_scenario("desk2x2"), cycles=14)
res = run_closed_loop(sc, "DynamicSF", backend="scipy")
idx = sc.idx
entries = [1, 2, 11, 12]
print("cyc | node greens (phase1/phase2)           | entry queues", flush=True)
for k, (plan, st) in enumerate(zip(res.plans, res.states)):
    gs = " ".join(
        f"n{j}:{plan.greens[(j, 0)]:5.1f}/{plan.greens[(j, 1)]:5.1f}"
        for j in sorted({jj for (jj, _) in plan.greens})
    )
    qs = " ".join(f"L{z}:{st.x[idx.link_pos[z]].sum():5.1f}" for z in entries)
    d = res.diags[k]
    print(f"{k:3d} | {gs} | {qs} | obj={d.objective if d.objective else 0:9.1f} st={d.status}", flush=True)
print("\nmodel-vs-plant saturation (link, cycle, s_model*3600, s_plant*3600):", flush=True)
for k in (4, 8, 12):
    d = res.diags[k]
    if d.s_model:
        for z in (1, 2, 3, 7):
            sm = d.s_model.get(z)
            sp = res.s_plant[k][idx.link_pos[z]] if res.s_plant is not None else None
            if sm is not None:
                print(f"  L{z} k={k}: model={sm * 3600:7.1f} plant={sp * 3600 if sp else 0:7.1f}", flush=True)
