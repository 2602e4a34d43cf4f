"""Five-seed noisy rehearsal of the three-mode TMQ ordering."""

import time

import numpy as np

from safmpc.runner import run_closed_loop
from safmpc.scenario import bundled_scenario

sc = bundled_scenario("desk2x2")
t0 = time.time()
tmqs = {}
for mode in ("FixedTime", "ConstantSF", "DynamicSF"):
    vals = []
    for rep in range(5):
        res = run_closed_loop(sc, mode, rep=rep, backend="scipy")
        v = res.kpis.time_mean_queue
        maxq = max(s.total().max() for s in res.states)
        vals.append(v)
        print(f"{mode:>10} rep={rep} TMQ={v:8.2f} maxq={maxq:5.1f} "
              f"blocked={res.kpis.vehicles_blocked:6.1f} faults={len(res.faults)} "
              f"t={time.time()-t0:5.0f}s", flush=True)
    tmqs[mode] = vals
    print(f"{mode:>10} median={np.median(vals):8.2f}", flush=True)

f, c, d = (float(np.median(tmqs[m])) for m in ("FixedTime", "ConstantSF", "DynamicSF"))
print(f"\nmedians: Fixed={f:.2f} Const={c:.2f} Dyn={d:.2f}")
print(f"Dyn <= Const: {d <= c}")
print(f"Const <= 1.1*Fixed: {c <= 1.1 * f} ({c:.2f} vs {1.1 * f:.2f})")
print(f"Dyn < Fixed: {d < f}")
print(f"per-seed Dyn<Fixed: {[dv < fv for dv, fv in zip(tmqs['DynamicSF'], tmqs['FixedTime'])]}")
print(f"total wall: {time.time() - t0:.0f}s")
