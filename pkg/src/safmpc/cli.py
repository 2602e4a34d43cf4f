"""Command-line front end.

    safmpc run --scenario table2 --mode DynamicSF --reps 3 --out out/
    safmpc open-loop --scenario table2 --envelopes 5 9 25
    safmpc validate --scenario path/to/custom.yaml
    safmpc report --out out/

Scenario arguments take a YAML path or the name of a bundled scenario.
The MILP backend defaults to the built-in solver; set --backend or the
SAFMPC_BACKEND environment variable to use "scipy" or a solver binary.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .runner import ExperimentSpec, envelope_sweep, run_experiments
from .scenario import Scenario, ScenarioError, bundled_scenario, load_scenario
from .solve import SolveLimits, resolve_backend

log = logging.getLogger("safmpc")

MODES = ("FixedTime", "ConstantSF", "DynamicSF")


def _load(arg: str) -> Scenario:
    path = Path(arg)
    if path.exists():
        return load_scenario(path)
    return bundled_scenario(arg)


def _limits(args) -> SolveLimits:
    return SolveLimits(
        rel_gap=args.rel_gap,
        node_cap=args.node_cap,
        time_cap=args.time_cap,
    )


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scenario", required=True, help="YAML path or bundled scenario name")
    p.add_argument("--backend", default=None, help="internal | scipy | path to a solver executable")
    p.add_argument("--rel-gap", type=float, default=1e-6, dest="rel_gap")
    p.add_argument("--node-cap", type=int, default=1_000_000, dest="node_cap")
    p.add_argument("--time-cap", type=float, default=None, dest="time_cap")
    p.add_argument("--horizon", type=int, default=None, help="override the scenario horizon")
    p.add_argument("--envelopes", type=int, nargs="+", default=None,
                   help="override the scenario envelope count(s)")


def cmd_run(args) -> int:
    scenario = _load(args.scenario)
    modes = MODES if args.mode == "all" else (args.mode,)
    spec = ExperimentSpec(
        modes=tuple(modes),
        horizons=(args.horizon,) if args.horizon else (scenario.horizon,),
        envelopes=tuple(args.envelopes) if args.envelopes else (scenario.envelopes,),
        reps=args.reps,
        base_seed=args.base_seed,
    )
    backend = resolve_backend(args.backend)
    log.info("scenario %s: %d cycles on a %d-link network", scenario.name,
             scenario.cycles, len(scenario.net.links))
    rows = run_experiments(scenario, spec, args.out, backend=backend, limits=_limits(args))
    for r in rows:
        log.info(
            "%s K=%s N=%s rep=%s: TMQ %.2f veh, exited %.1f, faults %d",
            r["mode"], r["K"], r["N"], r["rep"],
            r["time_mean_queue_veh"], r["vehicles_exited"], r["faults"],
        )
    log.info("outputs under %s", args.out)
    return 0


def cmd_open_loop(args) -> int:
    scenario = _load(args.scenario)
    backend = resolve_backend(args.backend)
    counts = args.envelopes or [scenario.envelopes]
    rows = envelope_sweep(scenario, counts, K=args.horizon,
                          reference_N=args.reference, backend=backend,
                          limits=_limits(args))
    print(f"{'N':>4} {'status':>10} {'nodes':>7} {'seconds':>8} "
          f"{'relaxed':>12} {'replayed':>12} {'vs ref %':>9}")
    for r in rows:
        jm = "-" if r["j_model"] is None else f"{r['j_model']:.4f}"
        js = "-" if r["j_sim"] is None else f"{r['j_sim']:.4f}"
        err = "-" if r.get("err_vs_ref_pct") is None else f"{r['err_vs_ref_pct']:.5f}"
        print(f"{r['N']:>4} {r['status']:>10} {r['nodes']:>7} {r['seconds']:>8.2f} "
              f"{jm:>12} {js:>12} {err:>9}")
    if args.csv:
        path = Path(args.csv)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            w.writeheader()
            w.writerows(rows)
        log.info("wrote %s", path)
    return 0


def cmd_validate(args) -> int:
    try:
        scenario = _load(args.scenario)
    except (ScenarioError, FileNotFoundError, ValueError) as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return 1
    n_rows = len(scenario.demand)
    print(f"ok: {scenario.name} — {len(scenario.net.links)} links, "
          f"{len(scenario.net.nodes)} intersections, {n_rows} demand rows, "
          f"{scenario.cycles} cycles")
    return 0


def cmd_report(args) -> int:
    path = Path(args.out) / "summary.csv"
    if not path.exists():
        print(f"no summary at {path}; run `safmpc run` first", file=sys.stderr)
        return 1
    with path.open() as fh:
        rows = list(csv.DictReader(fh))
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["mode"], r["K"], r["N"]), []).append(r)
    print(f"{'mode':>12} {'K':>3} {'N':>3} {'reps':>4} {'TMQ veh':>10} "
          f"{'ATT min':>9} {'delay s/km':>11} {'exited':>9}")
    for key in sorted(groups):
        g = groups[key]

        def mean(col: str) -> float:
            return sum(float(r[col]) for r in g) / len(g)

        print(f"{key[0]:>12} {key[1]:>3} {key[2]:>3} {len(g):>4} "
              f"{mean('time_mean_queue_veh'):>10.2f} {mean('att_minutes'):>9.2f} "
              f"{mean('delay_s_per_km'):>11.1f} {mean('vehicles_exited'):>9.1f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="safmpc", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="closed-loop simulation of one or all control modes")
    _add_common(p)
    p.add_argument("--mode", default="all", choices=MODES + ("all",))
    p.add_argument("--reps", type=int, default=1)
    p.add_argument("--base-seed", type=int, default=20240501, dest="base_seed")
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("open-loop", help="solve one horizon and measure the envelope error")
    _add_common(p)
    p.add_argument("--reference", type=int, default=None,
                   help="envelope count of the reference solve for error columns")
    p.add_argument("--csv", default=None, help="also write the sweep table to this file")
    p.set_defaults(func=cmd_open_loop)

    p = sub.add_parser("validate", help="check a scenario file")
    p.add_argument("--scenario", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("report", help="aggregate summary.csv across replications")
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
