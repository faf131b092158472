"""Solve the 33-bus / grid-city fixture and print the equilibrium at a glance.

    python3 scripts/run_fixture.py [--theta 0.3] [--out out/fixture]
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from evgwe.cli import write_solve_artifacts
from evgwe.scenario import load_scenario
from evgwe.solver import run, with_config

ROOT = Path(__file__).resolve().parents[1]


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenario", default=str(ROOT / "scenarios" / "ieee33_gridcity.toml"))
    ap.add_argument("--theta", type=float, default=None)
    ap.add_argument("--max-iters", type=int, default=None)
    ap.add_argument("--out", default=None, help="also write the CLI artifacts here")
    args = ap.parse_args(argv)
    sc = load_scenario(args.scenario)
    cfg = with_config(sc, theta=args.theta, max_iters=args.max_iters)

    def progress(k, state, rep):
        if k % 250 == 0:
            print(f"{k:6d}  change {rep.change:.2e}  violation {rep.violation:.2e}  cs {rep.cs_gap:.2e}  ({rep.worst})")

    res = run(sc, cfg, progress)
    cur = res.state.current
    print(f"converged={res.converged} iterations={res.iterations} natural residual={res.natural_residual:.3e} "
          f"time={res.seconds:.1f}s")
    print("DG output (kW):", np.round(cur.y[:sc.grid.n_gens], 1), "saturated:", res.saturated_generators)
    print("station DLMP ($/kWh):", np.round(cur.lambda_station, 4))
    print("station demand (kWh):", np.round(res.violations["phi"], 1), "caps:", sc.station_cap)
    print("surcharges:", np.round(cur.lambda_t, 4), " max toll:", float(np.max(cur.lambda_r, initial=0.0)))
    if args.out:
        write_solve_artifacts(Path(args.out), sc, cfg, res)


if __name__ == "__main__":
    main()
