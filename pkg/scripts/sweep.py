"""DLMP at each station versus EV count (or mean time value), coupling caps lifted.

    python3 scripts/sweep.py --param n_evs --values 25,50,75,100,125
"""

from __future__ import annotations

import argparse
from pathlib import Path

from evgwe.scenario import load_scenario
from evgwe.cli import sweep
from evgwe.solver import with_config

ROOT = Path(__file__).resolve().parents[1]


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenario", default=str(ROOT / "scenarios" / "ieee33_gridcity.toml"))
    ap.add_argument("--param", choices=["n_evs", "omega_mean"], default="n_evs")
    ap.add_argument("--values", default="25,50,75,100,125")
    args = ap.parse_args(argv)
    sc = load_scenario(args.scenario)
    values = [float(v) for v in args.values.split(",")]
    header, rows, ok = sweep(sc, args.param, values, with_config(sc))
    width = max(len(h) for h in header)
    print("  ".join(h.rjust(width) for h in header))
    for r in rows:
        print("  ".join(f"{v:{width}.4f}" if isinstance(v, float) else f"{v:>{width}}" for v in r))
    if not ok:
        print("warning: some sweep points did not converge")


if __name__ == "__main__":
    main()
