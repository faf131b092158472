"""Write scenarios/ieee33_gridcity.toml from the IEEE 33-bus data and the grid-city generator settings.

    python3 scripts/make_fixture.py [--out scenarios/ieee33_gridcity.toml]
"""

from __future__ import annotations

import argparse
from pathlib import Path

import tomli_w

from evgwe import ieee33

# station id: (transport node, feeder bus, cap kWh, chargers)
STATIONS = {1: (8, 13, 1250.0, 12), 2: (11, 29, 1000.0, 14), 3: (15, 24, 1400.0, 8),
            4: (20, 9, 1450.0, 10), 5: (27, 31, 1250.0, 12), 6: (30, 16, 1350.0, 8)}
DG_BUS = {1: 1, 2: 18, 3: 32, 4: 22, 5: 25}
Q_SHARE = 0.6  # reactive range as a fraction of p_max
REMOVED_ROADS = [[3, 4], [33, 34]]


def fixture() -> dict:
    buses = []
    for j in range(1, 34):
        p, q = ieee33.LOADS[j]
        row = {"id": j, "p_load": float(p), "q_load": float(q)}
        if j == 1:
            row["substation"] = True
        buses.append(row)
    lines = []
    for k, (u, j, r, x) in enumerate(ieee33.LINES, start=1):
        row = {"from": u, "to": j, "r": r, "x": x}
        if k in ieee33.LINE_LIMITS:
            row["s_max"] = ieee33.LINE_LIMITS[k]
        lines.append(row)
    gens = []
    for h, (p_max, a, b) in ieee33.DG_TABLE.items():
        gens.append({"id": h, "bus": DG_BUS[h], "units": "MW", "a": a, "b": b, "c": 0.0,
                     "p_min": 0.0, "p_max": p_max,
                     "q_min": -Q_SHARE * p_max, "q_max": Q_SHARE * p_max})
    return {
        "meta": {"name": "ieee33_gridcity"},
        "bpr": {"pi": 4.0, "xi": 1.0},
        "transport": {"grid_city": {
            "rows": 6, "cols": 6, "seed": 7, "block_km": [0.4, 1.0], "speed_kmh": 30.0,
            "density_veh_per_km": 30.0, "background": [55.0, 150.0], "cap": 160.0,
            "removed_roads": REMOVED_ROADS,
        }},
        "stations": [{"id": d, "node": n, "bus": b, "cap": cap, "zeta": 2.0, "gamma": 2.0,
                      "chargers": ch} for d, (n, b, cap, ch) in STATIONS.items()],
        "grid": {"v_substation": round(ieee33.BASE_KV**2, 4), "v_min": ieee33.V_MIN,
                 "v_max": ieee33.V_MAX, "buses": buses, "lines": lines, "generators": gens},
        "ev_population": {"count": 125, "seed": 11, "demand": [20.0, 70.0],
                          "omega": [3.6, 14.4], "alpha": 0.5, "beta": 0.5},
    }


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "scenarios" / "ieee33_gridcity.toml"))
    args = ap.parse_args(argv)
    Path(args.out).write_text(tomli_w.dumps(fixture()))
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
