"""Command-line front door: ``evgwe validate | solve | sweep``.

Exit codes: 0 ok, 1 non-convergence, 2 validation failure, 3 I/O.

Every artifact carries the scenario hash, solver config, seed and package
version, and contains nothing run-dependent (no timings or paths), so the same
scenario, config and seed give byte-identical files.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .dso import DsoModel, InfeasibleFeeder
from .ev import EvPopulation, InfeasiblePolytope
from .network import Scenario, ScenarioError, ValidationError
from .scenario import load_scenario, scenario_hash, with_overrides
from .solver import EquilibriumResult, SolverConfig, SolverError, run, with_config

EXIT_OK, EXIT_NOT_CONVERGED, EXIT_INVALID, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("evgwe")


class CliIOError(Exception):
    pass


def _num(v) -> str:
    """Shortest round-trip decimal; integers without a fractional part."""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else str(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def provenance(sc: Scenario, cfg: SolverConfig) -> dict:
    return {"version": __version__, "scenario": sc.name, "scenario_hash": scenario_hash(sc),
            "seed": cfg.seed, "config": _jsonable(asdict(cfg))}


def _meta_line(prov: dict) -> str:
    return "# " + json.dumps(prov, sort_keys=True, separators=(",", ":")) + "\n"


def _table(prov: dict, header: list[str], rows) -> str:
    buf = io.StringIO()
    buf.write(_meta_line(prov))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_num(v) for v in r])
    return buf.getvalue()


def _write(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise CliIOError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------

def diagnose(path) -> list[dict]:
    """Every problem found in the scenario file, as {entity, message} records (empty when valid)."""
    try:
        sc = load_scenario(path)
    except ValidationError as exc:
        return [{"entity": exc.entity, "message": exc.reason}]
    except ScenarioError as exc:
        return [{"entity": None, "message": str(exc)}]
    out = []
    try:
        DsoModel(sc.grid)
    except InfeasibleFeeder as exc:
        out.append({"entity": "grid", "message": str(exc)})
    try:
        EvPopulation(sc)
    except InfeasiblePolytope as exc:
        out.append({"entity": "evs", "message": str(exc)})
    return out


def cmd_validate(args) -> int:
    if not Path(args.file).is_file():
        print(json.dumps({"ok": False, "diagnostics": [{"entity": None, "message": f"cannot read {args.file}"}]}))
        return EXIT_IO
    diags = diagnose(args.file)
    print(json.dumps({"ok": not diags, "diagnostics": diags}, indent=2))
    return EXIT_OK if not diags else EXIT_INVALID


def summary(sc: Scenario, cfg: SolverConfig, res: EquilibriumResult) -> dict:
    cur = res.state.current
    g = sc.grid
    H = g.n_gens
    phi = res.violations["phi"]
    sigma = res.violations["sigma"]
    return {
        **provenance(sc, cfg),
        "converged": res.converged,
        "iterations": res.iterations,
        "natural_residual": res.natural_residual,
        "stopping": res.report.as_dict(),
        "steps": {"tau": float(np.max(res.steps.tau)) if sc.n_evs else None, "tau_0": res.steps.tau_0,
                  "mu_r": res.steps.mu_r, "mu_t": res.steps.mu_t, "mu_dlmp": res.steps.mu_dlmp,
                  "lipschitz": res.steps.lipschitz},
        "generators": [{"id": h.id, "bus": h.bus, "p": cur.y[k], "q": cur.y[H + k], "p_max": h.p_max,
                        "saturated": h.id in res.saturated_generators}
                       for k, h in enumerate(g.generators)],
        "saturated_generators": res.saturated_generators,
        "stations": [{"id": s.id, "bus": s.bus, "dlmp": cur.lambda_station[k], "demand": phi[k],
                      "cap": s.cap_energy, "surcharge": cur.lambda_t[k]}
                     for k, s in enumerate(sc.stations)],
        "tolls": [{"edge": e.id, "flow": sigma[k], "cap": e.cap, "toll": cur.lambda_r[k]}
                  for k, e in enumerate(sc.transport.edges) if math.isfinite(e.cap)],
        "dlmp": {str(b.id): cur.lambda_dlmp[k] for k, b in enumerate(g.buses)},
        "max_violation": {"road": float(np.max(res.violations["road"], initial=-np.inf)),
                          "station": float(np.max(res.violations["station"], initial=-np.inf)),
                          "balance": float(np.max(np.abs(res.violations["balance"]), initial=0.0))},
    }


def voltage_rows(sc: Scenario, y):
    g = sc.grid
    v = y[2 * g.n_gens + 2 * g.n_lines:]
    return [[b.id, v[k], math.sqrt(max(v[k], 0.0)), b.v_min, b.v_max] for k, b in enumerate(g.buses)]


def write_solve_artifacts(out: Path, sc: Scenario, cfg: SolverConfig, res: EquilibriumResult) -> None:
    prov = provenance(sc, cfg)
    _write(out / "summary.json", json.dumps(_jsonable(summary(sc, cfg, res)), indent=2, sort_keys=True) + "\n")
    rows = [[int(r[0])] + r[1:] for r in res.trace.rows]
    _write(out / "trace.csv", _table(prov, res.trace.header, rows))
    _write(out / "voltages.csv", _table(prov, ["bus", "v_squared_kv2", "v_kv", "v_squared_min", "v_squared_max"],
                                        voltage_rows(sc, res.state.current.y)))


def _load(path) -> Scenario:
    if not Path(path).is_file():
        raise CliIOError(f"cannot read {path}")
    return load_scenario(path)


def cmd_solve(args) -> int:
    sc = _load(args.file)
    cfg = with_config(sc, seed=args.seed, max_iters=args.max_iters, theta=args.theta)
    res = run(sc, cfg)
    write_solve_artifacts(Path(args.out), sc, cfg, res)
    state = "converged" if res.converged else "NOT converged"
    print(f"{sc.name}: {state} after {res.iterations} iterations, natural residual "
          f"{res.natural_residual:.3e}, saturated DGs {res.saturated_generators}; artifacts in {args.out}")
    return EXIT_OK if res.converged else EXIT_NOT_CONVERGED


def sweep(sc: Scenario, param: str, values, cfg: SolverConfig, drop_caps: bool = True):
    """One solve per value; returns (header, rows, all_converged)."""
    if not len(values):
        raise ValueError("empty sweep grid")
    header = [param, "converged", "iterations", "total_generation"]
    header += [f"dlmp_station_{s.id}" for s in sc.stations]
    header += [f"demand_station_{s.id}" for s in sc.stations]
    rows, ok = [], True
    for v in values:
        kw = {"n_evs": int(v)} if param == "n_evs" else {"omega_mean": float(v)}
        if drop_caps:
            kw.update(station_caps=math.inf, road_caps=math.inf)
        sc_v = with_overrides(sc, **kw)
        res = run(sc_v, cfg)
        ok &= res.converged
        cur = res.state.current
        rows.append([kw.get(param, v), int(res.converged), res.iterations,
                     float(np.sum(cur.y[:sc.grid.n_gens]))]
                    + cur.lambda_station.tolist() + res.violations["phi"].tolist())
        log.info("%s=%s: %s in %d iterations", param, v, res.converged, res.iterations)
    return header, rows, ok


def cmd_sweep(args) -> int:
    sc = _load(args.file)
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        print(f"error: --values must be numbers, got {args.values!r}", file=sys.stderr)
        return EXIT_INVALID
    if not values:
        print("error: empty sweep grid", file=sys.stderr)
        return EXIT_INVALID
    if args.param == "n_evs" and any(v != int(v) or v < 0 or v > sc.n_evs for v in values):
        print(f"error: n_evs values must be integers in [0, {sc.n_evs}]", file=sys.stderr)
        return EXIT_INVALID
    cfg = with_config(sc, seed=args.seed, max_iters=args.max_iters, theta=args.theta)
    header, rows, ok = sweep(sc, args.param, values, cfg, drop_caps=not args.keep_coupling_caps)
    prov = provenance(sc, cfg)
    prov["sweep"] = {"param": args.param, "values": values, "coupling_caps": bool(args.keep_coupling_caps)}
    _write(Path(args.out) / f"sweep_{args.param}.csv", _table(prov, header, rows))
    print(f"{sc.name}: sweep over {args.param} with {len(values)} points, "
          f"{'all converged' if ok else 'some points did NOT converge'}; artifacts in {args.out}")
    return EXIT_OK if ok else EXIT_NOT_CONVERGED


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="evgwe", description="EV routing / charging / distribution OPF equilibria")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a scenario file")
    p.add_argument("file")
    p.set_defaults(func=cmd_validate)

    def solver_opts(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--max-iters", type=int, default=None)
        p.add_argument("--theta", type=float, default=None)
        p.add_argument("--out", default="out")

    p = sub.add_parser("solve", help="compute the equilibrium and write artifacts")
    p.add_argument("file")
    solver_opts(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("sweep", help="solve over a grid of one parameter")
    p.add_argument("file")
    p.add_argument("--param", choices=["n_evs", "omega_mean"], required=True)
    p.add_argument("--values", required=True, help="comma-separated grid, e.g. 25,50,75")
    caps = p.add_mutually_exclusive_group()
    caps.add_argument("--no-coupling-caps", action="store_true",
                      help="lift station and road caps (the default)")
    caps.add_argument("--keep-coupling-caps", action="store_true", help="keep station and road caps")
    solver_opts(p)
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliIOError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ScenarioError as exc:
        print(f"invalid scenario: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (InfeasibleFeeder, InfeasiblePolytope, ValueError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED


if __name__ == "__main__":
    sys.exit(main())
