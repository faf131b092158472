"""Scenario files: TOML in, validated :class:`Scenario` out, and back.

The layout is documented in ``docs/scenario_schema.md``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import replace
from pathlib import Path

import tomli
import tomli_w

from .generators import (EvPopulationConfig, GridCityConfig, ev_population, grid_city,
                         preferred_choice)
from .network import (BprParams, BusSpec, DistributionNetwork, EvProfile, GeneratorSpec,
                      LineSpec, RoadEdge, Scenario, ScenarioError, StationSpec,
                      TransportNetwork, validate_scenario)

_MW = {"p": 1e3, "a": 1e-6, "b": 1e-3}


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read {path}: {exc}") from exc
    return loads(text, name=path.stem)


def loads(text: str, name: str = "scenario") -> Scenario:
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ScenarioError(f"parse error: {exc}") from exc
    return from_dict(doc, name=name)


def _req(table: dict, key: str, where: str):
    try:
        return table[key]
    except KeyError:
        raise ScenarioError(f"{where}: missing key '{key}'") from None


def _transport(doc: dict) -> TransportNetwork:
    tr = _req(doc, "transport", "top level")
    if "grid_city" in tr:
        gc = dict(tr["grid_city"])
        for k in ("block_km", "background"):
            if k in gc:
                gc[k] = tuple(gc[k])
        if "removed_roads" in gc:
            gc["removed_roads"] = tuple(tuple(p) for p in gc["removed_roads"])
        try:
            return grid_city(GridCityConfig(**gc))
        except TypeError as exc:
            raise ScenarioError(f"transport.grid_city: {exc}") from exc
    nodes = tuple(int(v) for v in _req(tr, "nodes", "transport"))
    edges = []
    for k, raw in enumerate(_req(tr, "edges", "transport")):
        where = f"transport.edges[{k}]"
        vals = {f: float(_req(raw, f, where)) for f in ("eta", "kappa", "background", "cap")}
        tail, head = int(_req(raw, "tail", where)), int(_req(raw, "head", where))
        edges.append(RoadEdge(len(edges) + 1, tail, head, **vals))
        if raw.get("bidirectional", False):
            back = dict(vals, background=float(raw.get("background_reverse", vals["background"])))
            edges.append(RoadEdge(len(edges) + 1, head, tail, **back))
    return TransportNetwork(nodes, tuple(edges))


def _grid(doc: dict) -> DistributionNetwork:
    g = _req(doc, "grid", "top level")
    vmin_default = g.get("v_min", 0.0)
    vmax_default = g.get("v_max", math.inf)
    buses = []
    for k, raw in enumerate(_req(g, "buses", "grid")):
        buses.append(BusSpec(
            id=int(_req(raw, "id", f"grid.buses[{k}]")),
            p_load=float(raw.get("p_load", 0.0)), q_load=float(raw.get("q_load", 0.0)),
            v_min=float(raw.get("v_min", vmin_default)), v_max=float(raw.get("v_max", vmax_default)),
            is_substation=bool(raw.get("substation", False)),
        ))
    lines = []
    for k, raw in enumerate(g.get("lines", [])):
        where = f"grid.lines[{k}]"
        lines.append(LineSpec(int(_req(raw, "from", where)), int(_req(raw, "to", where)),
                              float(_req(raw, "r", where)), float(_req(raw, "x", where)),
                              float(raw.get("s_max", math.inf))))
    gens = []
    for k, raw in enumerate(g.get("generators", [])):
        where = f"grid.generators[{k}]"
        units = raw.get("units", "kW")
        if units not in ("kW", "MW"):
            raise ScenarioError(f"{where}: units must be 'kW' or 'MW'")
        sp = _MW["p"] if units == "MW" else 1.0
        sa = _MW["a"] if units == "MW" else 1.0
        sb = _MW["b"] if units == "MW" else 1.0
        p_max = float(_req(raw, "p_max", where))
        gens.append(GeneratorSpec(
            id=int(_req(raw, "id", where)), bus=int(_req(raw, "bus", where)),
            a=float(_req(raw, "a", where)) * sa, b=float(_req(raw, "b", where)) * sb,
            c=float(raw.get("c", 0.0)),
            p_min=float(raw.get("p_min", 0.0)) * sp, p_max=p_max * sp,
            q_min=float(raw.get("q_min", -p_max)) * sp, q_max=float(raw.get("q_max", p_max)) * sp,
        ))
    v_sub = float(_req(g, "v_substation", "grid"))
    return DistributionNetwork(tuple(buses), tuple(lines), tuple(gens), v_sub)


def _stations(doc: dict) -> tuple[StationSpec, ...]:
    out = []
    for k, raw in enumerate(doc.get("stations", [])):
        where = f"stations[{k}]"
        out.append(StationSpec(
            id=int(_req(raw, "id", where)), node=int(_req(raw, "node", where)),
            bus=int(_req(raw, "bus", where)), cap_energy=float(_req(raw, "cap", where)),
            zeta=float(_req(raw, "zeta", where)), gamma=float(_req(raw, "gamma", where)),
            chargers=int(_req(raw, "chargers", where)),
        ))
    return tuple(out)


def _evs(doc: dict, transport: TransportNetwork, stations) -> tuple[EvProfile, ...]:
    if "ev_population" in doc and "evs" in doc:
        raise ScenarioError("give either [[evs]] or [ev_population], not both")
    if "ev_population" in doc:
        pop = dict(doc["ev_population"])
        for k in ("demand", "omega"):
            if k in pop:
                pop[k] = tuple(pop[k])
        if "origins" in pop:
            pop["origins"] = tuple(int(v) for v in pop["origins"])
        try:
            cfg = EvPopulationConfig(**pop)
        except TypeError as exc:
            raise ScenarioError(f"ev_population: {exc}") from exc
        if cfg.count and not stations:
            raise ScenarioError("ev_population: no stations defined")
        return ev_population(transport, stations, cfg)

    all_ids = tuple(s.id for s in stations)
    evs = []
    for k, raw in enumerate(doc.get("evs", [])):
        where = f"evs[{k}]"
        origin = int(_req(raw, "origin", where))
        feasible = tuple(int(d) for d in raw.get("feasible", all_ids))
        if "pref_route" in raw and "pref_station" in raw:
            r = [float(v) for v in raw["pref_route"]]
            t = [float(v) for v in raw["pref_station"]]
        else:
            if origin not in transport.node_index:
                raise ScenarioError(f"{where}: origin {origin} is not a transport node")
            try:
                r, t = preferred_choice(transport, stations, origin, feasible)
            except ValueError as exc:
                raise ScenarioError(f"{where}: {exc}") from exc
            r, t = list(map(float, r)), list(map(float, t))
        evs.append(EvProfile(
            id=int(raw.get("id", k + 1)), origin=origin, feasible=feasible,
            demand=float(_req(raw, "demand", where)), omega=float(_req(raw, "omega", where)),
            alpha=float(raw.get("alpha", 0.5)), beta=float(raw.get("beta", 0.5)),
            pref_route=tuple(r), pref_station=tuple(t),
        ))
    return tuple(evs)


def from_dict(doc: dict, name: str = "scenario", validate: bool = True) -> Scenario:
    try:
        transport = _transport(doc)
        stations = _stations(doc)
        bpr_raw = doc.get("bpr", {})
        sc = Scenario(
            transport=transport, grid=_grid(doc),
            bpr=BprParams(float(bpr_raw.get("pi", 0.15)), float(bpr_raw.get("xi", 4.0))),
            stations=stations, evs=_evs(doc, transport, stations),
            solver=dict(doc.get("solver", {})), name=str(doc.get("meta", {}).get("name", name)),
        )
    except (TypeError, ValueError, AttributeError) as exc:
        raise ScenarioError(f"malformed scenario: {exc}") from exc
    if validate:
        validate_scenario(sc)
    return sc


def to_dict(sc: Scenario) -> dict:
    """Explicit (generator-free) document for ``sc``; inverse of :func:`from_dict`."""
    tr, g = sc.transport, sc.grid
    return {
        "meta": {"name": sc.name},
        "bpr": {"pi": sc.bpr.pi, "xi": sc.bpr.xi},
        "transport": {
            "nodes": list(tr.nodes),
            "edges": [{"id": e.id, "tail": e.tail, "head": e.head, "eta": e.eta, "kappa": e.kappa,
                       "background": e.background, "cap": e.cap} for e in tr.edges],
        },
        "stations": [{"id": s.id, "node": s.node, "bus": s.bus, "cap": s.cap_energy,
                      "zeta": s.zeta, "gamma": s.gamma, "chargers": s.chargers}
                     for s in sc.stations],
        "grid": {
            "v_substation": g.v_substation,
            "buses": [{"id": b.id, "p_load": b.p_load, "q_load": b.q_load, "v_min": b.v_min,
                       "v_max": b.v_max, "substation": b.is_substation} for b in g.buses],
            "lines": [{"from": ln.from_bus, "to": ln.to_bus, "r": ln.r, "x": ln.x,
                       "s_max": ln.s_max} for ln in g.lines],
            "generators": [{"id": h.id, "bus": h.bus, "units": "kW", "a": h.a, "b": h.b, "c": h.c,
                            "p_min": h.p_min, "p_max": h.p_max, "q_min": h.q_min,
                            "q_max": h.q_max} for h in g.generators],
        },
        "evs": [{"id": ev.id, "origin": ev.origin, "feasible": list(ev.feasible),
                 "demand": ev.demand, "omega": ev.omega, "alpha": ev.alpha, "beta": ev.beta,
                 "pref_route": list(ev.pref_route), "pref_station": list(ev.pref_station)}
                for ev in sc.evs],
        "solver": dict(sc.solver),
    }


def dumps(sc: Scenario) -> str:
    return tomli_w.dumps(to_dict(sc))


def scenario_hash(sc: Scenario) -> str:
    return hashlib.sha256(dumps(sc).encode()).hexdigest()[:16]


def with_overrides(sc: Scenario, *, station_caps: float | None = None, road_caps: float | None = None,
                   line_limits: float | None = None, gen_caps: float | None = None,
                   voltage_bounds: tuple[float, float] | None = None,
                   demand_scale: float = 1.0, n_evs: int | None = None,
                   omega_mean: float | None = None) -> Scenario:
    """Copy of ``sc`` with coupling or network limits replaced (``math.inf`` lifts a limit)."""
    stations = sc.stations
    if station_caps is not None:
        stations = tuple(replace(s, cap_energy=station_caps) for s in stations)
    transport = sc.transport
    if road_caps is not None:
        transport = TransportNetwork(transport.nodes,
                                     tuple(replace(e, cap=road_caps) for e in transport.edges))
    grid = sc.grid
    lines, gens, buses = grid.lines, grid.generators, grid.buses
    if line_limits is not None:
        lines = tuple(replace(ln, s_max=line_limits) for ln in lines)
    if gen_caps is not None:
        gens = tuple(replace(h, p_min=min(h.p_min, 0.0), p_max=gen_caps, q_min=-gen_caps, q_max=gen_caps)
                     for h in gens)
    if voltage_bounds is not None:
        buses = tuple(replace(b, v_min=voltage_bounds[0], v_max=voltage_bounds[1]) for b in buses)
    grid = DistributionNetwork(buses, lines, gens, grid.v_substation)
    evs = sc.evs
    if n_evs is not None:
        if n_evs > len(evs):
            raise ValueError(f"scenario only has {len(evs)} EVs")
        evs = evs[:n_evs]
    if omega_mean is not None and evs:
        shift = omega_mean - sum(ev.omega for ev in evs) / len(evs)
        evs = tuple(replace(ev, omega=max(ev.omega + shift, 0.0)) for ev in evs)
    if demand_scale != 1.0:
        evs = tuple(replace(ev, demand=ev.demand * demand_scale) for ev in evs)
    return Scenario(transport, grid, sc.bpr, stations, evs, dict(sc.solver), sc.name)
