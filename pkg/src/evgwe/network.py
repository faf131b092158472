"""Domain types for the road graph and the radial feeder, plus structural checks.

Units are fixed once a scenario is loaded: energy kWh, power kW / kvar / kVA,
time hours, money $, squared voltage (kV)^2.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field, fields
from functools import cached_property

import numpy as np

log = logging.getLogger(__name__)

# kV^2 of drop per (ohm * kW); LinDistFlow with P in kW and v in (kV)^2.
VOLTAGE_DROP_SCALE = 1e-3


class ScenarioError(Exception):
    """Malformed scenario input."""


class ValidationError(ScenarioError):
    """A structural invariant of the scenario is violated."""

    def __init__(self, message: str, entity: str | None = None):
        super().__init__(message if entity is None else f"{entity}: {message}")
        self.entity = entity
        self.reason = message


@dataclass(frozen=True)
class RoadEdge:
    id: int
    tail: int
    head: int
    eta: float  # free-flow travel time (h)
    kappa: float  # BPR capacity (veh/h)
    background: float  # non-EV flow (veh/h)
    cap: float  # hard flow limit (veh/h)


@dataclass(frozen=True)
class BprParams:
    pi: float = 0.15
    xi: float = 4.0

    def __post_init__(self):
        if self.pi < 0 or self.xi < 0:
            raise ValidationError("BPR constants must be non-negative", "bpr")


@dataclass(frozen=True)
class StationSpec:
    id: int
    node: int
    bus: int
    cap_energy: float  # kWh
    zeta: float  # $
    gamma: float  # 1/h
    chargers: int


@dataclass(frozen=True)
class LineSpec:
    from_bus: int
    to_bus: int
    r: float  # ohm
    x: float  # ohm
    s_max: float = math.inf  # kVA


@dataclass(frozen=True)
class GeneratorSpec:
    """Quadratic-cost DG, stored in kW units: cost = a p^2 + b p + c with p in kW."""

    id: int
    bus: int
    a: float
    b: float
    c: float
    p_min: float
    p_max: float
    q_min: float
    q_max: float

    def cost(self, p):
        return self.a * p**2 + self.b * p + self.c


@dataclass(frozen=True)
class BusSpec:
    id: int
    p_load: float = 0.0
    q_load: float = 0.0
    v_min: float = 0.0
    v_max: float = math.inf
    is_substation: bool = False


@dataclass(frozen=True)
class TransportNetwork:
    nodes: tuple[int, ...]
    edges: tuple[RoadEdge, ...]

    @cached_property
    def node_index(self) -> dict[int, int]:
        return {v: k for k, v in enumerate(self.nodes)}

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def tail_idx(self) -> np.ndarray:
        return np.array([self.node_index[e.tail] for e in self.edges], dtype=int)

    @cached_property
    def head_idx(self) -> np.ndarray:
        return np.array([self.node_index[e.head] for e in self.edges], dtype=int)

    @cached_property
    def eta(self) -> np.ndarray:
        return np.array([e.eta for e in self.edges], dtype=float)

    @cached_property
    def kappa(self) -> np.ndarray:
        return np.array([e.kappa for e in self.edges], dtype=float)

    @cached_property
    def background(self) -> np.ndarray:
        return np.array([e.background for e in self.edges], dtype=float)

    @cached_property
    def cap(self) -> np.ndarray:
        return np.array([e.cap for e in self.edges], dtype=float)

    @cached_property
    def incidence(self) -> np.ndarray:
        """Node-arc matrix with +1 where an edge enters a node and -1 where it leaves."""
        inc = np.zeros((self.n_nodes, self.n_edges))
        cols = np.arange(self.n_edges)
        inc[self.head_idx, cols] += 1.0
        inc[self.tail_idx, cols] -= 1.0
        return inc

    def successors(self) -> list[list[tuple[int, int]]]:
        """Adjacency by node index: (edge index, head index)."""
        adj: list[list[tuple[int, int]]] = [[] for _ in self.nodes]
        for k, (u, v) in enumerate(zip(self.tail_idx, self.head_idx)):
            adj[u].append((k, int(v)))
        return adj


@dataclass(frozen=True)
class DistributionNetwork:
    buses: tuple[BusSpec, ...]
    lines: tuple[LineSpec, ...]
    generators: tuple[GeneratorSpec, ...]
    v_substation: float  # fixed squared voltage at the substation, (kV)^2

    @cached_property
    def bus_index(self) -> dict[int, int]:
        return {b.id: k for k, b in enumerate(self.buses)}

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def n_lines(self) -> int:
        return len(self.lines)

    @property
    def n_gens(self) -> int:
        return len(self.generators)

    @cached_property
    def substation(self) -> int:
        return next(k for k, b in enumerate(self.buses) if b.is_substation)

    @cached_property
    def line_from(self) -> np.ndarray:
        return np.array([self.bus_index[ln.from_bus] for ln in self.lines], dtype=int)

    @cached_property
    def line_to(self) -> np.ndarray:
        return np.array([self.bus_index[ln.to_bus] for ln in self.lines], dtype=int)

    @cached_property
    def gen_bus(self) -> np.ndarray:
        return np.array([self.bus_index[g.bus] for g in self.generators], dtype=int)

    @cached_property
    def line_incidence(self) -> np.ndarray:
        """N x L: +1 at the sending bus, -1 at the receiving bus (net outflow)."""
        inc = np.zeros((self.n_buses, self.n_lines))
        cols = np.arange(self.n_lines)
        inc[self.line_from, cols] += 1.0
        inc[self.line_to, cols] -= 1.0
        return inc

    @cached_property
    def gen_incidence(self) -> np.ndarray:
        inc = np.zeros((self.n_buses, self.n_gens))
        inc[self.gen_bus, np.arange(self.n_gens)] = 1.0
        return inc

    def array(self, name: str) -> np.ndarray:
        """Column of bus, line, or generator attributes, e.g. ``array("p_load")``."""
        for kind, group in ((BusSpec, self.buses), (LineSpec, self.lines), (GeneratorSpec, self.generators)):
            if name in {f.name for f in fields(kind)}:
                return np.array([getattr(item, name) for item in group], dtype=float)
        raise AttributeError(name)


@dataclass(frozen=True)
class EvProfile:
    id: int
    origin: int
    feasible: tuple[int, ...]  # station ids
    demand: float  # q_i, kWh
    omega: float  # $/h
    alpha: float
    beta: float
    pref_route: tuple[float, ...]
    pref_station: tuple[float, ...]


@dataclass(frozen=True)
class Scenario:
    transport: TransportNetwork
    grid: DistributionNetwork
    bpr: BprParams
    stations: tuple[StationSpec, ...]
    evs: tuple[EvProfile, ...]
    solver: dict = field(default_factory=dict, compare=True)
    name: str = "scenario"

    @property
    def n_evs(self) -> int:
        return len(self.evs)

    @property
    def n_stations(self) -> int:
        return len(self.stations)

    @cached_property
    def station_index(self) -> dict[int, int]:
        return {s.id: k for k, s in enumerate(self.stations)}

    @cached_property
    def station_node(self) -> np.ndarray:
        idx = self.transport.node_index
        return np.array([idx[s.node] for s in self.stations], dtype=int)

    @cached_property
    def station_bus(self) -> np.ndarray:
        idx = self.grid.bus_index
        return np.array([idx[s.bus] for s in self.stations], dtype=int)

    @cached_property
    def station_incidence(self) -> np.ndarray:
        """N x D map from station demand to bus demand."""
        inc = np.zeros((self.grid.n_buses, self.n_stations))
        inc[self.station_bus, np.arange(self.n_stations)] = 1.0
        return inc

    @cached_property
    def station_cap(self) -> np.ndarray:
        return np.array([s.cap_energy for s in self.stations], dtype=float)

    @cached_property
    def congestion_slope(self) -> np.ndarray:
        """zeta / (gamma * chargers) per station, the slope of psi in arrivals."""
        return np.array([s.zeta / (s.gamma * s.chargers) for s in self.stations])

    @cached_property
    def ev_arrays(self) -> dict[str, np.ndarray]:
        evs = self.evs
        E, D = self.transport.n_edges, self.n_stations
        out = {
            "demand": np.array([ev.demand for ev in evs], dtype=float),
            "omega": np.array([ev.omega for ev in evs], dtype=float),
            "alpha": np.array([ev.alpha for ev in evs], dtype=float),
            "beta": np.array([ev.beta for ev in evs], dtype=float),
            "origin": np.array([self.transport.node_index[ev.origin] for ev in evs], dtype=int),
            "pref_route": np.array([ev.pref_route for ev in evs], dtype=float).reshape(len(evs), E),
            "pref_station": np.array([ev.pref_station for ev in evs], dtype=float).reshape(len(evs), D),
        }
        allowed = np.zeros((len(evs), D), dtype=bool)
        for i, ev in enumerate(evs):
            for d in ev.feasible:
                allowed[i, self.station_index[d]] = True
        out["feasible"] = allowed
        return out


def validate_radial(grid: DistributionNetwork) -> list[int]:
    """Breadth-first bus order from the substation; raises unless the feeder is a tree."""
    N = grid.n_buses
    if N == 0:
        raise ValidationError("feeder has no buses", "grid")
    subs = [k for k, b in enumerate(grid.buses) if b.is_substation]
    if len(subs) != 1:
        raise ValidationError(f"expected exactly one substation bus, found {len(subs)}", "grid")
    if grid.n_lines != N - 1:
        raise ValidationError(
            f"feeder not radial: {grid.n_lines} lines for {N} buses (need {N - 1})", "grid"
        )
    # union-find for cycles
    parent = list(range(N))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for k, (u, v) in enumerate(zip(grid.line_from, grid.line_to)):
        ru, rv = find(int(u)), find(int(v))
        if ru == rv:
            raise ValidationError("feeder not radial: lines contain a cycle", f"line {k + 1}")
        parent[ru] = rv

    adj: list[list[int]] = [[] for _ in range(N)]
    for u, v in zip(grid.line_from, grid.line_to):
        adj[u].append(int(v))
        adj[v].append(int(u))
    order, seen = [], {subs[0]}
    queue = deque([subs[0]])
    while queue:
        u = queue.popleft()
        order.append(u)
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                queue.append(v)
    if len(order) != N:
        missing = [grid.buses[k].id for k in range(N) if k not in seen]
        raise ValidationError(f"feeder not radial: disconnected buses {missing}", "grid")
    return [grid.buses[k].id for k in order]


def reachable_nodes(transport: TransportNetwork, origin: int) -> set[int]:
    """Node ids reachable from ``origin`` along directed edges."""
    adj = transport.successors()
    start = transport.node_index[origin]
    seen = {start}
    queue = deque([start])
    while queue:
        u = queue.popleft()
        for _, v in adj[u]:
            if v not in seen:
                seen.add(v)
                queue.append(v)
    return {transport.nodes[k] for k in seen}


def reachability_check(transport: TransportNetwork, ev: EvProfile,
                       stations: tuple[StationSpec, ...]) -> set[int]:
    """Feasible stations of ``ev`` that a directed path from its origin can reach."""
    nodes = reachable_nodes(transport, ev.origin)
    by_id = {s.id: s for s in stations}
    hit = {d for d in ev.feasible if by_id[d].node in nodes}
    lost = sorted(set(ev.feasible) - hit)
    if lost:
        log.warning("EV %s cannot reach stations %s; their probabilities are pinned to 0", ev.id, lost)
    return hit


def validate_scenario(sc: Scenario) -> None:
    """Check every structural invariant; raises ValidationError naming the entity."""
    tr, grid = sc.transport, sc.grid
    if len(set(tr.nodes)) != len(tr.nodes):
        raise ValidationError("duplicate node ids", "transport")
    for k, e in enumerate(tr.edges):
        name = f"edge {e.id}"
        if e.tail not in tr.node_index or e.head not in tr.node_index:
            raise ValidationError("endpoint is not a transport node", name)
        if e.tail == e.head:
            raise ValidationError("self-loop", name)
        if not e.eta > 0:
            raise ValidationError("eta must be > 0", name)
        if not e.kappa > 0:
            raise ValidationError("kappa must be > 0", name)
        if not 0 <= e.background <= e.cap:
            raise ValidationError("need 0 <= background <= cap", name)

    bus_ids = [b.id for b in grid.buses]
    if len(set(bus_ids)) != len(bus_ids):
        raise ValidationError("duplicate bus ids", "grid")
    for b in grid.buses:
        if not 0 < b.v_min <= b.v_max:
            raise ValidationError("need 0 < v_min <= v_max", f"bus {b.id}")
    for k, ln in enumerate(grid.lines):
        name = f"line {k + 1} ({ln.from_bus}->{ln.to_bus})"
        if ln.from_bus not in grid.bus_index or ln.to_bus not in grid.bus_index:
            raise ValidationError("endpoint is not a bus", name)
        if ln.r < 0 or ln.x < 0 or not ln.s_max > 0:
            raise ValidationError("need r >= 0, x >= 0, s_max > 0", name)
    validate_radial(grid)
    for g in grid.generators:
        name = f"generator {g.id}"
        if g.bus not in grid.bus_index:
            raise ValidationError(f"bus {g.bus} does not exist", name)
        if not g.a > 0:
            raise ValidationError("quadratic cost coefficient a must be > 0", name)
        if g.p_min > g.p_max or g.q_min > g.q_max:
            raise ValidationError("lower limit above upper limit", name)

    ids = [s.id for s in sc.stations]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate station ids", "stations")
    for s in sc.stations:
        name = f"station {s.id}"
        if s.node not in tr.node_index:
            raise ValidationError(f"node {s.node} does not exist", name)
        if s.bus not in grid.bus_index:
            raise ValidationError(f"bus {s.bus} does not exist in the feeder", name)
        if not s.cap_energy > 0 or not s.gamma > 0 or s.chargers < 1 or s.zeta < 0:
            raise ValidationError("need cap > 0, gamma > 0, chargers >= 1, zeta >= 0", name)

    E, D = tr.n_edges, len(sc.stations)
    for ev in sc.evs:
        name = f"ev {ev.id}"
        if ev.origin not in tr.node_index:
            raise ValidationError(f"origin {ev.origin} is not a transport node", name)
        if not ev.feasible:
            raise ValidationError("empty feasible station set", name)
        for d in ev.feasible:
            if d not in sc.station_index:
                raise ValidationError(f"feasible station {d} does not exist", name)
        if len(ev.pref_route) != E or len(ev.pref_station) != D:
            raise ValidationError("preference vector has the wrong length", name)
        if min(ev.pref_route, default=0.0) < 0 or max(ev.pref_route, default=0.0) > 1:
            raise ValidationError("preferred route outside [0, 1]", name)
        if not math.isclose(sum(ev.pref_station), 1.0, abs_tol=1e-9):
            raise ValidationError("preferred station vector must sum to 1", name)
        for d, val in zip(sc.stations, ev.pref_station):
            if val < 0 or (val > 0 and d.id not in ev.feasible):
                raise ValidationError("preferred station outside the feasible set", name)
        if ev.demand <= 0 or ev.omega < 0 or ev.alpha < 0 or ev.beta < 0:
            raise ValidationError("need demand > 0 and omega, alpha, beta >= 0", name)
        if not reachability_check(tr, ev, sc.stations):
            raise ValidationError("no feasible station is reachable from the origin", name)
