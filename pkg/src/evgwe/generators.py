"""Synthetic road networks and EV populations.

The road side of the reference scenario is synthetic: a rows x cols grid city
with seeded block lengths and background traffic. EV attributes are drawn
uniformly inside the configured bounds and each EV prefers the free-flow
shortest route to its nearest station.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .network import EvProfile, RoadEdge, StationSpec, TransportNetwork


@dataclass
class GridCityConfig:
    rows: int = 6
    cols: int = 6
    seed: int = 0
    block_km: tuple[float, float] = (0.4, 1.0)
    speed_kmh: float = 30.0
    density_veh_per_km: float = 30.0  # kappa = density * free-flow speed
    background: tuple[float, float] = (55.0, 150.0)
    cap: float = 160.0
    removed_roads: tuple[tuple[int, int], ...] = ()  # undirected node pairs


def grid_city(cfg: GridCityConfig) -> TransportNetwork:
    """Bidirectional rows x cols lattice; node ids 1..rows*cols in row-major order."""
    rng = np.random.default_rng(cfg.seed)
    removed = {frozenset(p) for p in cfg.removed_roads}
    roads = []
    for i in range(cfg.rows):
        for j in range(cfg.cols):
            u = i * cfg.cols + j + 1
            if j + 1 < cfg.cols:
                roads.append((u, u + 1))
            if i + 1 < cfg.rows:
                roads.append((u, u + cfg.cols))
    roads = [rd for rd in roads if frozenset(rd) not in removed]
    lengths = rng.uniform(*cfg.block_km, size=len(roads))
    bg = rng.uniform(*cfg.background, size=(len(roads), 2))
    kappa = cfg.density_veh_per_km * cfg.speed_kmh
    edges = []
    for k, ((u, v), length) in enumerate(zip(roads, lengths)):
        eta = float(length / cfg.speed_kmh)
        for d, (a, b) in enumerate(((u, v), (v, u))):
            edges.append(RoadEdge(len(edges) + 1, a, b, eta, kappa, float(bg[k, d]), cfg.cap))
    return TransportNetwork(tuple(range(1, cfg.rows * cfg.cols + 1)), tuple(edges))


def shortest_paths(transport: TransportNetwork, origin: int, weight=None):
    """Dijkstra from ``origin``; returns (dist by node index, predecessor edge by node index)."""
    w = transport.eta if weight is None else np.asarray(weight, dtype=float)
    adj = transport.successors()
    n = transport.n_nodes
    dist = np.full(n, np.inf)
    pred = np.full(n, -1, dtype=int)
    s = transport.node_index[origin]
    dist[s] = 0.0
    heap = [(0.0, s)]
    while heap:
        du, u = heapq.heappop(heap)
        if du > dist[u]:
            continue
        for e, v in adj[u]:
            nd = du + w[e]
            if nd < dist[v]:
                dist[v] = nd
                pred[v] = e
                heapq.heappush(heap, (nd, v))
    return dist, pred


def preferred_choice(transport: TransportNetwork, stations, origin: int, feasible) -> tuple[np.ndarray, np.ndarray]:
    """Shortest free-flow route to the nearest feasible station, as (r_pref, t_pref)."""
    dist, pred = shortest_paths(transport, origin)
    idx = transport.node_index
    best, best_d = None, np.inf
    for k, st in enumerate(stations):
        if st.id in feasible and dist[idx[st.node]] < best_d:
            best, best_d = k, dist[idx[st.node]]
    if best is None:
        raise ValueError(f"no feasible station reachable from node {origin}")
    r = np.zeros(transport.n_edges)
    v = idx[stations[best].node]
    while pred[v] >= 0:
        r[pred[v]] = 1.0
        v = transport.tail_idx[pred[v]]
    t = np.zeros(len(stations))
    t[best] = 1.0
    return r, t


@dataclass
class EvPopulationConfig:
    count: int = 125
    seed: int = 0
    demand: tuple[float, float] = (20.0, 70.0)
    omega: tuple[float, float] = (3.6, 14.4)
    alpha: float = 0.5
    beta: float = 0.5
    origins: tuple[int, ...] | None = None  # candidate origin nodes; None = every node
    demand_scale: float = 1.0


def ev_population(transport: TransportNetwork, stations: tuple[StationSpec, ...],
                  cfg: EvPopulationConfig) -> tuple[EvProfile, ...]:
    rng = np.random.default_rng(cfg.seed)
    pool = np.array(cfg.origins if cfg.origins else transport.nodes)
    origins = rng.choice(pool, size=cfg.count)
    demand = rng.uniform(*cfg.demand, size=cfg.count) * cfg.demand_scale
    omega = rng.uniform(*cfg.omega, size=cfg.count)
    feasible = tuple(s.id for s in stations)
    evs = []
    for i in range(cfg.count):
        r, t = preferred_choice(transport, stations, int(origins[i]), feasible)
        evs.append(EvProfile(
            id=i + 1, origin=int(origins[i]), feasible=feasible,
            demand=float(demand[i]), omega=float(omega[i]),
            alpha=cfg.alpha, beta=cfg.beta,
            pref_route=tuple(float(v) for v in r), pref_station=tuple(float(v) for v in t),
        ))
    return tuple(evs)
