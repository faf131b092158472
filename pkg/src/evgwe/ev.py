"""EV players: cost terms, Wardrop pseudo-gradients, local flow polytope and prox step.

A strategy is x_i = (r_i, t_i) with r_i over the E road edges and t_i over the
D stations, stored as one vector of length E + D (routes first).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coordinators import aggregate_link_flow, aggregate_station_arrivals
from .network import EvProfile, Scenario, TransportNetwork, reachable_nodes
from .qp import QPFailure, solve_separable_qp


class InfeasiblePolytope(ValueError):
    pass


@dataclass
class EvStrategy:
    r: np.ndarray
    t: np.ndarray

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([self.r, self.t])


@dataclass
class AggregateSignal:
    sigma: np.ndarray
    delta: np.ndarray
    latency: np.ndarray
    psi: np.ndarray


@dataclass
class PriceSignal:
    lambda_r: np.ndarray
    lambda_t: np.ndarray
    lambda_station: np.ndarray


def bpr_latency(eta, kappa, sigma, pi: float, xi: float):
    """eta (1 + pi (sigma / kappa)^xi), elementwise."""
    return eta * (1.0 + pi * (np.asarray(sigma, dtype=float) / kappa) ** xi)


def congestion_price(slope, delta):
    """psi_d = zeta_d delta_d / (gamma_d phi_d), with ``slope`` = zeta / (gamma phi)."""
    return slope * np.asarray(delta, dtype=float)


def aggregate_signal(sc: Scenario, r, t) -> AggregateSignal:
    tr = sc.transport
    sigma = aggregate_link_flow(tr.background, r)
    delta = aggregate_station_arrivals(t, sc.n_stations)
    return AggregateSignal(sigma, delta, bpr_latency(tr.eta, tr.kappa, sigma, sc.bpr.pi, sc.bpr.xi),
                           congestion_price(sc.congestion_slope, delta))


def _check(ev: EvProfile, r, t):
    r, t = np.asarray(r, dtype=float), np.asarray(t, dtype=float)
    if r.shape != (len(ev.pref_route),) or t.shape != (len(ev.pref_station),):
        raise ValueError(f"strategy shape {r.shape}/{t.shape} does not match the scenario "
                         f"({len(ev.pref_route)} edges, {len(ev.pref_station)} stations)")
    return r, t


def preference_cost(ev: EvProfile, r, t) -> float:
    r, t = _check(ev, r, t)
    return (0.5 * ev.alpha * np.sum((r - np.array(ev.pref_route)) ** 2)
            + 0.5 * ev.beta * np.sum((t - np.array(ev.pref_station)) ** 2))


def travel_cost(r_i, latency) -> float:
    return float(np.dot(latency, r_i))


def station_cost(t_i, psi) -> float:
    return float(np.dot(psi, t_i))


def total_cost(ev: EvProfile, r, t, agg: AggregateSignal) -> float:
    return preference_cost(ev, r, t) + ev.omega * travel_cost(r, agg.latency) + station_cost(t, agg.psi)


def aggregate_gradient(omega, agg: AggregateSignal) -> np.ndarray:
    """Gradient of omega C_travel + C_station in x_i with the aggregate frozen; (M, E+D) for an array of omegas."""
    omega = np.asarray(omega, dtype=float)
    route = np.multiply.outer(omega, agg.latency)
    station = np.broadcast_to(agg.psi, omega.shape + agg.psi.shape)
    return np.concatenate([route, station], axis=-1)


def pseudo_gradient_i(ev: EvProfile, r, t, agg: AggregateSignal) -> np.ndarray:
    r, t = _check(ev, r, t)
    pref = np.concatenate([ev.alpha * (r - np.array(ev.pref_route)),
                           ev.beta * (t - np.array(ev.pref_station))])
    return pref + aggregate_gradient(ev.omega, agg)


def price_gradient(demand, prices: PriceSignal) -> np.ndarray:
    """(lambda_r, q_i (lambda_t + lambda_station)); (M, E+D) for an array of demands."""
    demand = np.asarray(demand, dtype=float)
    route = np.broadcast_to(prices.lambda_r, demand.shape + prices.lambda_r.shape)
    station = np.multiply.outer(demand, prices.lambda_t + prices.lambda_station)
    return np.concatenate([route, station], axis=-1)


def price_gradient_i(ev: EvProfile, prices: PriceSignal) -> np.ndarray:
    return price_gradient(ev.demand, prices)


def reflected_gradient_i(grad_k, grad_km1, price_grad_k):
    return 2.0 * np.asarray(grad_k) - np.asarray(grad_km1) + np.asarray(price_grad_k)


@dataclass
class LocalPolytope:
    """{A z = b, lo <= z <= hi}: flow conservation with station rows tied to t."""

    A: np.ndarray
    b: np.ndarray
    lo: np.ndarray
    hi: np.ndarray


def flow_matrix(sc: Scenario) -> np.ndarray:
    """V x (E+D): inflow - outflow per node minus the station probabilities sited there."""
    tr = sc.transport
    A = np.zeros((tr.n_nodes, tr.n_edges + sc.n_stations))
    A[:, :tr.n_edges] = tr.incidence
    A[sc.station_node, tr.n_edges + np.arange(sc.n_stations)] -= 1.0
    return A


def build_local_polytope(ev: EvProfile, sc: Scenario, A: np.ndarray | None = None) -> LocalPolytope:
    tr = sc.transport
    E, D = tr.n_edges, sc.n_stations
    b = np.zeros(tr.n_nodes)
    b[tr.node_index[ev.origin]] = -1.0
    lo = np.zeros(E + D)
    hi = np.ones(E + D)
    reach = reachable_nodes(tr, ev.origin)
    open_ = [k for k, s in enumerate(sc.stations) if s.id in ev.feasible and s.node in reach]
    if not open_:
        raise InfeasiblePolytope(f"EV {ev.id}: no feasible station reachable from node {ev.origin}")
    mask = np.zeros(D, dtype=bool)
    mask[open_] = True
    hi[E:][~mask] = 0.0
    return LocalPolytope(flow_matrix(sc) if A is None else A, b, lo, hi)


def prox_weights(alpha, beta, tau, E: int, D: int):
    """Per-coordinate weight of U_i + ||z - target||^2 / (2 tau); broadcast over EVs."""
    alpha, beta, tau = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (alpha, beta, tau))
    return np.concatenate([np.repeat((alpha + 1 / tau)[:, None], E, axis=1),
                           np.repeat((beta + 1 / tau)[:, None], D, axis=1)], axis=1)


def prox_step_i(ev: EvProfile, poly: LocalPolytope, tau: float, target, nu0=None,
                tol: float = 1e-10) -> EvStrategy:
    """argmin_{z in X_i} U_i(z) + ||z - target||^2 / (2 tau)."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    E, D = len(ev.pref_route), len(ev.pref_station)
    pref = np.concatenate([ev.pref_route, ev.pref_station])
    curv = np.concatenate([np.full(E, ev.alpha), np.full(D, ev.beta)])
    w = curv + 1 / tau
    c = (curv * pref + np.asarray(target, dtype=float) / tau) / w
    try:
        res = solve_separable_qp(poly.A, poly.b, w, c, poly.lo, poly.hi, nu0=nu0, tol=tol)
    except QPFailure as exc:
        raise QPFailure(f"EV {ev.id} prox: {exc}") from exc
    return EvStrategy(res.z[:E], res.z[E:])


class EvPopulation:
    """Stacked local polytopes of every EV, for batched prox steps with warm starts."""

    def __init__(self, sc: Scenario):
        self.sc = sc
        tr = sc.transport
        self.E, self.D = tr.n_edges, sc.n_stations
        self.A = flow_matrix(sc)
        polys = [build_local_polytope(ev, sc, self.A) for ev in sc.evs]
        M, n = sc.n_evs, self.E + self.D
        self.b = np.array([p.b for p in polys]).reshape(M, tr.n_nodes)
        self.lo = np.array([p.lo for p in polys]).reshape(M, n)
        self.hi = np.array([p.hi for p in polys]).reshape(M, n)
        ev = sc.ev_arrays
        self.alpha, self.beta = ev["alpha"], ev["beta"]
        self.pref = np.concatenate([ev["pref_route"], ev["pref_station"]], axis=1)
        self.curv = np.concatenate([np.repeat(self.alpha[:, None], self.E, 1),
                                    np.repeat(self.beta[:, None], self.D, 1)], axis=1)
        self.nu = np.zeros((M, tr.n_nodes))

    def prox(self, tau, target, tol: float = 1e-10, warm: bool = True) -> np.ndarray:
        """Row-wise prox of tau_i U_i + iota_{X_i} at ``target`` (M, E+D)."""
        if self.sc.n_evs == 0:
            return np.zeros((0, self.E + self.D))
        tau = np.broadcast_to(np.asarray(tau, dtype=float), (self.sc.n_evs,))
        w = self.curv + 1 / tau[:, None]
        c = (self.curv * self.pref + target / tau[:, None]) / w
        res = solve_separable_qp(self.A, self.b, w, c, self.lo, self.hi,
                                 nu0=self.nu if warm else None, tol=tol)
        if warm:
            self.nu = res.nu
        return res.z

    def project(self, points, tol: float = 1e-10) -> np.ndarray:
        """Euclidean projection of each row onto its X_i (no warm start)."""
        w = np.ones_like(points)
        return solve_separable_qp(self.A, self.b, w, points, self.lo, self.hi, tol=tol).z


def split(x: np.ndarray, E: int):
    return x[..., :E], x[..., E:]
