"""The DSO player: LinDistFlow OPF pieces, its prox step, and DLMP updates.

The DSO decision is y = (p_gen, q_gen, P, Q, v) with H generators, L lines and
N buses. Active power balance is the coupling constraint (priced by the DLMP
multipliers); reactive balance, the voltage-drop equations, generator and
voltage boxes and the line discs P^2 + Q^2 <= S_max^2 form the private set Y.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import VOLTAGE_DROP_SCALE, DistributionNetwork
from .qp import QPFailure, solve_separable_qp


class InfeasibleFeeder(ValueError):
    pass


@dataclass(frozen=True)
class DsoLayout:
    H: int
    L: int
    N: int

    @classmethod
    def of(cls, grid: DistributionNetwork) -> "DsoLayout":
        return cls(grid.n_gens, grid.n_lines, grid.n_buses)

    @property
    def size(self) -> int:
        return 2 * self.H + 2 * self.L + self.N

    @property
    def p(self) -> slice:
        return slice(0, self.H)

    @property
    def q(self) -> slice:
        return slice(self.H, 2 * self.H)

    @property
    def P(self) -> slice:
        return slice(2 * self.H, 2 * self.H + self.L)

    @property
    def Q(self) -> slice:
        return slice(2 * self.H + self.L, 2 * self.H + 2 * self.L)

    @property
    def v(self) -> slice:
        return slice(2 * self.H + 2 * self.L, self.size)


@dataclass
class DsoState:
    p_gen: np.ndarray
    q_gen: np.ndarray
    p_line: np.ndarray
    q_line: np.ndarray
    v: np.ndarray

    @classmethod
    def unpack(cls, grid: DistributionNetwork, y) -> "DsoState":
        lay = DsoLayout.of(grid)
        y = np.asarray(y, dtype=float)
        return cls(y[lay.p], y[lay.q], y[lay.P], y[lay.Q], y[lay.v])

    def pack(self) -> np.ndarray:
        return np.concatenate([self.p_gen, self.q_gen, self.p_line, self.q_line, self.v])


def gen_cost(grid: DistributionNetwork, p_gen) -> float:
    p = np.asarray(p_gen, dtype=float)
    return float(np.sum(grid.array("a") * p**2 + grid.array("b") * p + grid.array("c")))


def power_balance_residual(grid: DistributionNetwork, y, ev_bus_load) -> np.ndarray:
    """g_j = net line outflow - generation + EV demand + fixed load; zero iff active balance holds."""
    s = DsoState.unpack(grid, y)
    return (grid.line_incidence @ s.p_line - grid.gen_incidence @ s.p_gen
            + np.asarray(ev_bus_load, dtype=float) + grid.array("p_load"))


def reactive_balance_residual(grid: DistributionNetwork, y) -> np.ndarray:
    s = DsoState.unpack(grid, y)
    return grid.line_incidence @ s.q_line - grid.gen_incidence @ s.q_gen + grid.array("q_load")


def voltage_drop_residual(grid: DistributionNetwork, y) -> np.ndarray:
    """v_j - v_u + 2 (R P + X Q) per line u -> j, with the kW / ohm / kV^2 scale applied."""
    s = DsoState.unpack(grid, y)
    drop = 2 * VOLTAGE_DROP_SCALE * (grid.array("r") * s.p_line + grid.array("x") * s.q_line)
    return s.v[grid.line_to] - s.v[grid.line_from] + drop


def dso_gradient(grid: DistributionNetwork, lambda_dlmp) -> np.ndarray:
    """Gradient in y of lambda^T g(t, y); constant in y because g is affine."""
    lay = DsoLayout.of(grid)
    lam = np.asarray(lambda_dlmp, dtype=float)
    out = np.zeros(lay.size)
    out[lay.p] = -lam[grid.gen_bus]
    out[lay.P] = lam[grid.line_from] - lam[grid.line_to]
    return out


def dlmp_update(lambda_k, lambda_km1, g_kp1, g_k, mu, theta) -> np.ndarray:
    """Reflected dual ascent on the balance residual; no projection (equality multiplier)."""
    if not 0 <= theta < 1 / 3:
        raise ValueError("inertia must lie in [0, 1/3)")
    return lambda_k + mu * (2 * g_kp1 - g_k) + theta * (lambda_k - lambda_km1)


def station_prices(lambda_dlmp, station_bus) -> np.ndarray:
    """Energy price at each station = DLMP of the bus it is attached to."""
    return np.asarray(lambda_dlmp, dtype=float)[np.asarray(station_bus, dtype=int)]


class DsoModel:
    """Constraint data of Y in the form used by the separable QP solver."""

    def __init__(self, grid: DistributionNetwork):
        self.grid = grid
        lay = self.layout = DsoLayout.of(grid)
        H, L, N = lay.H, lay.L, lay.N
        A = np.zeros((N + L, lay.size))
        b = np.zeros(N + L)
        # reactive balance
        A[:N, lay.Q] = grid.line_incidence
        A[:N, lay.q] = -grid.gen_incidence
        b[:N] = -grid.array("q_load")
        # voltage drop
        rows = N + np.arange(L)
        A[rows, lay.v.start + grid.line_to] += 1.0
        A[rows, lay.v.start + grid.line_from] -= 1.0
        A[rows, lay.P.start + np.arange(L)] = 2 * VOLTAGE_DROP_SCALE * grid.array("r")
        A[rows, lay.Q.start + np.arange(L)] = 2 * VOLTAGE_DROP_SCALE * grid.array("x")
        self.A, self.b = A, b

        lo = np.full(lay.size, -np.inf)
        hi = np.full(lay.size, np.inf)
        lo[lay.p], hi[lay.p] = grid.array("p_min"), grid.array("p_max")
        lo[lay.q], hi[lay.q] = grid.array("q_min"), grid.array("q_max")
        lo[lay.v], hi[lay.v] = grid.array("v_min"), grid.array("v_max")
        lo[lay.v.start + grid.substation] = hi[lay.v.start + grid.substation] = grid.v_substation
        self.lo, self.hi = lo, hi
        s_max = grid.array("s_max")
        limited = np.flatnonzero(np.isfinite(s_max))
        self.pairs = np.stack([lay.P.start + limited, lay.Q.start + limited], axis=1)
        self.radius = s_max[limited]
        self.a = grid.array("a")
        self.bcost = grid.array("b")
        self.nu = None
        self.check_structure()

    def check_structure(self) -> None:
        g = self.grid
        sub = g.buses[g.substation]
        if not sub.v_min <= g.v_substation <= sub.v_max:
            raise InfeasibleFeeder(f"substation voltage {g.v_substation} outside bus {sub.id} bounds")
        if g.n_gens == 0 and np.any(g.array("q_load") != 0):
            raise InfeasibleFeeder("reactive load with no generator to serve it")
        if g.n_gens:
            q_load = g.array("q_load").sum()
            if not g.array("q_min").sum() <= q_load <= g.array("q_max").sum():
                raise InfeasibleFeeder(f"reactive load {q_load:g} outside the generators' total range")

    def prox(self, tau0: float, target, warm: bool = True, tol: float = 1e-10) -> np.ndarray:
        """argmin_{y in Y} J_0(y) + ||y - target||^2 / (2 tau0)."""
        if not tau0 > 0:
            raise ValueError("tau0 must be positive")
        lay = self.layout
        w = np.full(lay.size, 1 / tau0)
        c = np.asarray(target, dtype=float).copy()
        w[lay.p] = 2 * self.a + 1 / tau0
        c[lay.p] = (c[lay.p] / tau0 - self.bcost) / w[lay.p]
        try:
            res = solve_separable_qp(self.A, self.b, w, c, self.lo, self.hi, self.pairs, self.radius,
                                     nu0=self.nu if warm else None, tol=tol, max_iter=400)
        except QPFailure as exc:
            raise InfeasibleFeeder(f"DSO projection failed: {exc}") from exc
        if warm:
            self.nu = res.nu
        return res.z

    def project(self, point, tol: float = 1e-10) -> np.ndarray:
        """Euclidean projection onto Y."""
        res = solve_separable_qp(self.A, self.b, np.ones(self.layout.size), point, self.lo, self.hi,
                                 self.pairs, self.radius, tol=tol, max_iter=400)
        return res.z

    def load_flow(self, ev_bus_load=None) -> np.ndarray:
        """Merit-order dispatch with tree flows and LinDistFlow voltages, then projected onto Y."""
        g, lay = self.grid, self.layout
        p_load = g.array("p_load") + (0 if ev_bus_load is None else ev_bus_load)
        q_load = g.array("q_load")
        p = np.clip(np.zeros(lay.H), g.array("p_min"), None)
        need = p_load.sum() - p.sum()
        for h in np.argsort(self.bcost, kind="stable"):
            room = min(g.generators[h].p_max, 1e12) - p[h]
            take = min(max(need, 0.0), room)
            p[h] += take
            need -= take
        qspan = g.array("q_max") - g.array("q_min")
        share = qspan / qspan.sum() if lay.H and qspan.sum() > 0 else np.zeros(lay.H)
        q = np.clip(g.array("q_min") + share * (q_load.sum() - g.array("q_min").sum()),
                    g.array("q_min"), g.array("q_max")) if lay.H else np.zeros(0)
        inc = g.line_incidence
        P = np.linalg.lstsq(inc, g.gen_incidence @ p - p_load, rcond=None)[0] if lay.L else np.zeros(0)
        Q = np.linalg.lstsq(inc, g.gen_incidence @ q - q_load, rcond=None)[0] if lay.L else np.zeros(0)
        v = np.full(lay.N, g.v_substation)
        y = np.concatenate([p, q, P, Q, v])
        # voltages follow the drop equations outward from the substation
        order = _tree_order(g)
        for j_from, j_to, k in order:
            s = DsoState.unpack(g, y)
            drop = 2 * VOLTAGE_DROP_SCALE * (g.lines[k].r * s.p_line[k] + g.lines[k].x * s.q_line[k])
            if j_from >= 0:
                y[lay.v.start + j_to] = y[lay.v.start + j_from] - drop
        return self.project(y)


def _tree_order(grid: DistributionNetwork):
    """(from, to, line) triples in BFS order from the substation along line orientation."""
    adj = [[] for _ in range(grid.n_buses)]
    for k, (u, v) in enumerate(zip(grid.line_from, grid.line_to)):
        adj[u].append((v, k))
        adj[v].append((u, k))
    out, seen, stack = [], {grid.substation}, [grid.substation]
    while stack:
        u = stack.pop(0)
        for v, k in adj[u]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
                if grid.line_from[k] == u:
                    out.append((u, v, k))
                else:
                    out.append((-1, v, k))  # reversed line: leave to projection
    return out
