"""Inertial forward-reflected-backward driver for the EV / DSO / operator game.

One round, with every player reading the (k, k-1) snapshot only:

1. each EV takes a reflected pseudo-gradient step plus inertia and a prox step
   on its preference cost over its flow polytope;
2. the DSO takes a prox step on generation cost over Y, then the DLMPs move
   along the reflected power-balance residual and stations pick up their bus price;
3. the road and station operators take projected reflected dual steps.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import coordinators as co
from .dso import DsoModel, dlmp_update, dso_gradient, power_balance_residual, station_prices
from .ev import EvPopulation, PriceSignal, aggregate_gradient, aggregate_signal, price_gradient
from .network import Scenario

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Inner solver failure, tagged with the outer iteration."""


@dataclass
class SolverConfig:
    tau: float | None = None  # EV step; None -> step_scale / L
    tau_0: float | None = None  # DSO step; None -> balanced against the EV side
    mu: float | None = None  # shared dual step; None -> per-family defaults below
    mu_r: float | None = None
    mu_t: float | None = None
    mu_dlmp: float | None = None
    theta: float = 0.0
    eps_primal: float = 1e-5
    eps_dual: float = 1e-4
    eps_feas: float = 1e-4
    max_iters: int = 20000
    seed: int = 0
    lipschitz_estimate_samples: int = 8
    step_scale: float = 0.45
    dual_scale: float = 0.3
    fallback_tau: float = 1.0
    inertia_factor: float | None = None  # automatic steps are multiplied by this; None -> 1 - 3 theta
    station_price_lag: bool = False
    inner_tol: float = 1e-10

    def __post_init__(self):
        if not 0 <= self.theta < 1 / 3:
            raise ValueError("theta must lie in [0, 1/3)")
        for name in ("tau", "tau_0", "mu", "mu_r", "mu_t", "mu_dlmp"):
            v = getattr(self, name)
            if v is not None and not np.all(np.asarray(v) > 0):
                raise ValueError(f"{name} must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown solver options {sorted(unknown)}")
        return cls(**d)


@dataclass
class Iterate:
    x: np.ndarray  # (M, E + D), routes first
    y: np.ndarray
    lambda_dlmp: np.ndarray
    lambda_r: np.ndarray
    lambda_t: np.ndarray
    lambda_station: np.ndarray

    def copy(self) -> "Iterate":
        return Iterate(*(np.array(v, copy=True) for v in asdict(self).values()))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.x.ravel(), self.y, self.lambda_dlmp, self.lambda_r, self.lambda_t])

    def max_change(self, other: "Iterate") -> float:
        d = self.flat() - other.flat()
        return float(np.max(np.abs(d))) if d.size else 0.0


@dataclass
class SystemState:
    current: Iterate
    previous: Iterate

    @property
    def x(self):
        return self.current.x

    @property
    def y(self):
        return self.current.y


@dataclass
class Steps:
    tau: np.ndarray
    tau_0: float
    mu_r: float
    mu_t: float
    mu_dlmp: float
    lipschitz: float


@dataclass
class ConvergenceReport:
    converged: bool
    change: float
    violation: float
    cs_gap: float
    worst: str  # entity with the largest violation

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class Trace:
    header: list[str]
    rows: list[list[float]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        k = self.header.index(name)
        return np.array([r[k] for r in self.rows])


@dataclass
class EquilibriumResult:
    state: SystemState
    iterations: int
    converged: bool
    natural_residual: float
    report: ConvergenceReport
    violations: dict
    trace: Trace
    steps: Steps
    saturated_generators: list[int]
    seconds: float


# ---------------------------------------------------------------------------
# quantities shared by the driver, the stopping rule and the oracles

def split_x(sc: Scenario, x):
    E = sc.transport.n_edges
    return x[:, :E], x[:, E:]


def aggregates(sc: Scenario, x):
    """(sigma, phi, ev load per bus) of a collective strategy."""
    r, t = split_x(sc, x)
    sigma = co.aggregate_link_flow(sc.transport.background, r)
    phi = co.station_energy_demand(t, sc.ev_arrays["demand"])
    return sigma, phi, sc.station_incidence @ phi


def coupling_violations(sc: Scenario, it: Iterate) -> dict:
    """Signed slack of every coupling constraint (positive = violated)."""
    sigma, phi, bus_load = aggregates(sc, it.x)
    g = power_balance_residual(sc.grid, it.y, bus_load)
    return {"road": sigma - sc.transport.cap, "station": phi - sc.station_cap, "balance": g,
            "sigma": sigma, "phi": phi}


def check_convergence(state: SystemState, prev: Iterate | None, sc: Scenario,
                      cfg: SolverConfig) -> ConvergenceReport:
    """Three-part stopping rule: small step, coupling feasibility, complementary slackness."""
    cur = state.current
    prev = state.previous if prev is None else prev
    change = cur.max_change(prev)
    v = coupling_violations(sc, cur)
    cands = []
    finite_r = np.isfinite(sc.transport.cap)
    finite_t = np.isfinite(sc.station_cap)
    if v["road"].size:
        k = int(np.argmax(np.where(finite_r, v["road"], -np.inf)))
        cands.append((v["road"][k] if finite_r[k] else -np.inf, f"road edge {sc.transport.edges[k].id}"))
    if v["station"].size:
        k = int(np.argmax(np.where(finite_t, v["station"], -np.inf)))
        cands.append((v["station"][k] if finite_t[k] else -np.inf, f"station {sc.stations[k].id}"))
    k = int(np.argmax(np.abs(v["balance"])))
    cands.append((abs(v["balance"][k]), f"bus {sc.grid.buses[k].id} balance"))
    violation, worst = max(cands, key=lambda c: c[0])
    violation = max(violation, 0.0)
    slack_r = np.where(finite_r, sc.transport.cap - v["sigma"], 0.0)
    slack_t = np.where(finite_t, sc.station_cap - v["phi"], 0.0)
    cs = np.concatenate([np.abs(cur.lambda_r * slack_r), np.abs(cur.lambda_t * slack_t)])
    cs_gap = float(cs.max()) if cs.size else 0.0
    ok = change <= cfg.eps_primal and violation <= cfg.eps_feas and cs_gap <= cfg.eps_dual
    return ConvergenceReport(bool(ok), change, float(violation), cs_gap, worst)


# ---------------------------------------------------------------------------
# step sizes

def operator_lipschitz(op, points, seed: int = 0, power_steps: int = 30, eps: float = 1e-4) -> float:
    """Lower estimate of the Lipschitz constant of ``op`` from sampled pairs plus power-iteration refinement.

    Random pairs give ratios ||op(a) - op(b)|| / ||a - b||; from the best pair the
    direction is refined by repeated finite-difference Jacobian products, which
    recovers the spectral norm exactly for affine maps.
    """
    rng = np.random.default_rng(seed)
    pts = [np.asarray(p, dtype=float) for p in points]
    best, best_pt = 0.0, pts[0]
    vals = [op(p) for p in pts]
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            d = np.linalg.norm(pts[i] - pts[j])
            if d > 0:
                ratio = np.linalg.norm(vals[i] - vals[j]) / d
                if ratio > best:
                    best, best_pt = ratio, pts[i]
    base = op(best_pt)
    v = rng.standard_normal(best_pt.shape)
    v /= np.linalg.norm(v)
    for _ in range(power_steps):
        jv = (op(best_pt + eps * v) - base) / eps
        n = np.linalg.norm(jv)
        if n == 0:
            break
        best = max(best, n)
        # J^T J v via a second product is unavailable for black boxes; the symmetric
        # part dominates here, so iterate on J v directly
        v = jv / n
    return float(best)


def estimate_lipschitz(sc: Scenario, samples: int = 8, seed: int = 0) -> float:
    """Lipschitz estimate of the EV pseudo-gradient part [omega_i l(sigma); psi(delta)] over sampled feasible points."""
    if sc.n_evs == 0:
        return 0.0
    pop = EvPopulation(sc)
    rng = np.random.default_rng(seed)
    omega = sc.ev_arrays["omega"]
    shape = (sc.n_evs, pop.E + pop.D)

    def op(flat):
        x = flat.reshape(shape)
        r, t = split_x(sc, x)
        return aggregate_gradient(omega, aggregate_signal(sc, r, t)).ravel()

    pts = [pop.project(rng.uniform(0, 1, shape)).ravel() for _ in range(max(samples, 2))]
    return operator_lipschitz(op, pts, seed=seed)


def dual_norms(sc: Scenario, tau: np.ndarray, tau_0: float) -> tuple[float, float, float]:
    """||K_f T^(1/2)||^2 for the road, station and balance multiplier families."""
    q = sc.ev_arrays["demand"]
    road = float(np.sum(tau)) if sc.n_evs else 0.0
    station = float(np.sum(tau * q**2)) if sc.n_evs else 0.0
    g = sc.grid
    KK = tau_0 * (g.line_incidence @ g.line_incidence.T + g.gen_incidence @ g.gen_incidence.T)
    S = sc.station_incidence
    KK = KK + station * (S @ S.T)
    bal = float(np.linalg.eigvalsh(KK).max()) if KK.size else 0.0
    return road, station, bal


def choose_steps(sc: Scenario, cfg: SolverConfig) -> Steps:
    """Automatic steps: tau = s / L, tau_0 balanced, mu_f = s_dual / ||K_f T^(1/2)||^2, all shrunk for inertia."""
    shrink = (1 - 3 * cfg.theta) if cfg.inertia_factor is None else cfg.inertia_factor
    if cfg.tau is None:
        L = estimate_lipschitz(sc, cfg.lipschitz_estimate_samples, cfg.seed)
        tau = shrink * cfg.step_scale / L if L > 0 else cfg.fallback_tau
    else:
        L = float("nan")
        tau = cfg.tau
    tau = np.broadcast_to(np.asarray(tau, dtype=float), (sc.n_evs,)).copy()
    if cfg.tau_0 is not None:
        tau_0 = float(cfg.tau_0)
    else:
        # match the DSO's share of the balance coupling to the EVs' share
        q = sc.ev_arrays["demand"]
        ev_side = float(np.sum(tau * q**2)) if sc.n_evs else 0.0
        tau_0 = max(ev_side, 1.0) if sc.n_evs else 1e4
    road, station, bal = dual_norms(sc, tau, tau_0)

    def pick(override, norm):
        if override is not None:
            return float(override)
        if cfg.mu is not None:
            return float(cfg.mu)
        return shrink * cfg.dual_scale / norm if norm > 0 else 1.0

    return Steps(tau, tau_0, pick(cfg.mu_r, road), pick(cfg.mu_t, station), pick(cfg.mu_dlmp, bal), L)


# ---------------------------------------------------------------------------

def trace_header(sc: Scenario) -> list[str]:
    cols = ["iter"]
    cols += [f"p_gen_{h.id}" for h in sc.grid.generators]
    cols += [f"dlmp_station_{s.id}" for s in sc.stations]
    cols += [f"demand_station_{s.id}" for s in sc.stations]
    cols += [f"surcharge_station_{s.id}" for s in sc.stations]
    cols += [f"toll_edge_{e.id}" for e in sc.transport.edges if np.isfinite(e.cap)]
    cols += ["change", "violation", "cs_gap"]
    return cols


def _trace_row(sc: Scenario, k: int, it: Iterate, phi, rep: ConvergenceReport) -> list[float]:
    lay_p = slice(0, sc.grid.n_gens)
    finite = np.isfinite(sc.transport.cap)
    return ([float(k)] + it.y[lay_p].tolist() + it.lambda_station.tolist() + phi.tolist()
            + it.lambda_t.tolist() + it.lambda_r[finite].tolist()
            + [rep.change, rep.violation, rep.cs_gap])


def initial_state(sc: Scenario, pop: EvPopulation, dso: DsoModel) -> SystemState:
    """Preference projection for the EVs, a zero-EV load flow for the DSO, zero prices."""
    M = sc.n_evs
    pref = pop.pref if M else np.zeros((0, pop.E + pop.D))
    x = pop.project(pref) if M else pref
    y = dso.load_flow()
    N, E, D = sc.grid.n_buses, sc.transport.n_edges, sc.n_stations
    it = Iterate(x, y, np.zeros(N), np.zeros(E), np.zeros(D), np.zeros(D))
    return SystemState(it, it.copy())


def _score(rep: ConvergenceReport, cfg: SolverConfig) -> float:
    """Distance from the stopping rule in units of its tolerances."""
    return max(rep.change / cfg.eps_primal, rep.violation / cfg.eps_feas, rep.cs_gap / cfg.eps_dual)


def run(sc: Scenario, cfg: SolverConfig | None = None, callback=None) -> EquilibriumResult:
    """Iterate synchronous rounds until the stopping rule holds or ``max_iters`` is reached."""
    cfg = cfg or SolverConfig()
    t0 = time.perf_counter()
    pop = EvPopulation(sc)
    dso = DsoModel(sc.grid)
    steps = choose_steps(sc, cfg)
    state = initial_state(sc, pop, dso)
    q = sc.ev_arrays["demand"]
    omega = sc.ev_arrays["omega"]
    theta = cfg.theta
    grid = sc.grid
    cap_r, cap_t = sc.transport.cap, sc.station_cap
    trace = Trace(trace_header(sc))

    def field_grad(x):
        r, t = split_x(sc, x)
        return aggregate_gradient(omega, aggregate_signal(sc, r, t))

    cur, prev = state.current, state.previous
    grad_prev = grad_cur = field_grad(cur.x)
    sigma, phi, bus_load = aggregates(sc, cur.x)
    g_cur = power_balance_residual(grid, cur.y, bus_load)
    rep = check_convergence(state, None, sc, cfg)
    best = (_score(rep, cfg), state, rep, 0)
    k = 0
    for k in range(1, cfg.max_iters + 1):
        prices = PriceSignal(cur.lambda_r, cur.lambda_t, cur.lambda_station)
        # EVs
        if sc.n_evs:
            gr = 2 * grad_cur - grad_prev + price_gradient(q, prices)
            target = cur.x - steps.tau[:, None] * gr + theta * (cur.x - prev.x)
            try:
                x_new = pop.prox(steps.tau, target, tol=cfg.inner_tol)
            except Exception as exc:
                raise SolverError(f"EV prox failed at iteration {k}: {exc}") from exc
        else:
            x_new = cur.x
        # DSO
        target_y = cur.y - steps.tau_0 * dso_gradient(grid, cur.lambda_dlmp) + theta * (cur.y - prev.y)
        try:
            y_new = dso.prox(steps.tau_0, target_y, tol=cfg.inner_tol)
        except Exception as exc:
            raise SolverError(f"DSO prox failed at iteration {k}: {exc}") from exc
        sigma_new, phi_new, bus_load_new = aggregates(sc, x_new)
        g_new = power_balance_residual(grid, y_new, bus_load_new)
        lam_new = dlmp_update(cur.lambda_dlmp, prev.lambda_dlmp, g_new, g_cur, steps.mu_dlmp, theta)
        lam_station = station_prices(cur.lambda_dlmp if cfg.station_price_lag else lam_new, sc.station_bus)
        # road and station operators
        lam_r = co.tno_update(cur.lambda_r, prev.lambda_r, sigma_new, sigma, cap_r, steps.mu_r, theta)
        lam_t = co.cso_update(cur.lambda_t, prev.lambda_t, phi_new, phi, cap_t, steps.mu_t, theta)

        new = Iterate(x_new, y_new, lam_new, lam_r, lam_t, lam_station)
        prev, cur = cur, new
        state = SystemState(cur, prev)
        grad_prev, grad_cur = grad_cur, field_grad(x_new)
        sigma, phi, g_cur = sigma_new, phi_new, g_new
        rep = check_convergence(state, None, sc, cfg)
        trace.rows.append(_trace_row(sc, k, cur, phi, rep))
        if callback is not None:
            callback(k, state, rep)
        if rep.converged:
            break
        score = _score(rep, cfg)
        if score < best[0]:
            best = (score, state, rep, k)

    converged = rep.converged
    if not converged:
        # iterates are fresh arrays every round, so holding a reference is enough
        _, state, rep, kb = best
        cur = state.current
        log.warning("no convergence after %d iterations; returning iteration %d "
                    "(change %.2e, violation %.2e at %s)", k, kb, rep.change, rep.violation, rep.worst)
    nat = natural_residual(state, sc, pop=pop, dso=dso)
    viol = coupling_violations(sc, cur)
    return EquilibriumResult(state, k, converged, nat, rep, viol, trace, steps,
                             saturated_generators(sc, cur.y), time.perf_counter() - t0)


def saturated_generators(sc: Scenario, y, rtol: float = 1e-6) -> list[int]:
    """Ids of generators pinned at their active-power upper limit."""
    p = y[: sc.grid.n_gens]
    out = []
    for h, val in zip(sc.grid.generators, p):
        if np.isfinite(h.p_max) and val >= h.p_max - rtol * max(1.0, abs(h.p_max)):
            out.append(h.id)
    return out


def extended_operator(sc: Scenario, it: Iterate) -> Iterate:
    """T(z) for z = (x, y, lambda): Lagrangian gradients in (x, y) and minus the constraint residuals in lambda."""
    ev = sc.ev_arrays
    r, t = split_x(sc, it.x)
    pref = np.concatenate([ev["alpha"][:, None] * (r - ev["pref_route"]),
                           ev["beta"][:, None] * (t - ev["pref_station"])], axis=1)
    prices = PriceSignal(it.lambda_r, it.lambda_t, station_prices(it.lambda_dlmp, sc.station_bus))
    tx = pref + aggregate_gradient(ev["omega"], aggregate_signal(sc, r, t)) + price_gradient(ev["demand"], prices)
    g = sc.grid
    ty = dso_gradient(g, it.lambda_dlmp)
    ty[: g.n_gens] += 2 * g.array("a") * it.y[: g.n_gens] + g.array("b")
    v = coupling_violations(sc, it)
    road = np.where(np.isfinite(sc.transport.cap), v["road"], -1.0)
    station = np.where(np.isfinite(sc.station_cap), v["station"], -1.0)
    return Iterate(tx.reshape(it.x.shape), ty, -v["balance"], -road, -station, prices.lambda_station)


def natural_residual(state: SystemState | Iterate, sc: Scenario, pop: EvPopulation | None = None,
                     dso: DsoModel | None = None) -> float:
    """||z - proj_Z(z - T(z))||_2 with unit step."""
    it = state.current if isinstance(state, SystemState) else state
    pop = pop or EvPopulation(sc)
    dso = dso or DsoModel(sc.grid)
    T = extended_operator(sc, it)
    parts = []
    if sc.n_evs:
        parts.append((it.x - pop.project(it.x - T.x)).ravel())
    parts.append(it.y - dso.project(it.y - T.y))
    parts.append(T.lambda_dlmp)  # lambda_dlmp is free: proj is the identity
    parts.append(it.lambda_r - np.maximum(it.lambda_r - T.lambda_r, 0.0))
    parts.append(it.lambda_t - np.maximum(it.lambda_t - T.lambda_t, 0.0))
    return float(np.linalg.norm(np.concatenate(parts)))


def with_config(sc: Scenario, **overrides) -> SolverConfig:
    """Scenario solver defaults with keyword overrides applied."""
    base = SolverConfig.from_dict(dict(sc.solver))
    return replace(base, **{k: v for k, v in overrides.items() if v is not None})
