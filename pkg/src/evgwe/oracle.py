"""Independent checks: a dense QP oracle, an extragradient reference solver,
a monotonicity probe and a KKT auditor.

Nothing here calls the driver's prox steps. Constraint data and the game
operator are rebuilt directly from the scenario fields, so a modelling slip in
the main modules shows up as a disagreement instead of being copied over.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .network import VOLTAGE_DROP_SCALE, Scenario
from .qp import solve_separable_qp

MAX_ORACLE_EVS = 10
MAX_ORACLE_BUSES = 6


class OracleError(RuntimeError):
    pass


class ScaleGuardError(OracleError):
    """Instance too large for the deliberately slow reference methods."""


# ---------------------------------------------------------------------------
# dense QP oracle: primal log-barrier interior point plus active-set polish

@dataclass
class QpOracleResult:
    z: np.ndarray
    nu: np.ndarray
    kkt_residual: float
    newton_steps: int
    polished: bool


def _as_problem(P, q, A, b, lo, hi):
    q = np.asarray(q, dtype=float)
    n = q.size
    P = np.asarray(P, dtype=float)
    P = np.diag(P) if P.ndim == 1 else P
    A = np.zeros((0, n)) if A is None else np.atleast_2d(np.asarray(A, dtype=float))
    b = np.zeros(0) if b is None else np.asarray(b, dtype=float)
    lo = np.full(n, -np.inf) if lo is None else np.asarray(lo, dtype=float)
    hi = np.full(n, np.inf) if hi is None else np.asarray(hi, dtype=float)
    return P, q, A, b, lo, hi


def qp_oracle(P, q, A=None, b=None, lo=None, hi=None, pairs=None, radius=None,
              t_max: float = 1e12, tol: float = 1e-9) -> QpOracleResult:
    """minimize 1/2 z'Pz + q'z  s.t.  Az = b, lo <= z <= hi, ||z[pair]|| <= radius.

    Log-barrier method: a phase I search for a strictly interior point on the
    affine set, then feasible-start Newton centring with t growing twentyfold up
    to t_max; when no disc is active the final active set is polished with one exact
    equality-constrained solve and accepted if its multipliers have the right signs.
    """
    P, q, A, b, lo, hi = _as_problem(P, q, A, b, lo, hi)
    n, m = q.size, A.shape[0]
    pairs = np.zeros((0, 2), dtype=int) if pairs is None else np.asarray(pairs, dtype=int).reshape(-1, 2)
    radius = np.zeros(0) if radius is None else np.asarray(radius, dtype=float).reshape(-1)
    if np.any(lo > hi):
        raise OracleError("empty box")
    fl, fh = np.isfinite(lo), np.isfinite(hi)
    fixed = fl & fh & (hi - lo <= 1e-14 * (1 + np.abs(lo)))
    # fixed entries are substituted out so the barrier stays well defined
    if fixed.any():
        keep = ~fixed
        zf = lo[fixed]
        if np.any(np.isin(pairs, np.flatnonzero(fixed))):
            raise OracleError("disc coordinates cannot be fixed")
        remap = -np.ones(n, dtype=int)
        remap[keep] = np.arange(keep.sum())
        sub = qp_oracle(P[np.ix_(keep, keep)], q[keep] + P[np.ix_(keep, fixed)] @ zf,
                        A[:, keep], b - A[:, fixed] @ zf, lo[keep], hi[keep],
                        remap[pairs] if len(pairs) else None, radius if len(pairs) else None,
                        t_max=t_max, tol=tol)
        z = np.empty(n)
        z[keep], z[fixed] = sub.z, zf
        return QpOracleResult(z, sub.nu, sub.kkt_residual, sub.newton_steps, sub.polished)

    n_ineq = int(fl.sum() + fh.sum()) + len(pairs)
    c = np.zeros(n)
    c[fl], c[fh] = lo[fl] + 1.0, hi[fh] - 1.0
    both = fl & fh
    c[both] = 0.5 * (lo[both] + hi[both])
    # nearest point to the box centres on the affine set, then phase I if it is not interior
    z = c + (np.linalg.lstsq(A, b - A @ c, rcond=None)[0] if m else 0.0)
    if m and np.max(np.abs(A @ z - b)) > 1e-8 * (1 + np.max(np.abs(b))):
        raise OracleError("equality constraints are inconsistent")
    steps = 0
    if n_ineq and np.max(_slacks(z, lo, hi, fl, fh, pairs, radius)) >= 0:
        z, steps = _phase_one(z, A, lo, hi, fl, fh, pairs, radius)

    nu = np.zeros(m)
    t = 1.0 / max(1.0, np.max(np.abs(q)), np.max(np.abs(P)))
    while True:
        z, w, k = _centre(z, A, lambda zz, t=t: _barrier_problem(P, q, zz, t, lo, hi, fl, fh, pairs, radius))
        steps += k
        nu = w / t
        if n_ineq == 0 or n_ineq / t <= tol * 1e-3 or t >= t_max:
            break
        t = min(20 * t, t_max)

    res = _kkt_residual(P, q, A, b, lo, hi, pairs, radius, z, nu)
    on_disc = np.array([r - math.hypot(z[i], z[j]) <= 1e-6 * (1 + r) for (i, j), r in zip(pairs, radius)], dtype=bool)
    pol = (_polish_with_discs(P, q, A, b, lo, hi, z, nu, pairs, radius, on_disc) if on_disc.any()
           else _polish_active_set(P, q, A, b, lo, hi, z, pairs, radius))
    if pol is not None:
        zp, nup = pol
        rp = _kkt_residual(P, q, A, b, lo, hi, pairs, radius, zp, nup)
        if rp <= res or rp <= tol:
            return QpOracleResult(zp, nup, rp, steps, True)
    return QpOracleResult(z, nu, res, steps, False)


def _slacks(z, lo, hi, fl, fh, pairs, radius) -> np.ndarray:
    """Inequalities g(z) <= 0: box sides, then discs scaled to length units."""
    parts = [lo[fl] - z[fl], z[fh] - hi[fh]]
    if len(pairs):
        parts.append((z[pairs[:, 0]] ** 2 + z[pairs[:, 1]] ** 2 - radius**2) / (2 * radius))
    return np.concatenate(parts)


def _log_barrier(z, lo, hi, fl, fh, pairs, radius):
    """-sum log(-g(z)) with its gradient and Hessian; inf outside the interior."""
    n = z.size
    g, H = np.zeros(n), np.zeros((n, n))
    sl, sh = z[fl] - lo[fl], hi[fh] - z[fh]
    if np.any(sl <= 0) or np.any(sh <= 0):
        return np.inf, g, H
    val = -np.sum(np.log(sl)) - np.sum(np.log(sh))
    g[fl] -= 1 / sl
    g[fh] += 1 / sh
    H[np.flatnonzero(fl), np.flatnonzero(fl)] += 1 / sl**2
    H[np.flatnonzero(fh), np.flatnonzero(fh)] += 1 / sh**2
    for (i, j), r in zip(pairs, radius):
        s = r**2 - z[i] ** 2 - z[j] ** 2
        if s <= 0:
            return np.inf, g, H
        v = np.array([z[i], z[j]])
        idx = np.array([i, j])
        val -= math.log(s)
        g[idx] += 2 * v / s
        H[np.ix_(idx, idx)] += 2 * np.eye(2) / s + 4 * np.outer(v, v) / s**2
    return val, g, H


def _barrier_problem(P, q, z, t, lo, hi, fl, fh, pairs, radius):
    val, g, H = _log_barrier(z, lo, hi, fl, fh, pairs, radius)
    return t * (0.5 * z @ P @ z + q @ z) + val, t * (P @ z + q) + g, t * P + H


def _centre(z, A, problem, max_steps: int = 200):
    """Feasible-start damped Newton on an equality-constrained smooth problem."""
    n, m = z.size, A.shape[0]
    w = np.zeros(m)
    for k in range(1, max_steps + 1):
        val, g, H = problem(z)
        K = np.block([[H, A.T], [A, np.zeros((m, m))]])
        try:
            sol = np.linalg.solve(K, np.concatenate([-g, np.zeros(m)]))
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(K, np.concatenate([-g, np.zeros(m)]), rcond=None)[0]
        dz, w = sol[:n], sol[n:]
        dec = -g @ dz  # squared Newton decrement
        if dec <= 1e-14 * (1 + abs(val)):
            return z, w, k
        s = 1.0
        while s > 1e-14:
            new = problem(z + s * dz)[0]
            if new <= val - 0.25 * s * dec:
                break
            s *= 0.5
        else:
            return z, w, k  # no further progress at machine precision
        z = z + s * dz
    return z, w, max_steps


def _phase_one(z, A, lo, hi, fl, fh, pairs, radius):
    """Strictly interior point of the inequalities on {Az = b}: minimise s with g(z) <= s."""
    n = z.size
    Ae = np.hstack([A, np.zeros((A.shape[0], 1))])
    u = np.r_[z, np.max(_slacks(z, lo, hi, fl, fh, pairs, radius)) + 1.0]
    scale = 1 + np.max(np.abs(z))

    def problem(uu, t):
        zz, sv = uu[:n], uu[n]
        gvec = _slacks(zz, lo, hi, fl, fh, pairs, radius)
        slack = sv - gvec
        grad, H = np.zeros(n + 1), np.zeros((n + 1, n + 1))
        if np.any(slack <= 0):
            return np.inf, grad, H
        # Jacobian of g, one row per inequality
        J = np.zeros((gvec.size, n))
        k = 0
        for idx, sign in ((np.flatnonzero(fl), -1.0), (np.flatnonzero(fh), 1.0)):
            J[np.arange(k, k + idx.size), idx] = sign
            k += idx.size
        curv = np.zeros((gvec.size, 2, 2))
        pair_rows = np.arange(k, k + len(pairs))
        for row, (i, j), r in zip(pair_rows, pairs, radius):
            J[row, [i, j]] = np.array([uu[i], uu[j]]) / r
            curv[row] = np.eye(2) / r
        Jf = np.hstack([-J, np.ones((gvec.size, 1))])  # gradient of slack
        val = t * sv - np.sum(np.log(slack))
        grad = -Jf.T @ (1 / slack)
        grad[n] += t
        H = Jf.T @ (Jf / slack[:, None] ** 2)
        for row, (i, j) in zip(pair_rows, pairs):
            H[np.ix_([i, j], [i, j])] += curv[row] / slack[row]
        return val, grad, H

    t, steps = 1.0 / scale, 0
    for _ in range(60):
        u, _, k = _centre(u, Ae, lambda uu, t=t: problem(uu, t))
        steps += k
        if u[n] < -1e-9 * scale:
            return u[:n], steps
        if (gvec := _slacks(u[:n], lo, hi, fl, fh, pairs, radius)).size and np.max(gvec) < 0:
            return u[:n], steps
        t *= 10
    raise OracleError("no strictly feasible point: the constraint set has empty interior")


def _kkt_residual(P, q, A, b, lo, hi, pairs, radius, z, nu) -> float:
    """Projected-gradient residual ||z - proj_box(z - (Pz + q + A'nu))|| plus equality residual.

    Disc pairs are handled by projecting the pair onto its disc.
    """
    gz = P @ z + q + A.T @ nu
    u = z - gz
    proj = np.clip(u, lo, hi)
    for (i, j), r in zip(pairs, radius):
        v = u[[i, j]]
        nv = np.linalg.norm(v)
        proj[[i, j]] = v if nv <= r else v * r / nv
    eq = np.max(np.abs(A @ z - b)) if A.shape[0] else 0.0
    return float(max(np.max(np.abs(z - proj)) if z.size else 0.0, eq))


def _solve_fixed(P, q, A, b, free, zfix):
    """Equality-constrained QP in the free entries with the rest fixed at zfix."""
    n = q.size
    F = np.flatnonzero(free)
    C = np.flatnonzero(~free)
    m = A.shape[0]
    qF = q[F] + P[np.ix_(F, C)] @ zfix[C]
    K = np.block([[P[np.ix_(F, F)], A[:, F].T], [A[:, F], np.zeros((m, m))]])
    rhs = np.concatenate([-qF, b - A[:, C] @ zfix[C]])
    sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
    z = zfix.copy()
    z[F] = sol[: F.size]
    nu = sol[F.size:]
    if np.max(np.abs(K @ sol - rhs), initial=0.0) > 1e-9 * (1 + np.max(np.abs(rhs), initial=0.0)):
        return None
    return z, nu


def _polish_active_set(P, q, A, b, lo, hi, z, pairs, radius, band=1e-7):
    at_lo = np.isfinite(lo) & (z - lo <= band * (1 + np.abs(lo)))
    at_hi = np.isfinite(hi) & (hi - z <= band * (1 + np.abs(hi))) & ~at_lo
    return _check_assignment(P, q, A, b, lo, hi, at_lo, at_hi, pairs, radius)


def _polish_with_discs(P, q, A, b, lo, hi, z, nu, pairs, radius, on_disc, band=1e-7, tol=1e-10):
    """Newton on the KKT system with the barrier's active bounds fixed and its active discs as equalities.

    Unknowns are the free entries, the equality multipliers and one multiplier eta
    per active disc (stationarity carries 2 eta z_pair). Accepted only if the
    result is feasible and every multiplier has the right sign.
    """
    n, m = q.size, A.shape[0]
    at_lo = np.isfinite(lo) & (z - lo <= band * (1 + np.abs(lo)))
    at_hi = np.isfinite(hi) & (hi - z <= band * (1 + np.abs(hi))) & ~at_lo
    free = ~(at_lo | at_hi)
    z = np.where(at_lo, lo, np.where(at_hi, hi, z))
    act = pairs[on_disc]
    rad = radius[on_disc]
    if np.any(~free[act.ravel()]):
        return None
    F = np.flatnonzero(free)
    nf, k = F.size, len(act)
    # initial disc multipliers by least squares on the stationarity rows
    G = np.zeros((k, n))
    for row, (i, j) in enumerate(act):
        G[row, [i, j]] = 2 * z[[i, j]]
    base = P @ z + q
    eta_nu = np.linalg.lstsq(np.hstack([A.T, G.T])[F], -base[F], rcond=None)[0]
    nu, eta = eta_nu[:m], eta_nu[m:]
    for _ in range(50):
        G = np.zeros((k, n))
        for row, (i, j) in enumerate(act):
            G[row, [i, j]] = 2 * z[[i, j]]
        stat = (P @ z + q + A.T @ nu + G.T @ eta)[F]
        prim = A @ z - b
        disc = z[act[:, 0]] ** 2 + z[act[:, 1]] ** 2 - rad**2
        r = np.concatenate([stat, prim, disc])
        if np.max(np.abs(r)) <= 1e-13 * (1 + np.max(np.abs(base))):
            break
        Hl = P.copy()
        for (i, j), e in zip(act, eta):
            Hl[i, i] += 2 * e
            Hl[j, j] += 2 * e
        K = np.block([[Hl[np.ix_(F, F)], A[:, F].T, G[:, F].T],
                      [A[:, F], np.zeros((m, m + k))],
                      [G[:, F], np.zeros((k, m + k))]])
        try:
            d = np.linalg.solve(K, -r)
        except np.linalg.LinAlgError:
            return None
        z = z.copy()
        z[F] += d[:nf]
        nu, eta = nu + d[nf:nf + m], eta + d[nf + m:]
    else:
        return None
    scale = 1 + np.abs(z)
    if np.any(z[free] < lo[free] - tol * scale[free]) or np.any(z[free] > hi[free] + tol * scale[free]):
        return None
    if np.any(eta < -tol * (1 + np.max(np.abs(eta), initial=0.0))):
        return None
    rest = ~on_disc
    if np.any(np.hypot(z[pairs[rest, 0]], z[pairs[rest, 1]]) > radius[rest] * (1 + 1e-12)):
        return None
    mult = P @ z + q + A.T @ nu
    gscale = 1 + np.max(np.abs(mult), initial=0.0)
    if np.any(mult[at_lo] < -tol * gscale) or np.any(mult[at_hi] > tol * gscale):
        return None
    return np.clip(z, lo, hi), nu


def _check_assignment(P, q, A, b, lo, hi, at_lo, at_hi, pairs=None, radius=None, tol=1e-10):
    free = ~(at_lo | at_hi)
    zfix = np.where(at_lo, lo, np.where(at_hi, hi, 0.0))
    out = _solve_fixed(P, q, A, b, free, zfix)
    if out is None:
        return None
    zz, nu = out
    scale = 1 + np.abs(zz)
    if np.any(zz[free] < lo[free] - tol * scale[free]) or np.any(zz[free] > hi[free] + tol * scale[free]):
        return None
    if pairs is not None:
        for (i, j), r in zip(pairs, radius):
            if zz[i] ** 2 + zz[j] ** 2 > r**2 * (1 + 1e-12):
                return None
    mult = P @ zz + q + A.T @ nu  # bound multipliers: >= 0 at lower, <= 0 at upper
    gscale = 1 + np.max(np.abs(mult), initial=0.0)
    if np.any(mult[at_lo] < -tol * gscale) or np.any(mult[at_hi] > tol * gscale):
        return None
    return np.clip(zz, lo, hi), nu


def enumerate_active_sets(P, q, A, b, lo, hi) -> np.ndarray:
    """Exhaustive search over {lower, upper, free}^n for the KKT point; for small n only."""
    P, q, A, b, lo, hi = _as_problem(P, q, A, b, lo, hi)
    n = q.size
    if n > 12:
        raise ScaleGuardError("active-set enumeration is limited to 12 variables")
    choices = []
    for k in range(n):
        opts = [0]
        if np.isfinite(lo[k]):
            opts.append(1)
        if np.isfinite(hi[k]):
            opts.append(2)
        choices.append(opts)
    for combo in itertools.product(*choices):
        c = np.array(combo)
        out = _check_assignment(P, q, A, b, lo, hi, c == 1, c == 2)
        if out is not None:
            return out[0]
    raise OracleError("no KKT point found; the feasible set may be empty")


# ---------------------------------------------------------------------------
# independent model of the game

class GameModel:
    """Operator, constraint data and projections of the game, rebuilt from raw scenario fields."""

    def __init__(self, sc: Scenario):
        self.sc = sc
        tr, g = sc.transport, sc.grid
        self.E, self.D, self.M = len(tr.edges), len(sc.stations), len(sc.evs)
        self.N, self.L, self.H = len(g.buses), len(g.lines), len(g.generators)
        node = {v: k for k, v in enumerate(tr.nodes)}
        bus = {b.id: k for k, b in enumerate(g.buses)}
        V = len(tr.nodes)
        # flow rows: inflow - outflow - (arrivals at a station node) = -1 at the origin
        self.flow = np.zeros((V, self.E + self.D))
        for e, edge in enumerate(tr.edges):
            self.flow[node[edge.head], e] += 1.0
            self.flow[node[edge.tail], e] -= 1.0
        for d, st in enumerate(sc.stations):
            self.flow[node[st.node], self.E + d] -= 1.0
        self.flow_rhs = []
        self.x_hi = []
        for ev in sc.evs:
            rhs = np.zeros(V)
            rhs[node[ev.origin]] = -1.0
            self.flow_rhs.append(rhs)
            hi = np.ones(self.E + self.D)
            reach = self._reachable(node, ev.origin)
            for d, st in enumerate(sc.stations):
                if st.id not in ev.feasible or node[st.node] not in reach:
                    hi[self.E + d] = 0.0
            self.x_hi.append(hi)
        self.eta = np.array([e.eta for e in tr.edges])
        self.kappa = np.array([e.kappa for e in tr.edges])
        self.s = np.array([e.background for e in tr.edges])
        self.road_cap = np.array([e.cap for e in tr.edges])
        self.st_cap = np.array([s.cap_energy for s in sc.stations])
        self.slope = np.array([s.zeta / (s.gamma * s.chargers) for s in sc.stations])
        self.st_bus = np.array([bus[s.bus] for s in sc.stations], dtype=int)
        self.q = np.array([ev.demand for ev in sc.evs])
        self.omega = np.array([ev.omega for ev in sc.evs])
        self.alpha = np.array([ev.alpha for ev in sc.evs])
        self.beta = np.array([ev.beta for ev in sc.evs])
        self.pref = np.array([list(ev.pref_route) + list(ev.pref_station) for ev in sc.evs]).reshape(self.M, self.E + self.D)
        # y = (p, q, P, Q, v)
        H, L, N = self.H, self.L, self.N
        self.ny = 2 * H + 2 * L + N
        self.ip, self.iq = np.arange(H), H + np.arange(H)
        self.iP, self.iQ = 2 * H + np.arange(L), 2 * H + L + np.arange(L)
        self.iv = 2 * H + 2 * L + np.arange(N)
        self.gen_bus = np.array([bus[h.bus] for h in g.generators], dtype=int)
        self.a = np.array([h.a for h in g.generators])
        self.bcoef = np.array([h.b for h in g.generators])
        self.p_load = np.array([b_.p_load for b_ in g.buses])
        q_load = np.array([b_.q_load for b_ in g.buses])
        Ay = np.zeros((N + L, self.ny))
        by = np.zeros(N + L)
        for k, ln in enumerate(g.lines):
            u, j = bus[ln.from_bus], bus[ln.to_bus]
            Ay[u, self.iQ[k]] += 1.0
            Ay[j, self.iQ[k]] -= 1.0
            Ay[N + k, self.iv[j]] = 1.0
            Ay[N + k, self.iv[u]] = -1.0
            Ay[N + k, self.iP[k]] = 2 * VOLTAGE_DROP_SCALE * ln.r
            Ay[N + k, self.iQ[k]] = 2 * VOLTAGE_DROP_SCALE * ln.x
        for h, gen in enumerate(g.generators):
            Ay[bus[gen.bus], self.iq[h]] -= 1.0
        by[:N] = -q_load
        self.Ay, self.by = Ay, by
        lo, hi = np.full(self.ny, -np.inf), np.full(self.ny, np.inf)
        for h, gen in enumerate(g.generators):
            lo[self.ip[h]], hi[self.ip[h]] = gen.p_min, gen.p_max
            lo[self.iq[h]], hi[self.iq[h]] = gen.q_min, gen.q_max
        for j, b_ in enumerate(g.buses):
            lo[self.iv[j]], hi[self.iv[j]] = b_.v_min, b_.v_max
            if b_.is_substation:
                lo[self.iv[j]] = hi[self.iv[j]] = g.v_substation
        self.y_lo, self.y_hi = lo, hi
        lim = [k for k, ln in enumerate(g.lines) if math.isfinite(ln.s_max)]
        self.pairs = np.array([[self.iP[k], self.iQ[k]] for k in lim], dtype=int).reshape(-1, 2)
        self.radius = np.array([g.lines[k].s_max for k in lim])
        self.line_from = np.array([bus[ln.from_bus] for ln in g.lines], dtype=int)
        self.line_to = np.array([bus[ln.to_bus] for ln in g.lines], dtype=int)
        self.pi, self.xi = sc.bpr.pi, sc.bpr.xi
        self._nu_x = self._nu_y = None  # warm starts for the inexact projections

    def _reachable(self, node, origin):
        adj = {}
        for e in self.sc.transport.edges:
            adj.setdefault(node[e.tail], []).append(node[e.head])
        seen, stack = {node[origin]}, [node[origin]]
        while stack:
            u = stack.pop()
            for v in adj.get(u, []):
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        return seen

    # z = (x (M, E+D), y, lam_dlmp (N), lam_r (E), lam_t (D))
    def unpack(self, z):
        o = 0
        x = z[o:o + self.M * (self.E + self.D)].reshape(self.M, self.E + self.D)
        o += x.size
        y = z[o:o + self.ny]
        o += self.ny
        lam = z[o:o + self.N]
        o += self.N
        lr = z[o:o + self.E]
        o += self.E
        return x, y, lam, lr, z[o:o + self.D]

    def pack(self, x, y, lam, lr, lt):
        return np.concatenate([np.ravel(x), y, lam, lr, lt])

    def balance(self, x, y):
        phi = self.q @ x[:, self.E:] if self.M else np.zeros(self.D)
        g = np.zeros(self.N)
        np.add.at(g, self.line_from, y[self.iP])
        np.add.at(g, self.line_to, -y[self.iP])
        np.add.at(g, self.gen_bus, -y[self.ip])
        np.add.at(g, self.st_bus, phi)
        return g + self.p_load

    def game_field(self, x, y):
        """F(x, y): Wardrop pseudo-gradients (aggregate frozen) and the DSO cost gradient."""
        r, t = x[:, :self.E], x[:, self.E:]
        sigma = r.sum(axis=0) + self.s
        lat = self.eta * (1 + self.pi * (sigma / self.kappa) ** self.xi)
        psi = self.slope * t.sum(axis=0)
        fx = np.concatenate([self.alpha[:, None] * (r - self.pref[:, :self.E]) + np.outer(self.omega, lat),
                             self.beta[:, None] * (t - self.pref[:, self.E:]) + psi[None, :]], axis=1)
        fy = np.zeros(self.ny)
        fy[self.ip] = 2 * self.a * y[self.ip] + self.bcoef
        return fx, fy

    def operator(self, z):
        """Extended operator: Lagrangian gradients in (x, y), minus constraint residuals in the multipliers."""
        x, y, lam, lr, lt = self.unpack(z)
        fx, fy = self.game_field(x, y)
        lam_st = lam[self.st_bus]
        fx = fx + np.concatenate([np.broadcast_to(lr, (self.M, self.E)),
                                  np.outer(self.q, lt + lam_st)], axis=1) if self.M else fx
        fy = fy.copy()
        np.add.at(fy, self.ip, -lam[self.gen_bus])
        fy[self.iP] += lam[self.line_from] - lam[self.line_to]
        sigma = x[:, :self.E].sum(axis=0) + self.s
        phi = self.q @ x[:, self.E:] if self.M else np.zeros(self.D)
        road = np.where(np.isfinite(self.road_cap), sigma - self.road_cap, -1.0)
        st = np.where(np.isfinite(self.st_cap), phi - self.st_cap, -1.0)
        return self.pack(fx, fy, -self.balance(x, y), -road, -st)

    def project(self, z, exact: bool = False):
        """Euclidean projection onto Z; ``exact`` uses the dense QP oracle (slow)."""
        x, y, lam, lr, lt = self.unpack(z)
        xp = np.empty_like(x)
        for i in range(self.M):
            lo = np.zeros(self.E + self.D)
            if exact:
                xp[i] = qp_oracle(np.ones_like(lo), -x[i], self.flow, self.flow_rhs[i], lo, self.x_hi[i]).z
            else:
                xp[i] = solve_separable_qp(self.flow, self.flow_rhs[i], np.ones_like(lo), x[i], lo,
                                           self.x_hi[i]).z
        if exact:
            yp = qp_oracle(np.ones(self.ny), -y, self.Ay, self.by, self.y_lo, self.y_hi,
                           self.pairs, self.radius).z
        else:
            res = solve_separable_qp(self.Ay, self.by, np.ones(self.ny), y, self.y_lo, self.y_hi,
                                     self.pairs, self.radius, nu0=self._nu_y)
            yp, self._nu_y = res.z, res.nu
        return self.pack(xp, yp, lam, np.maximum(lr, 0.0), np.maximum(lt, 0.0))

    def natural_residual(self, z, exact: bool = False) -> float:
        return float(np.linalg.norm(z - self.project(z - self.operator(z), exact=exact)))

    def block_weights(self) -> np.ndarray:
        """Per-coordinate step weights: each primal block gets the inverse of its own Lipschitz
        constant, each dual block the inverse of (primal step x squared coupling norm)."""
        lx = (max(np.max(self.alpha, initial=0), np.max(self.beta, initial=0))
              + self.M * np.max(self.slope, initial=0)
              + np.max(self.omega, initial=0) * self.M * np.max(self.eta * self.pi / self.kappa, initial=0))
        x_w = 1.0 / max(lx, 1e-12)
        q2 = float(np.sum(self.q**2))
        y_w = 0.5 / (2 * np.max(self.a)) if self.H and np.max(self.a) > 0 else max(x_w * q2, 1.0)
        Ky = np.zeros((self.N, self.ny))
        np.add.at(Ky, (self.line_from, self.iP), 1.0)
        np.add.at(Ky, (self.line_to, self.iP), -1.0)
        np.add.at(Ky, (self.gen_bus, self.ip), -1.0)
        ky2 = np.linalg.norm(Ky, 2) ** 2 if Ky.size else 0.0
        per_bus = np.bincount(self.st_bus, minlength=self.N).max() if self.D else 0
        lam_w = 0.5 / max(y_w * ky2 + x_w * q2 * per_bus, 1e-12)
        return np.concatenate([np.full(self.M * (self.E + self.D), x_w), np.full(self.ny, y_w),
                               np.full(self.N, lam_w), np.full(self.E, 0.5 / max(self.M * x_w, 1e-12)),
                               np.full(self.D, 0.5 / max(x_w * q2, 1e-12))])


# ---------------------------------------------------------------------------

@dataclass
class OracleSolution:
    x: np.ndarray
    y: np.ndarray
    lambda_dlmp: np.ndarray
    lambda_r: np.ndarray
    lambda_t: np.ndarray
    iterations: int
    natural_residual: float


def extragradient_solve(sc: Scenario, tol: float = 1e-9, max_iters: int = 500000,
                        scale_guard: bool = True) -> OracleSolution:
    """Korpelevich extragradient in a block-diagonal metric with backtracking.

    Two projections per iteration and no reflection or inertia. The scale guard
    refuses instances above MAX_ORACLE_EVS EVs or MAX_ORACLE_BUSES buses.
    """
    if scale_guard and (sc.n_evs > MAX_ORACLE_EVS or sc.grid.n_buses > MAX_ORACLE_BUSES):
        raise ScaleGuardError(f"extragradient reference is limited to {MAX_ORACLE_EVS} EVs and "
                              f"{MAX_ORACLE_BUSES} buses (got {sc.n_evs}, {sc.grid.n_buses})")
    gm = GameModel(sc)
    Dw = gm.block_weights()
    M, E, D = gm.M, gm.E, gm.D
    x0 = np.array(gm.pref) if M else np.zeros((0, E + D))
    z = gm.project(gm.pack(x0, np.zeros(gm.ny), np.zeros(gm.N), np.zeros(E), np.zeros(D)))
    s = 1.0
    res = np.inf
    for k in range(1, max_iters + 1):
        Tz = gm.operator(z)
        while True:
            zb = gm.project(z - s * Dw * Tz)
            Tb = gm.operator(zb)
            lhs = s * np.linalg.norm(np.sqrt(Dw) * (Tz - Tb))
            rhs = 0.9 * np.linalg.norm((z - zb) / np.sqrt(Dw))
            if lhs <= rhs or s < 1e-12:
                break
            s *= 0.5
        z_new = gm.project(z - s * Dw * Tb)
        if lhs < 0.5 * rhs:
            s *= 1.2
        z = z_new
        if k % 25 == 0 or np.linalg.norm(z - zb) < tol * 1e-2:
            res = gm.natural_residual(z)
            if res <= tol:
                break
    else:
        raise OracleError(f"extragradient did not reach natural residual {tol:g} (at {res:.3e})")
    x, y, lam, lr, lt = gm.unpack(z)
    return OracleSolution(x.copy(), y.copy(), lam.copy(), lr.copy(), lt.copy(), k, res)


# ---------------------------------------------------------------------------

@dataclass
class ProbeReport:
    min_inner: float  # min (F(z) - F(z'))'(z - z')
    min_ratio: float  # min of the same divided by ||z - z'||^2
    pairs: int


def probe_operator(op, sampler, n_pairs: int, seed: int = 0) -> ProbeReport:
    """Monotonicity probe of a black-box operator over sampled pairs."""
    rng = np.random.default_rng(seed)
    inner, ratio = np.inf, np.inf
    for _ in range(n_pairs):
        a, b = sampler(rng), sampler(rng)
        d = a - b
        val = float(np.dot(op(a) - op(b), d))
        inner = min(inner, val)
        nd = float(np.dot(d, d))
        if nd > 0:
            ratio = min(ratio, val / nd)
    return ProbeReport(inner, ratio, n_pairs)


def monotonicity_probe(sc: Scenario, n_pairs: int = 1000, seed: int = 0) -> ProbeReport:
    """Probe F(x, y) = (Wardrop pseudo-gradients, DSO cost gradient) over random feasible pairs."""
    gm = GameModel(sc)
    M, E, D = gm.M, gm.E, gm.D
    pool = []
    rng0 = np.random.default_rng(seed + 1)
    n_pool = min(n_pairs, 64)
    for _ in range(n_pool):
        x = rng0.uniform(0, 1, (M, E + D))
        y = gm.y_lo + 0.0
        y = np.where(np.isfinite(y), y, 0.0) + rng0.normal(0, 100, gm.ny)
        z = gm.project(gm.pack(x, y, np.zeros(gm.N), np.zeros(E), np.zeros(D)))
        xz, yz, *_ = gm.unpack(z)
        pool.append(np.concatenate([xz.ravel(), yz]))

    def op(v):
        x = v[:M * (E + D)].reshape(M, E + D)
        fx, fy = gm.game_field(x, v[M * (E + D):])
        return np.concatenate([fx.ravel(), fy])

    def sampler(rng):
        i, j = rng.integers(len(pool), size=2)
        lam = rng.uniform()
        return lam * pool[i] + (1 - lam) * pool[j]  # convex combinations stay feasible

    return probe_operator(op, sampler, n_pairs, seed)


# ---------------------------------------------------------------------------

@dataclass
class KktReport:
    ev_stationarity: np.ndarray
    dso_stationarity: float
    road_violation: np.ndarray
    station_violation: np.ndarray
    balance_violation: np.ndarray
    road_dual_negativity: np.ndarray
    station_dual_negativity: np.ndarray
    road_complementarity: np.ndarray
    station_complementarity: np.ndarray

    def worst(self) -> float:
        parts = [self.ev_stationarity, [self.dso_stationarity], self.road_violation,
                 self.station_violation, self.balance_violation, self.road_dual_negativity,
                 self.station_dual_negativity, self.road_complementarity, self.station_complementarity]
        return float(max((np.max(p) for p in map(np.asarray, parts) if np.size(p)), default=0.0))

    def passes(self, tol: float) -> bool:
        return self.worst() <= tol


def kkt_audit(x, y, lambda_dlmp, lambda_r, lambda_t, sc: Scenario, exact: bool = True) -> KktReport:
    """Per-player stationarity at fixed aggregate and coupling primal / dual / complementarity entries."""
    gm = GameModel(sc)
    x = np.asarray(x, dtype=float).reshape(gm.M, gm.E + gm.D)
    y, lam = np.asarray(y, dtype=float), np.asarray(lambda_dlmp, dtype=float)
    lr, lt = np.asarray(lambda_r, dtype=float), np.asarray(lambda_t, dtype=float)
    z = gm.pack(x, y, lam, lr, lt)
    T = gm.operator(z)
    Tx, Ty, *_ = gm.unpack(T)
    ev_stat = np.zeros(gm.M)
    for i in range(gm.M):
        u = x[i] - Tx[i]
        lo = np.zeros(gm.E + gm.D)
        if exact:
            p = qp_oracle(np.ones_like(u), -u, gm.flow, gm.flow_rhs[i], lo, gm.x_hi[i]).z
        else:
            p = solve_separable_qp(gm.flow, gm.flow_rhs[i], np.ones_like(u), u, lo, gm.x_hi[i]).z
        ev_stat[i] = np.max(np.abs(x[i] - p))
    u = y - Ty
    if exact:
        py = qp_oracle(np.ones(gm.ny), -u, gm.Ay, gm.by, gm.y_lo, gm.y_hi, gm.pairs, gm.radius).z
    else:
        py = solve_separable_qp(gm.Ay, gm.by, np.ones(gm.ny), u, gm.y_lo, gm.y_hi, gm.pairs, gm.radius).z
    # relative to the size of y: voltages and flows live on a scale of 1e2 to 1e3
    dso_stat = float(np.max(np.abs(y - py)) / max(1.0, np.max(np.abs(y))))
    sigma = x[:, :gm.E].sum(axis=0) + gm.s
    phi = gm.q @ x[:, gm.E:] if gm.M else np.zeros(gm.D)
    fr, ft = np.isfinite(gm.road_cap), np.isfinite(gm.st_cap)
    slack_r = np.where(fr, gm.road_cap - sigma, 0.0)
    slack_t = np.where(ft, gm.st_cap - phi, 0.0)
    return KktReport(
        ev_stationarity=ev_stat, dso_stationarity=dso_stat,
        road_violation=np.maximum(-slack_r, 0.0), station_violation=np.maximum(-slack_t, 0.0),
        balance_violation=np.abs(gm.balance(x, y)),
        road_dual_negativity=np.maximum(-lr, 0.0), station_dual_negativity=np.maximum(-lt, 0.0),
        road_complementarity=np.abs(lr * slack_r), station_complementarity=np.abs(lt * slack_t),
    )
