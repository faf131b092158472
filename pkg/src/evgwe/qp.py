"""Weighted projections onto {A z = b} intersected with boxes and 2-D discs.

Both player subproblems of the iteration have the form

    minimize   1/2 sum_k w_k (z_k - c_k)^2
    subject to A z = b,  lo <= z <= hi,  ||(z_p, z_q)|| <= radius  for listed pairs

with positive weights (equal inside each disc pair). The problem is solved on
its dual: for multipliers nu the inner minimizer is the clipped point
z(nu) = proj_S(c - A^T nu / w), the dual is concave and C^1, and a regularized
semismooth Newton ascent with backtracking drives A z(nu) - b to zero. The
primal iterate is always inside the boxes and discs, so only the equality
residual needs to converge.

A batch of problems sharing ``A`` and the disc layout is solved at once; the
EV population uses this to update every vehicle in one call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class QPFailure(RuntimeError):
    """The dual Newton iteration did not reach the requested equality residual."""


@dataclass
class QPResult:
    z: np.ndarray
    nu: np.ndarray
    residual: np.ndarray  # max |A z - b| per problem
    iterations: int


def _project(u, lo, hi, pairs, radius):
    z = np.clip(u, lo, hi)
    if pairs is None:
        return z, None
    up = u[:, pairs]  # (B, K, 2)
    nrm = np.linalg.norm(up, axis=-1)
    outside = nrm > radius
    scale = np.where(outside, radius / np.where(outside, nrm, 1.0), 1.0)
    z[:, pairs] = up * scale[..., None]
    return z, (up, nrm, outside)


def _polish(A, b, w, c, lo, hi, z, pairs, radius):
    """Re-solve with the current active set frozen: free entries satisfy the equalities exactly.

    Entries at a box bound and disc pairs on their circle stay where they are;
    returns None when the free entries cannot absorb the residual inside their boxes.
    """
    free = (z > lo) & (z < hi)
    if pairs is not None:
        on_circle = np.abs(np.hypot(z[pairs[:, 0]], z[pairs[:, 1]]) - radius) <= 1e-9 * (1 + radius)
        free[pairs[on_circle].ravel()] = False
    if not free.any():
        return None
    AF = A[:, free]
    rhs = b - A[:, ~free] @ z[~free]
    K = (AF / w[free]) @ AF.T
    nu = np.linalg.lstsq(K, AF @ c[free] - rhs, rcond=None)[0]
    out = z.copy()
    out[free] = c[free] - (AF.T @ nu) / w[free]
    slack = 1e-9 * (1 + np.abs(out))
    if np.any(out < lo - slack) or np.any(out > hi + slack):
        return None
    out = np.clip(out, lo, hi)
    if pairs is not None:
        nrm = np.hypot(out[pairs[:, 0]], out[pairs[:, 1]])
        if np.any(nrm > radius * (1 + 1e-9)):
            return None
    return out


def solve_separable_qp(A, b, w, c, lo, hi, pairs=None, radius=None, nu0=None,
                       tol=1e-10, max_iter=200, raise_on_failure=True) -> QPResult:
    """Solve one problem (1-D inputs) or a batch (2-D inputs, one row per problem)."""
    A = np.asarray(A, dtype=float)
    single = np.ndim(b) == 1
    b, w, c, lo, hi = (np.atleast_2d(np.asarray(v, dtype=float)) for v in (b, w, c, lo, hi))
    B = max(x.shape[0] for x in (b, w, c, lo, hi))
    b, w, c, lo, hi = (np.broadcast_to(x, (B, x.shape[1])) for x in (b, w, c, lo, hi))
    m, n = A.shape
    if pairs is not None:
        pairs = np.asarray(pairs, dtype=int).reshape(-1, 2)
        radius = np.asarray(radius, dtype=float).reshape(-1)
        if len(pairs) == 0:
            pairs = None
    box_mask = np.ones(n)
    if pairs is not None:
        if np.any(np.isfinite(lo[:, pairs.ravel()])) or np.any(np.isfinite(hi[:, pairs.ravel()])):
            raise ValueError("disc coordinates must not carry finite box bounds")
        box_mask[pairs.ravel()] = 0.0
        Ap = A[:, pairs]  # (m, K, 2)

    nu = np.zeros((B, m)) if nu0 is None else np.array(np.broadcast_to(nu0, (B, m)), dtype=float)
    scale_h = np.einsum("mn,bn->b", A**2, 1.0 / w) / max(m, 1) + 1e-300

    def evaluate(nu_, idx):
        u = c[idx] - (nu_ @ A) / w[idx]
        z, disc = _project(u, lo[idx], hi[idx], pairs, radius)
        resid = z @ A.T - b[idx]
        val = 0.5 * np.sum(w[idx] * (z - c[idx]) ** 2, axis=1) + np.sum(nu_ * resid, axis=1)
        return u, z, disc, resid, val

    active = np.arange(B)
    z_out = np.empty((B, n))
    res_out = np.empty(B)
    u, z, disc, g, val = evaluate(nu, active)
    bscale = 1.0 + np.max(np.abs(b), axis=1)
    stall = np.zeros(B, dtype=int)
    best = np.full(B, np.inf)
    it = 0
    for it in range(max_iter + 1):
        gmax = np.max(np.abs(g), axis=1) if m else np.zeros(len(active))
        # degenerate vertices can make the Newton iteration cycle between
        # Jacobian elements; such problems are handed to the active-set polish
        done = (gmax <= tol) | (stall >= 20)
        if it == max_iter:
            done[:] = True
        if done.any():
            z_out[active[done]] = z[done]
            res_out[active[done]] = gmax[done]
            keep = ~done
            active = active[keep]
            u, z, g, val, gmax = u[keep], z[keep], g[keep], val[keep], gmax[keep]
            stall, best = stall[keep], best[keep]
            if disc is not None:
                disc = tuple(x[keep] for x in disc)
        if active.size == 0:
            break
        wa = w[active]
        # iterations without a new best residual, counted only in the small-residual
        # regime: far from the solution the residual is not monotone along the ascent
        near = gmax <= 1e-4 * bscale[active]
        stall = np.where(near & (gmax > 0.999 * best), stall + 1, 0)
        best = np.minimum(best, gmax)
        free = ((u > lo[active]) & (u < hi[active])) * box_mask
        H = ((free / wa)[:, None, :] * A) @ A.T
        if pairs is not None:
            up, nrm, outside = disc
            uhat = up / np.maximum(nrm, 1e-300)[..., None]
            J = np.broadcast_to(np.eye(2), up.shape[:2] + (2, 2)).copy()
            ratio = np.where(outside, radius / np.maximum(nrm, 1e-300), 1.0)
            J = np.where(outside[..., None, None],
                         ratio[..., None, None] * (J - uhat[..., :, None] * uhat[..., None, :]), J)
            J = J / wa[:, pairs[:, 0]][..., None, None]
            H += np.einsum("mka,bkac,nkc->bmn", Ap, J, Ap)
        # damping proportional to each row's own curvature, so rows whose variables
        # are mostly clamped are not swamped by a global scale
        diag = H[:, np.arange(m), np.arange(m)]
        floor = 1e-10 * scale_h[active][:, None]
        reg = np.maximum(diag, floor) * (1e-6 * np.minimum(1.0, gmax) + 1e-12)[:, None]
        H[:, np.arange(m), np.arange(m)] += reg
        d = np.linalg.solve(H, g[..., None])[..., 0]
        slope = np.sum(g * d, axis=1)
        new = [u.copy(), z.copy(), g.copy(), val.copy()]
        new_disc = None if disc is None else tuple(x.copy() for x in disc)

        def accept(idx, nu_try, trial, ok):
            ut, zt, dt, gt, vt = trial
            acc = idx[ok]
            nu[active[acc]] = nu_try[ok]
            new[0][acc], new[1][acc], new[2][acc], new[3][acc] = ut[ok], zt[ok], gt[ok], vt[ok]
            if new_disc is not None:
                for x_new, x_t in zip(new_disc, dt):
                    x_new[acc] = x_t[ok]

        # full Newton step where it passes Armijo; elsewhere the dual is concave and C^1
        # along d, so its maximizer on [0, 1] is found by bisection on d'(A z - b)
        idx = np.arange(len(active))
        nu_try = nu[active] + d
        trial = evaluate(nu_try, active)
        slack = 1e-13 * (np.abs(val) + 1.0)
        ok = trial[4] >= val + 1e-4 * slope - slack
        accept(idx, nu_try, trial, ok)
        bad = np.flatnonzero(~ok)
        if bad.size:
            def rising(s_):
                gt = evaluate(nu[active[bad]] + s_[:, None] * d[bad], active[bad])[3]
                return np.sum(gt * d[bad], axis=1) > 0

            # the derivative is nonincreasing in s, so the largest power of two where it is
            # still positive is found by bisection on the exponent (d can be huge where
            # every variable of a row is clamped), then refined inside [s, 2s]
            k_lo, k_hi = np.full(bad.size, -1), np.full(bad.size, 64)
            while np.any(k_hi - k_lo > 1):
                k_mid = (k_lo + k_hi) // 2
                up = rising(np.ldexp(1.0, -k_mid))
                k_hi, k_lo = np.where(up, k_mid, k_hi), np.where(up, k_lo, k_mid)
            s_lo = np.ldexp(1.0, -k_hi)
            s_hi = np.where(k_hi == 0, 1.0, 2 * s_lo)
            s_lo = np.where(rising(s_lo), s_lo, 0.0)
            for _ in range(12):
                s_mid = 0.5 * (s_lo + s_hi)
                up = rising(s_mid)
                s_lo, s_hi = np.where(up, s_mid, s_lo), np.where(up, s_hi, s_mid)
            nu_try = nu[active[bad]] + s_lo[:, None] * d[bad]
            trial = evaluate(nu_try, active[bad])
            accept(bad, nu_try, trial, trial[4] >= val[bad] - slack[bad])
        u, z, g, val = new
        disc = new_disc

    for k in np.flatnonzero(res_out > tol):
        z_pol = _polish(A, b[k], w[k], c[k], lo[k], hi[k], z_out[k], pairs, radius)
        if z_pol is not None:
            r_pol = np.max(np.abs(A @ z_pol - b[k])) if m else 0.0
            if r_pol < res_out[k]:
                z_out[k], res_out[k] = z_pol, r_pol
    if raise_on_failure and np.any(res_out > max(tol, 1e-8)):
        bad = int(np.argmax(res_out))
        raise QPFailure(f"equality residual {res_out[bad]:.3e} after {max_iter} Newton steps "
                        f"(problem {bad}); the constraint set may be empty")
    if single:
        return QPResult(z_out[0], nu[0], res_out[:1], it)
    return QPResult(z_out, nu, res_out, it)
