"""Aggregators and the road / station operators' toll updates.

Everything here consumes aggregates only (link flows, arrivals, energy per
station); no per-EV data reaches an operator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def aggregate_link_flow(background, r) -> np.ndarray:
    """sigma_e = sum_i r_i^e + s_e; ``r`` is (M, E). Summation order is fixed (row order)."""
    r = np.asarray(r, dtype=float).reshape(-1, len(background))
    return r.sum(axis=0) + background


def aggregate_station_arrivals(t, n_stations: int | None = None) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if t.size == 0:
        return np.zeros(n_stations or 0)
    return t.reshape(-1, t.shape[-1]).sum(axis=0)


def station_energy_demand(t, q) -> np.ndarray:
    """phi_d = sum_i q_i t_i^d (kWh)."""
    t = np.asarray(t, dtype=float)
    q = np.asarray(q, dtype=float)
    if q.size == 0:
        return np.zeros(t.shape[-1])
    return q @ t.reshape(len(q), -1)


def projected_dual_step(lam, lam_prev, usage_next, usage, cap, mu, theta) -> np.ndarray:
    """proj_{>=0}[lam + mu (2 u^{k+1} - u^k - c) + theta (lam - lam_prev)]."""
    if not 0 <= theta < 1 / 3:
        raise ValueError("inertia must lie in [0, 1/3)")
    step = lam + mu * (2 * usage_next - usage - cap) + theta * (lam - lam_prev)
    # lifted caps (inf) never bind
    step = np.where(np.isinf(cap), 0.0, step)
    return np.maximum(step, 0.0)


def tno_update(lam_r, lam_r_prev, sigma_next, sigma, cap_r, mu, theta) -> np.ndarray:
    return projected_dual_step(lam_r, lam_r_prev, sigma_next, sigma, cap_r, mu, theta)


def cso_update(lam_t, lam_t_prev, phi_next, phi, cap_t, mu, theta) -> np.ndarray:
    return projected_dual_step(lam_t, lam_t_prev, phi_next, phi, cap_t, mu, theta)


@dataclass
class TollState:
    lambda_r: np.ndarray
    lambda_t: np.ndarray
    lambda_r_prev: np.ndarray
    lambda_t_prev: np.ndarray
