import itertools

import numpy as np
import pytest
from builders import base_doc, build, load, random_doc
from hypothesis import given
from hypothesis import strategies as st

from evgwe.ev import (
    AggregateSignal, EvPopulation, InfeasiblePolytope, PriceSignal, aggregate_signal, bpr_latency,
    build_local_polytope, congestion_price, preference_cost, price_gradient_i, prox_step_i,
    pseudo_gradient_i, reflected_gradient_i, station_cost, total_cost, travel_cost,
)
from evgwe.network import EvProfile
from evgwe.oracle import qp_oracle


def _ev(E, D, alpha=0.5, beta=0.5, r=None, t=None, omega=5.0, demand=30.0):
    r = tuple(np.zeros(E) if r is None else r)
    t = tuple(np.eye(D)[0] if t is None else t)
    return EvProfile(1, 1, tuple(range(1, D + 1)), demand, omega, alpha, beta, r, t)


def _zero_agg(E, D):
    return AggregateSignal(np.zeros(E), np.zeros(D), np.zeros(E), np.zeros(D))


# preference cost -----------------------------------------------------------

def test_preference_cost_zero_at_preference():
    ev = _ev(4, 2, r=[1, 0, 1, 0])
    assert preference_cost(ev, ev.pref_route, ev.pref_station) == 0.0


def test_preference_cost_half_dollar_weights():
    ev = _ev(3, 2, r=[1, 0, 0], t=[1, 0])
    # ||t - t~||^2 = 2 with the route at its preference
    assert preference_cost(ev, [1, 0, 0], [0, 1]) == pytest.approx(0.5)


@given(st.integers(0, 10_000))
def test_preference_cost_matches_direct_quadratic(seed):
    rng = np.random.default_rng(seed)
    ev = _ev(3, 2, alpha=rng.uniform(), beta=rng.uniform(), r=rng.uniform(size=3), t=[0.3, 0.7])
    r, t = rng.uniform(size=3), rng.uniform(size=2)
    want = sum(0.5 * ev.alpha * (a - b) ** 2 for a, b in zip(r, ev.pref_route))
    want += sum(0.5 * ev.beta * (a - b) ** 2 for a, b in zip(t, ev.pref_station))
    assert preference_cost(ev, r, t) == pytest.approx(want, rel=1e-12)


def test_preference_cost_dimension_mismatch():
    with pytest.raises(ValueError):
        preference_cost(_ev(3, 2), np.zeros(4), np.zeros(2))


# latency and costs ---------------------------------------------------------

def test_bpr_free_flow():
    assert bpr_latency(0.3, 100.0, 0.0, 0.15, 4.0) == pytest.approx(0.3)


@pytest.mark.parametrize("pi, xi, load, factor", [(0.15, 4.0, 1.0, 1.15), (4.0, 1.0, 0.5, 3.0)])
def test_bpr_reference_points(pi, xi, load, factor):
    eta, kappa = 0.2, 120.0
    assert bpr_latency(eta, kappa, load * kappa, pi, xi) == pytest.approx(factor * eta)


@given(st.floats(0, 500), st.floats(0.01, 500), st.floats(0.01, 5), st.floats(0.5, 5))
def test_bpr_strictly_increasing(s, ds, pi, xi):
    lo = bpr_latency(0.1, 100.0, s, pi, xi)
    hi = bpr_latency(0.1, 100.0, s + ds, pi, xi)
    assert hi > lo


def test_travel_cost_examples():
    assert travel_cost(np.zeros(3), np.array([0.1, 0.2, 0.3])) == 0.0
    assert travel_cost(np.array([1.0]), np.array([0.2])) == pytest.approx(0.2)


def test_travel_cost_matches_path_enumeration():
    # 1 -> 2 -> 4, 1 -> 3 -> 4 and the direct edge 1 -> 4
    edges = [(1, 2), (2, 4), (1, 3), (3, 4), (1, 4)]
    paths = [[0, 1], [2, 3], [4]]
    lat = np.array([0.1, 0.2, 0.15, 0.3, 0.5])
    w = np.array([0.5, 0.3, 0.2])
    r = np.zeros(len(edges))
    for p, wk in zip(paths, w):
        r[p] += wk
    want = sum(wk * lat[p].sum() for p, wk in zip(paths, w))
    assert travel_cost(r, lat) == pytest.approx(want, rel=1e-14)


def test_congestion_price_examples():
    slope = 2.0 / (2.0 * 12)  # zeta = 2, gamma = 2, 12 chargers
    assert congestion_price(slope, 0.0) == 0.0
    assert congestion_price(slope, 24.0) == pytest.approx(2.0)
    assert congestion_price(slope, 2.0 * 12) == pytest.approx(2.0)  # full utilization gives zeta


def test_congestion_price_uses_station_fields():
    sc = load("toy_station_cap")
    s = sc.stations[0]
    assert sc.congestion_slope[0] == pytest.approx(s.zeta / (s.gamma * s.chargers))


def test_station_cost_examples():
    psi = np.array([0.3, 0.7, 1.1])
    assert station_cost(np.zeros(3), psi) == 0.0
    assert station_cost(np.eye(3)[1], psi) == pytest.approx(0.7)
    t = np.array([0.2, 0.5, 0.3])
    assert station_cost(t, psi) == pytest.approx(float(t @ psi))


def test_total_cost_is_sum_of_parts():
    sc = build(random_doc(1))
    ev = sc.evs[0]
    x = EvPopulation(sc).project(np.random.default_rng(0).uniform(size=(sc.n_evs, 6)))
    r, t = x[:, :4], x[:, 4:]
    agg = aggregate_signal(sc, r, t)
    want = (preference_cost(ev, r[0], t[0]) + ev.omega * travel_cost(r[0], agg.latency)
            + station_cost(t[0], agg.psi))
    assert total_cost(ev, r[0], t[0], agg) == pytest.approx(want)


def test_total_cost_zero_case():
    ev = _ev(2, 1, t=[0.0])
    assert total_cost(ev, np.zeros(2), np.zeros(1), _zero_agg(2, 1)) == 0.0


def test_fixture_values_of_time_in_range(fixture_scenario):
    omega = fixture_scenario.ev_arrays["omega"]
    assert omega.min() >= 3.6 and omega.max() <= 14.4
    q = fixture_scenario.ev_arrays["demand"]
    assert q.min() >= 20.0 and q.max() <= 70.0


# gradients -----------------------------------------------------------------

def test_pseudo_gradient_zero_at_preference_without_externalities():
    ev = _ev(3, 2, r=[1, 1, 0], t=[0, 1])
    g = pseudo_gradient_i(ev, ev.pref_route, ev.pref_station, _zero_agg(3, 2))
    assert np.all(g == 0.0)


def _fd(f, x, h=1e-5):
    out = np.zeros_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        out[k] = (f(x + e) - f(x - e)) / (2 * h)
    return out


@given(st.integers(0, 10_000))
def test_pseudo_gradient_matches_finite_differences(seed):
    sc = build(random_doc(seed % 7, n_evs=3))
    rng = np.random.default_rng(seed)
    x = EvPopulation(sc).project(rng.uniform(size=(3, 6)))
    agg = aggregate_signal(sc, x[:, :4], x[:, 4:])  # frozen
    i = int(rng.integers(3))
    ev = sc.evs[i]
    g = pseudo_gradient_i(ev, x[i, :4], x[i, 4:], agg)
    fd = _fd(lambda v: total_cost(ev, v[:4], v[4:], agg), x[i].copy())
    assert np.max(np.abs(fd - g)) <= 1e-6 * max(1.0, np.max(np.abs(g)))


def test_pseudo_gradient_single_edge_wardrop_convention():
    alpha, omega, eta, pi, xi, kappa, s = 0.7, 9.0, 0.2, 4.0, 1.0, 50.0, 10.0
    r, r_pref = 0.6, 0.2
    ev = EvProfile(1, 1, (1,), 30.0, omega, alpha, 0.5, (r_pref,), (1.0,))
    lat = bpr_latency(eta, kappa, r + s, pi, xi)
    agg = AggregateSignal(np.array([r + s]), np.zeros(1), np.atleast_1d(lat), np.zeros(1))
    g = pseudo_gradient_i(ev, [r], [1.0], agg)
    # no d l / d sigma term: the aggregate is held fixed
    assert g[0] == pytest.approx(alpha * (r - r_pref) + omega * eta * (1 + pi * ((r + s) / kappa) ** xi))


def test_price_gradient_examples():
    ev = _ev(2, 2, demand=50.0)
    zero = PriceSignal(np.zeros(2), np.zeros(2), np.zeros(2))
    assert np.all(price_gradient_i(ev, zero) == 0.0)
    p = PriceSignal(np.array([0.4, 0.0]), np.array([0.03, 0.0]), np.array([0.07, 0.2]))
    g = price_gradient_i(ev, p)
    assert g[2] == pytest.approx(5.0)
    assert g[0] == pytest.approx(0.4)


@given(st.integers(0, 10_000))
def test_price_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    E, D = 4, 3
    ev = _ev(E, D, demand=rng.uniform(20, 70))
    p = PriceSignal(rng.uniform(0, 1, E), rng.uniform(0, 0.1, D), rng.normal(0.1, 0.05, D))

    def pay(v):
        return p.lambda_r @ v[:E] + ev.demand * (p.lambda_t + p.lambda_station) @ v[E:]

    x = rng.uniform(size=E + D)
    assert np.allclose(_fd(pay, x), price_gradient_i(ev, p), rtol=1e-6, atol=1e-8)


@given(st.integers(0, 10_000))
def test_reflected_gradient_identity(seed):
    rng = np.random.default_rng(seed)
    a, b, c = rng.normal(size=(3, 7))
    assert np.array_equal(reflected_gradient_i(a, b, c), 2 * a - b + c)
    assert np.allclose(reflected_gradient_i(a, a, c), a + c)
    assert np.all(reflected_gradient_i(np.zeros(3), np.zeros(3), np.zeros(3)) == 0)


# polytope and prox ---------------------------------------------------------

def _line_doc(n_edges):
    """Path 1 -> 2 -> ... with a single station at the last node."""
    doc = base_doc()
    nodes = list(range(1, n_edges + 2))
    doc["transport"] = {"nodes": nodes, "edges": [
        {"tail": k, "head": k + 1, "eta": 0.1, "kappa": 100.0, "background": 0.0, "cap": 1000.0}
        for k in nodes[:-1]]}
    doc["stations"] = [dict(doc["stations"][0], node=nodes[-1])]
    doc["evs"] = [{"origin": 1, "demand": 30.0, "omega": 5.0}]
    return doc


@pytest.mark.parametrize("n_edges", [1, 2])
def test_polytope_on_a_path_forces_equal_flows(n_edges):
    sc = build(_line_doc(n_edges))
    ev = sc.evs[0]
    poly = build_local_polytope(ev, sc)
    rng = np.random.default_rng(0)
    z = prox_step_i(ev, poly, 1.0, rng.uniform(-1, 2, n_edges + 1)).x
    assert np.allclose(z, z[0], atol=1e-9)
    assert z[-1] == pytest.approx(1.0)


def _vertices(poly):
    n = poly.A.shape[1]
    out = []
    for combo in itertools.product((0, 1, 2), repeat=n):
        c = np.array(combo)
        free = c == 2
        z = np.where(c == 1, poly.hi, poly.lo).astype(float)
        if c[poly.lo == poly.hi].any():
            continue
        Af = poly.A[:, free]
        if free.any():
            if np.linalg.matrix_rank(Af) < free.sum():
                continue
            rhs = poly.b - poly.A[:, ~free] @ z[~free]
            z[free] = np.linalg.lstsq(Af, rhs, rcond=None)[0]
        if np.allclose(poly.A @ z, poly.b, atol=1e-10) and np.all(z >= -1e-10) and np.all(z <= poly.hi + 1e-10):
            out.append(z)
    return out


def test_polytope_vertices_conserve_flow():
    sc = load("toy_road_cap")
    assert sc.transport.n_edges <= 6
    tr = sc.transport
    E = tr.n_edges
    station_nodes = {s.node for s in sc.stations}
    for ev in sc.evs:
        poly = build_local_polytope(ev, sc)
        verts = _vertices(poly)
        assert verts
        for z in verts:
            r, t = z[:E], z[E:]
            assert t.sum() == pytest.approx(1.0)
            for k, v in enumerate(tr.nodes):
                if v != ev.origin and v not in station_nodes:
                    assert tr.incidence[k] @ r == pytest.approx(0.0, abs=1e-10)


def test_polytope_without_reachable_station():
    doc = base_doc()
    doc["transport"]["edges"] = doc["transport"]["edges"][1:2]  # only 2 -> 3
    doc["evs"] = [{"origin": 1, "demand": 30.0, "omega": 5.0, "pref_route": [0.0], "pref_station": [1.0, 0.0]}]
    sc = build(doc, validate=False)
    with pytest.raises(InfeasiblePolytope):
        build_local_polytope(sc.evs[0], sc)


def _toy_prox_case(seed):
    sc = build(random_doc(seed % 5, n_evs=3))
    rng = np.random.default_rng(seed)
    i = int(rng.integers(sc.n_evs))
    ev = sc.evs[i]
    return sc, ev, build_local_polytope(ev, sc), rng


def test_prox_returns_feasible_preference():
    sc = load("toy_station_cap")
    ev = sc.evs[0]
    pref = np.concatenate([ev.pref_route, ev.pref_station])
    z = prox_step_i(ev, build_local_polytope(ev, sc), 0.3, pref).x
    assert np.allclose(z, pref, atol=1e-9)


def test_prox_is_identity_on_the_polytope_without_preferences():
    sc = load("toy_station_cap")
    pop = EvPopulation(sc)
    ev = sc.evs[1]
    ev0 = EvProfile(ev.id, ev.origin, ev.feasible, ev.demand, ev.omega, 0.0, 0.0, ev.pref_route, ev.pref_station)
    target = pop.project(np.random.default_rng(1).uniform(size=(3, 6)))[1]
    z = prox_step_i(ev0, build_local_polytope(ev0, sc), 2.0, target).x
    assert np.allclose(z, target, atol=1e-9)


@given(st.integers(0, 10_000))
def test_prox_matches_qp_oracle(seed):
    sc, ev, poly, rng = _toy_prox_case(seed)
    tau = rng.uniform(0.01, 2.0)
    target = rng.normal(0.5, 1.0, poly.A.shape[1])
    E, D = sc.transport.n_edges, sc.n_stations
    curv = np.concatenate([np.full(E, ev.alpha), np.full(D, ev.beta)])
    pref = np.concatenate([ev.pref_route, ev.pref_station])
    ref = qp_oracle(curv + 1 / tau, -(curv * pref + target / tau), poly.A, poly.b, poly.lo, poly.hi)
    z = prox_step_i(ev, poly, tau, target).x
    assert np.max(np.abs(z - ref.z)) <= 1e-6


@given(st.integers(0, 10_000))
def test_prox_output_satisfies_constraints(seed):
    sc, ev, poly, rng = _toy_prox_case(seed)
    z = prox_step_i(ev, poly, rng.uniform(0.01, 2.0), rng.normal(0, 3, poly.A.shape[1])).x
    assert np.max(np.abs(poly.A @ z - poly.b)) <= 1e-8
    assert np.all(z >= poly.lo) and np.all(z <= poly.hi)
    assert z[sc.transport.n_edges:].sum() == pytest.approx(1.0, abs=1e-8)


@given(st.integers(0, 10_000))
def test_prox_is_nonexpansive(seed):
    sc, ev, poly, rng = _toy_prox_case(seed)
    tau = rng.uniform(0.01, 2.0)
    a, b = rng.normal(0, 2, (2, poly.A.shape[1]))
    pa, pb = prox_step_i(ev, poly, tau, a).x, prox_step_i(ev, poly, tau, b).x
    assert np.linalg.norm(pa - pb) <= np.linalg.norm(a - b) + 1e-9


def test_batched_prox_matches_single(fixture_scenario):
    sc = fixture_scenario
    pop = EvPopulation(sc)
    rng = np.random.default_rng(2)
    target = rng.normal(0.2, 0.5, (sc.n_evs, pop.E + pop.D))
    tau = 0.03
    z = pop.prox(tau, target, warm=False)
    for i in (0, 17, 99):
        ev = sc.evs[i]
        zi = prox_step_i(ev, build_local_polytope(ev, sc), tau, target[i]).x
        assert np.max(np.abs(z[i] - zi)) <= 1e-8


def test_prox_rejects_nonpositive_step():
    sc = load("toy_station_cap")
    ev = sc.evs[0]
    with pytest.raises(ValueError):
        prox_step_i(ev, build_local_polytope(ev, sc), 0.0, np.zeros(6))
