import math

import numpy as np
import pytest
from builders import V_SUB, base_doc, build, load
from hypothesis import given
from hypothesis import strategies as st

from evgwe.dso import (
    DsoLayout, DsoModel, DsoState, InfeasibleFeeder, dlmp_update, dso_gradient, gen_cost,
    power_balance_residual, reactive_balance_residual, station_prices, voltage_drop_residual,
)
from evgwe.network import BusSpec, DistributionNetwork, GeneratorSpec, LineSpec
from evgwe.oracle import GameModel, qp_oracle


def _chain(p_load=(0.0, 0.0, 0.0), q_load=(0.0, 0.0, 0.0), gens=(), r=(0.1, 0.2), x=(0.05, 0.1)):
    buses = tuple(BusSpec(k + 1, p_load[k], q_load[k], 100.0, 200.0, k == 0) for k in range(3))
    lines = (LineSpec(1, 2, r[0], x[0]), LineSpec(2, 3, r[1], x[1]))
    return DistributionNetwork(buses, lines, tuple(gens), V_SUB)


def _gen(gid, bus, a=0.0, b=0.0, p_max=1000.0, q=1000.0):
    return GeneratorSpec(gid, bus, a, b, 0.0, 0.0, p_max, -q, q)


# cost ----------------------------------------------------------------------

def test_gen_cost_zero_dispatch(fixture_scenario):
    assert gen_cost(fixture_scenario.grid, np.zeros(5)) == 0.0


def test_gen_cost_second_generator_one_megawatt(fixture_scenario):
    p = np.zeros(5)
    p[1] = 1000.0  # kW
    assert gen_cost(fixture_scenario.grid, p) == pytest.approx(45.2)


@given(st.integers(0, 10_000))
def test_gen_cost_matches_per_generator_sum(seed):
    grid = load("toy_line_limit").grid
    p = np.random.default_rng(seed).uniform(0, 500, grid.n_gens)
    want = sum(h.a * v**2 + h.b * v + h.c for h, v in zip(grid.generators, p))
    assert gen_cost(grid, p) == pytest.approx(want, rel=1e-12)


# residuals -----------------------------------------------------------------

def _y(grid, p=(), q=(), P=(), Q=(), v=None):
    lay = DsoLayout.of(grid)
    v = np.full(lay.N, V_SUB) if v is None else v
    return DsoState(np.array(p, float), np.array(q, float), np.array(P, float), np.array(Q, float),
                    np.asarray(v, float)).pack()


def test_balance_all_zero():
    grid = _chain(gens=(_gen(1, 1),))
    y = _y(grid, [0.0], [0.0], [0, 0], [0, 0])
    assert np.all(power_balance_residual(grid, y, np.zeros(3)) == 0)
    assert np.all(reactive_balance_residual(grid, y) == 0)


def test_balance_single_bus():
    grid = DistributionNetwork((BusSpec(1, 100.0, 40.0, 1.0, 200.0, True),), (), (_gen(1, 1),), 150.0)
    y = _y(grid, [100.0], [40.0], [], [], [150.0])
    assert power_balance_residual(grid, y, np.zeros(1)) == pytest.approx([0.0])
    assert reactive_balance_residual(grid, y) == pytest.approx([0.0])


@pytest.mark.parametrize("eps", [1e-3, 0.5, -7.0])
def test_balance_chain_perturbed_flow(eps):
    grid = _chain(p_load=(0, 30, 50), q_load=(0, 10, 20), gens=(_gen(1, 1),))
    y = _y(grid, [80.0], [30.0], [80.0, 50.0], [30.0, 20.0])
    ev = np.zeros(3)
    assert np.allclose(power_balance_residual(grid, y, ev), 0)
    assert np.allclose(reactive_balance_residual(grid, y), 0)
    lay = DsoLayout.of(grid)
    yp = y.copy()
    yp[lay.P.start + 1] += eps  # line 2 -> 3
    assert np.allclose(power_balance_residual(grid, yp, ev), [0, eps, -eps])
    yq = y.copy()
    yq[lay.Q.start + 1] += eps
    assert np.allclose(reactive_balance_residual(grid, yq), [0, eps, -eps])


def test_balance_counts_station_demand():
    grid = _chain(gens=(_gen(1, 1),))
    y = _y(grid, [0.0], [0.0], [0, 0], [0, 0])
    assert np.allclose(power_balance_residual(grid, y, [0, 0, 25.0]), [0, 0, 25.0])


def test_voltage_drop_examples():
    grid = _chain(gens=(_gen(1, 1),))
    y = _y(grid, [0.0], [0.0], [0, 0], [0, 0])
    assert np.all(voltage_drop_residual(grid, y) == 0)
    # lossless lines: flows leave the voltages equal
    lossless = _chain(gens=(_gen(1, 1),), r=(0, 0), x=(0, 0))
    y = _y(lossless, [0.0], [0.0], [100, 50], [10, 5], [V_SUB, V_SUB, V_SUB])
    assert np.all(voltage_drop_residual(lossless, y) == 0)
    y = _y(lossless, [0.0], [0.0], [100, 50], [10, 5], [V_SUB, V_SUB - 1, V_SUB])
    assert np.any(voltage_drop_residual(lossless, y) != 0)


def test_voltage_drop_one_line_by_hand():
    R = 0.25
    grid = _chain(gens=(_gen(1, 1),), r=(R, 0.1), x=(0.0, 0.0))
    drop = 2 * 1e-3 * R * 100.0  # kV^2 per ohm kW
    v = [V_SUB, V_SUB - drop, V_SUB - drop]
    y = _y(grid, [0.0], [0.0], [100.0, 0.0], [0.0, 0.0], v)
    assert np.allclose(voltage_drop_residual(grid, y), 0, atol=1e-12)


# gradient and dual updates -------------------------------------------------

def test_dso_gradient_zero_prices(fixture_scenario):
    assert np.all(dso_gradient(fixture_scenario.grid, np.zeros(33)) == 0)


def test_dso_gradient_uniform_prices(fixture_scenario):
    grid = fixture_scenario.grid
    lay = DsoLayout.of(grid)
    g = dso_gradient(grid, np.ones(33))
    assert np.all(g[lay.P] == 0)
    assert np.all(g[lay.p] == -1)
    assert np.all(g[lay.q] == 0) and np.all(g[lay.Q] == 0) and np.all(g[lay.v] == 0)


@given(st.integers(0, 10_000))
def test_dso_gradient_matches_finite_differences(seed):
    grid = load("toy_line_limit").grid
    rng = np.random.default_rng(seed)
    lam = rng.normal(0.2, 0.1, grid.n_buses)
    ev = rng.uniform(0, 50, grid.n_buses)
    y = rng.normal(0, 100, DsoLayout.of(grid).size)
    h = 1e-5
    fd = np.array([(lam @ power_balance_residual(grid, y + h * e, ev)
                    - lam @ power_balance_residual(grid, y - h * e, ev)) / (2 * h) for e in np.eye(y.size)])
    g = dso_gradient(grid, lam)
    assert np.max(np.abs(fd - g)) <= 1e-6 * max(1.0, np.max(np.abs(g)))


def test_dlmp_update_examples():
    lam = np.array([0.1, 0.2])
    assert np.array_equal(dlmp_update(lam, lam, np.zeros(2), np.zeros(2), 0.5, 0.2), lam)
    g = np.array([3.0, -1.0])
    assert np.allclose(dlmp_update(lam, lam, g, g, 0.5, 0.0), lam + 0.5 * g)


@given(st.integers(0, 10_000), st.floats(0, 0.33))
def test_dlmp_update_direct_formula(seed, theta):
    rng = np.random.default_rng(seed)
    lk, lkm, g1, g0 = rng.normal(size=(4, 5))
    mu = rng.uniform(0.01, 2)
    want = lk + mu * (2 * g1 - g0) + theta * (lk - lkm)
    assert np.allclose(dlmp_update(lk, lkm, g1, g0, mu, theta), want)


def test_dlmp_update_rejects_large_inertia():
    with pytest.raises(ValueError):
        dlmp_update(np.zeros(1), np.zeros(1), np.zeros(1), np.zeros(1), 1.0, 1 / 3)


def test_station_prices_examples():
    assert np.all(station_prices(np.full(4, 0.3), [0, 2, 3]) == 0.3)
    lam = np.array([0.1, 0.2, 0.3])
    p = station_prices(lam, [1, 1])
    assert p[0] == p[1] == 0.2


def test_station_prices_fixture_index_map(fixture_scenario):
    sc = fixture_scenario
    lam = np.arange(33) * 0.01 + 0.05
    by_id = {b.id: lam[k] for k, b in enumerate(sc.grid.buses)}
    want = [by_id[s.bus] for s in sc.stations]
    assert np.array_equal(station_prices(lam, sc.station_bus), want)


# projection ----------------------------------------------------------------

def test_prox_returns_feasible_target_without_costs():
    grid = _chain(p_load=(0, 30, 50), q_load=(0, 10, 20), gens=(_gen(1, 1),))
    dso = DsoModel(grid)
    target = dso.project(_y(grid, [80.0], [30.0], [80.0, 50.0], [30.0, 20.0]))
    assert np.allclose(dso.prox(0.7, target, warm=False), target, atol=1e-8)


def test_prox_clips_generator_on_single_bus():
    grid = DistributionNetwork((BusSpec(1, 0.0, 0.0, 1.0, 200.0, True),), (), (_gen(1, 1, p_max=50.0),), 150.0)
    y = DsoModel(grid).prox(1.0, np.array([80.0, 0.0, 150.0]))
    assert y == pytest.approx([50.0, 0.0, 150.0])


def _oracle_prox(sc, tau0, target):
    gm = GameModel(sc)
    diag = np.full(gm.ny, 1 / tau0)
    lin = -target / tau0
    diag[gm.ip] += 2 * gm.a
    lin[gm.ip] += gm.bcoef
    return qp_oracle(diag, lin, gm.Ay, gm.by, gm.y_lo, gm.y_hi, gm.pairs, gm.radius).z


@pytest.mark.parametrize("name", ["toy_station_cap", "toy_line_limit"])
@pytest.mark.parametrize("seed", range(4))
def test_prox_matches_qp_oracle(name, seed):
    sc = load(name)
    dso = DsoModel(sc.grid)
    rng = np.random.default_rng(seed)
    base = dso.load_flow()
    target = base + rng.normal(0, 80, base.size)
    tau0 = float(10 ** rng.uniform(-1, 3))
    y = dso.prox(tau0, target, warm=False)
    assert np.max(np.abs(y - _oracle_prox(sc, tau0, target))) <= 1e-6 * max(1.0, np.max(np.abs(y)))


def test_projection_satisfies_private_constraints():
    sc = load("toy_line_limit")
    dso = DsoModel(sc.grid)
    lay = dso.layout
    y = dso.project(np.random.default_rng(3).normal(0, 500, lay.size))
    assert np.max(np.abs(reactive_balance_residual(sc.grid, y))) <= 1e-8 * 500
    assert np.max(np.abs(voltage_drop_residual(sc.grid, y))) <= 1e-8 * 500
    assert np.all(y >= dso.lo) and np.all(y <= dso.hi)
    P, Q = y[lay.P][0], y[lay.Q][0]
    assert P**2 + Q**2 <= 330.0**2 * (1 + 1e-8)


def test_prox_independent_of_warm_start():
    sc = load("toy_line_limit")
    dso = DsoModel(sc.grid)
    rng = np.random.default_rng(5)
    for _ in range(5):
        dso.prox(50.0, dso.load_flow() + rng.normal(0, 300, dso.layout.size))  # move the warm start around
    target = dso.load_flow() + rng.normal(0, 100, dso.layout.size)
    warm = dso.prox(50.0, target)
    cold = DsoModel(sc.grid).prox(50.0, target, warm=False)
    assert np.max(np.abs(warm - cold)) <= 1e-6


def test_load_flow_lies_in_private_set(fixture_scenario):
    grid = fixture_scenario.grid
    dso = DsoModel(grid)
    y = dso.load_flow()
    assert np.max(np.abs(reactive_balance_residual(grid, y))) <= 1e-6
    assert np.max(np.abs(voltage_drop_residual(grid, y))) <= 1e-8
    assert np.all(y >= dso.lo) and np.all(y <= dso.hi)


def test_infeasible_reactive_range():
    doc = base_doc()
    doc["grid"]["generators"][0].update(q_min=-10.0, q_max=10.0)
    with pytest.raises(InfeasibleFeeder):
        DsoModel(build(doc).grid)


def test_prox_rejects_nonpositive_step():
    with pytest.raises(ValueError):
        DsoModel(load("toy_station_cap").grid).prox(0.0, np.zeros(8))


def test_unlimited_lines_have_no_discs():
    dso = DsoModel(load("toy_station_cap").grid)
    assert dso.pairs.shape == (0, 2)
    assert math.isinf(load("toy_station_cap").grid.lines[0].s_max)
