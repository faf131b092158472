import sys
from pathlib import Path

import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).resolve().parent))

from builders import ACCEPTANCE, FIXTURE, TOY_EPS, TOYS, load  # noqa: E402

from evgwe.oracle import extragradient_solve  # noqa: E402
from evgwe.scenario import load_scenario  # noqa: E402
from evgwe.solver import run, with_config  # noqa: E402

settings.register_profile("evgwe", max_examples=40, deadline=None)
settings.load_profile("evgwe")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])


@pytest.fixture(scope="session")
def fixture_scenario():
    return load_scenario(FIXTURE)


@pytest.fixture(scope="session")
def fixture_run(fixture_scenario):
    """theta = 0 solve of the 33-bus fixture, with the smallest toll and surcharge seen at any iteration."""
    seen = {"min_dual": 0.0}

    def watch(k, state, rep):
        cur = state.current
        seen["min_dual"] = min(seen["min_dual"], float(cur.lambda_r.min(initial=0.0)),
                               float(cur.lambda_t.min(initial=0.0)))

    res = run(fixture_scenario, with_config(fixture_scenario, theta=0.0), callback=watch)
    return res, seen["min_dual"]


@pytest.fixture(scope="session")
def toy_solutions():
    """name -> (scenario, I-FoRB result, extragradient solution)."""
    out = {}
    for name in TOYS:
        sc = load(name)
        res = run(sc, with_config(sc, **TOY_EPS))
        ref = extragradient_solve(sc, tol=1e-9)
        out[name] = (sc, res, ref)
    return out
