import numpy as np
import pytest

from widearea.grid import build_chain, build_two_area, simulate
from widearea.identify import area_blocks, identify, probe_scenario

TWO_AREAS = {1: [0, 1], 2: [2, 3]}
CHAIN_SYSID = dict(k=16, N=50, decimate=5)


@pytest.fixture(scope="session")
def two_area():
    return build_two_area()


@pytest.fixture(scope="session")
def two_area_probe(two_area):
    return simulate(two_area, probe_scenario(two_area))


@pytest.fixture(scope="session")
def two_area_blocks(two_area, two_area_probe):
    return area_blocks(two_area_probe, two_area, TWO_AREAS, k=8, N=250)


@pytest.fixture(scope="session")
def two_area_consensus(two_area, two_area_probe):
    return identify(two_area_probe, two_area, TWO_AREAS, k=8, N=250)


@pytest.fixture(scope="session")
def chain():
    return build_chain(4, 2, 7)


@pytest.fixture(scope="session")
def chain_probe(chain):
    return simulate(chain, probe_scenario(chain))


@pytest.fixture(scope="session")
def chain_areas(chain):
    return {a: chain.gens_in_area(a) for a in sorted(set(chain.area_of_gen))}


@pytest.fixture(scope="session")
def chain_blocks(chain, chain_probe, chain_areas):
    return area_blocks(chain_probe, chain, chain_areas, **CHAIN_SYSID)


def synthetic_arx(a, bs, n=400, seed=0):
    """Noiseless outputs of shared-denominator ARX pairs driven by seeded white noise."""
    from widearea.sysid import simulate_arx

    rng = np.random.default_rng(seed)
    out = []
    for b in bs:
        u = rng.normal(size=n)
        out.append((simulate_arx(a, b, u), u))
    return out


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
