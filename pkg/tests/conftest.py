import numpy as np
import pytest

from nishilab.geometry import NEAREST_NEIGHBOR, RANDOM_FIELD, build_family, build_lattice
from nishilab.model import ModelParameters, Species, SpinGlass, edwards_anderson

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def chain(L, beta, mu, delta, field=(0.0, 0.0)):
    """Open 1D chain with a p=1 site family and nearest-neighbour bonds."""
    lat = build_lattice(1, L)
    fams = {1: build_family(lat, RANDOM_FIELD), 2: build_family(lat, NEAREST_NEIGHBOR)}
    species = (Species(2, float(delta), float(mu)), Species(1, float(field[1]), float(field[0])))
    return SpinGlass(lat, fams, ModelParameters(float(beta), species), label=f"chain L={L}")


@pytest.fixture
def ea3():
    return edwards_anderson(3, beta=0.5, mu=0.5, delta=1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
