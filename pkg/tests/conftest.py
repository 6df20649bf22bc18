"""
Shared fixtures: grids, corpus drivers and flow configs
"""
import pytest

from app.models import TimeGrid
from app.schemas import BrownianSpec, FiniteEnergySpec, FlowConfig
from app.services.driver_service import driver_service


def finite_energy(grid, *steps):
    return driver_service.sample_driver(FiniteEnergySpec(hdot_steps=list(steps)), grid)


@pytest.fixture
def make_fe():
    """Finite-energy driver from [start, ḣ] pairs on a given grid"""
    return finite_energy


@pytest.fixture
def grid():
    return TimeGrid(T=1.0, n=256)


@pytest.fixture
def zero_driver(grid):
    return finite_energy(grid, (0.0, 0.0))


@pytest.fixture
def linear_driver(grid):
    return finite_energy(grid, (0.0, 1.0))


@pytest.fixture
def piecewise_driver(grid):
    return finite_energy(grid, (0.0, 1.0), (0.5, -2.0))


@pytest.fixture
def brownian_spec():
    return BrownianSpec(kappa=1.0, seed=7)


@pytest.fixture
def brownian_path(brownian_spec):
    return driver_service.sample_driver(brownian_spec, TimeGrid(T=1.0, n=1024))


@pytest.fixture
def flow_cfg():
    return FlowConfig()


@pytest.fixture
def out_dir(tmp_path):
    return str(tmp_path / "out")
