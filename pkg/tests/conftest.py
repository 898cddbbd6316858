import numpy as np
import pytest

from ddcouple.coupling import Coupler
from ddcouple.mesh import generate_bfs_mesh
from ddcouple.rom import build_basis, collect_snapshots, lifting_fields, sample_parameters
from ddcouple.solvers import DDProblem, Mu

SMALL_COUNTS = {"u1": 6, "u2": 5, "p1": 3, "p2": 3, "g": 4}


@pytest.fixture(scope="session")
def coarse_problem():
    """Step geometry at h=1 (under a thousand unknowns)."""
    return DDProblem(generate_bfs_mesh(1.0, 9.0))


@pytest.fixture(scope="session")
def desk_problem():
    return DDProblem(generate_bfs_mesh(0.5, 9.0))


@pytest.fixture(scope="session")
def small_offline(coarse_problem):
    """Snapshots of three FEM-coupled runs (4 steps each) and a small basis."""
    coupler = Coupler(coarse_problem)
    training = sample_parameters(3, 7)
    lifts = lifting_fields(coarse_problem)
    snaps, failures = collect_snapshots(coupler, training, 0.01, 4, lifts=lifts)
    assert not failures
    basis = build_basis(coarse_problem, snaps, SMALL_COUNTS, lifts=lifts, meta={"seed": 7})
    return snaps, basis, lifts


@pytest.fixture(scope="session")
def reduced_coupler(coarse_problem, small_offline):
    return Coupler(coarse_problem, small_offline[1])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TEST_MU = Mu(3.0, 0.8)
