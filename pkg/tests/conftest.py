import numpy as np
import pytest

from chbiot import MaterialTable, State, build_mesh

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def material():
    return MaterialTable()


def random_state(mesh, rng, phi_range=(0.05, 0.95), u_scale=0.05):
    N = mesh.num_nodes
    u = rng.normal(0.0, u_scale, 2 * N)
    u[np.repeat(mesh.boundary_mask, 2)] = 0.0
    return State(
        phi=rng.uniform(*phi_range, N),
        mu=rng.normal(0.0, 0.1, N),
        u=u,
        theta=rng.uniform(0.2, 0.8, N),
        p=rng.normal(0.0, 0.1, N),
    )


@pytest.fixture
def small_mesh():
    return build_mesh(4)
