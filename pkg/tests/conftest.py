import numpy as np
import pytest

from hybrid_dae import machine, netmodel


@pytest.fixture(scope="session")
def ieee9():
    return netmodel.load_network("ieee9")


@pytest.fixture(scope="session")
def ieee9_eq(ieee9):
    return machine.init_equilibrium(ieee9)


@pytest.fixture(scope="session")
def ieee57():
    return netmodel.load_network("ieee57")


@pytest.fixture()
def rng():
    return np.random.default_rng(20240811)


@pytest.fixture(scope="session")
def machine3():
    """Table machine 3: the smallest-inertia generator of the 9-bus system."""
    return machine.MachineParams(
        H=3.01, D=0.903, X_d=1.3125, Xd_p=0.1813, R_s=0.0, P_m=0.859, E_fd=1.04
    )
