import numpy as np
import pytest

from cotrap import ParticleSpec, TrapConfig, mode_structure


@pytest.fixture(scope="session")
def paper_trap():
    return TrapConfig(v0=120.0, u0=49.0, omega_rf=2 * np.pi * 1e4, eta=0.82,
                      kappa=0.071, r0=1.1e-3, z0=3.5e-3)


def make_pair(q1, q2, gamma0=0.0, radius=193.5e-9, density=1850.0):
    return (
        ParticleSpec.from_radius(q1, radius, density, gamma0=gamma0),
        ParticleSpec.from_radius(q2, radius, density, gamma0=gamma0),
    )


@pytest.fixture(scope="session")
def ref_pair(paper_trap):
    """The characterised unequal-charge pair."""
    return make_pair(2135, 906)


@pytest.fixture(scope="session")
def ref_modes(paper_trap, ref_pair):
    return mode_structure(paper_trap, *ref_pair)


@pytest.fixture(scope="session")
def equal_pair():
    return make_pair(2000, 2000)
