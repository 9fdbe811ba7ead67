import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    from flowinr.numerics import Rng
    return Rng(1234)


@pytest.fixture(scope="session")
def box():
    from flowinr.pde_data import BOX
    return BOX


def assert_rel(a, b, tol):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = max(np.abs(a).max(initial=0), np.abs(b).max(initial=0), 1e-12)
    err = np.abs(a - b).max(initial=0) / scale
    assert err <= tol, f"relative error {err:.3e} > {tol:.1e}"
