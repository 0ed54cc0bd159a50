import numpy as np
import pytest

from reserve_admm.model import BuildingModel, FleetSpec, generate_fleet


def random_model(rng, n=3, m=2, q=2, N=6, id=0, bounds=True) -> BuildingModel:
    """Random stable model with nonnegative diffusion-like ``A``."""
    A = rng.uniform(0.0, 1.0, (n, n))
    A *= rng.uniform(0.5, 0.95) / A.sum(axis=1, keepdims=True)
    B = rng.normal(size=(n, m))
    E = rng.normal(scale=0.3, size=(n, q))
    if bounds:
        x_lo, x_hi = np.full(N * n, -3.0), np.full(N * n, 3.0)
        u_lo, u_hi = np.full(N * m, -1.0), np.full(N * m, 1.0)
    else:
        x_lo, x_hi = np.full(N * n, -np.inf), np.full(N * n, np.inf)
        u_lo, u_hi = np.full(N * m, -np.inf), np.full(N * m, np.inf)
    return BuildingModel(
        id=id, A=A, B=B, E=E, x1=rng.normal(scale=0.5, size=n), v=rng.normal(scale=0.5, size=N * q),
        x_lo=x_lo, x_hi=x_hi, u_lo=u_lo, u_hi=u_hi, eta=rng.uniform(0.5, 1.5, m),
        c=rng.uniform(0.1, 1.0, N * m), N=N,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_fleet_n6():
    """Three small buildings on a six-hour horizon (vertex checks are cheap)."""
    return generate_fleet(FleetSpec(seed=7, counts={"small": 3}, N=6, start_hour=18))


@pytest.fixture(scope="session")
def small_fleet_n24():
    return generate_fleet(FleetSpec(seed=11, counts={"small": 3}, N=24))


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
