import numpy as np
import pytest
from hypothesis import settings

from comsmile.synthetic import synthetic_market

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

ACCEPTANCE = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (ok, detail)
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def small_market():
    """Four maturities, coarse PDE grid: fast enough for unit tests."""
    return synthetic_market(0.5, expiry_days=(30, 91, 182, 365), n_k=600)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(12345)
