import numpy as np
import pytest

from icdnet.network import NetworkConfig

# narrow network with a short window for fast unit tests
SMALL = NetworkConfig(T=20, hidden_dims=(12, 8), vel_hidden=8, logvar_hidden=6, dropout_rate=0.1)


@pytest.fixture
def small_cfg():
    return SMALL


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    from icdnet.core import quat_to_rot
    return quat_to_rot(q)


# (criterion, passed, detail) rows filled in by test_acceptance
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in sorted(ACCEPTANCE, key=lambda r: int(r[0].split()[0])):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
