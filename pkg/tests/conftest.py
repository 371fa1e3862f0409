import numpy as np
import pytest

from gaussperc.kernels import make_cauchy, make_log_kernel


@pytest.fixture(scope="session")
def cauchy1():
    return make_cauchy(1.0, 2)


@pytest.fixture(scope="session")
def cauchy05():
    return make_cauchy(0.5, 2)


@pytest.fixture(scope="session")
def log_kernel():
    return make_log_kernel(1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance") or __import__("sys").modules.get(
        "tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.format_line(n))
