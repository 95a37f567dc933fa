import numpy as np
import pytest

from deskbert import tensor as T


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar f at array x (x is perturbed in place and restored)."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        up = f()
        x[idx] = orig - h
        down = f()
        x[idx] = orig
        g[idx] = (up - down) / (2 * h)
    return g


# -- acceptance summary ------------------------------------------------------

_ACCEPTANCE: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::")[-1].removeprefix("test_criterion_")
        number, _, title = name.partition("_")
        _ACCEPTANCE[number] = ("PASS" if report.passed else "FAIL", title.replace("_", " "))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE, key=int):
        verdict, title = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {int(number):2d}  {verdict}  {title}")
