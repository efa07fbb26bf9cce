import numpy as np
import pytest

from mow import CostConfig, DistanceSpec, NetSpec, init_params
from mow.autodiff import central_difference
from mow.data import philox

ACCEPTANCE_LINES: list[str] = []


def record(criterion: int, passed: bool, detail: str) -> None:
    """Log one acceptance verdict for the end-of-session summary, then assert it."""
    line = f"ACCEPTANCE {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert passed, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def fd_grad(f, theta, eps=1e-3, order=4):
    """Finite-difference gradient of a scalar function of a ParamVector."""
    return central_difference(lambda v: f(theta.with_values(v)), theta.values, eps, order)


@pytest.fixture
def tiny_spec():
    return NetSpec(4, 2, ((5, "tanh"),), ((5, "tanh"),), "sigmoid")


@pytest.fixture
def tiny_theta(tiny_spec):
    return init_params(tiny_spec, philox(0, 0))


@pytest.fixture
def mmd_cost():
    return CostConfig(lam=1.0, distance=DistanceSpec("mmd_imq"))
