import numpy as np
import pytest

from guarctl.dynamics import get_system
from guarctl.sets import CompactSet
from guarctl.timegrid import uniform_partition
from guarctl.value import TerminalCost, solve_lower_value, solve_upper_value


@pytest.fixture(scope="session")
def example():
    return get_system("example2x2")


@pytest.fixture(scope="session")
def x2_cost():
    return TerminalCost.coordinate(1, 2)


@pytest.fixture(scope="session")
def u9(example):
    return CompactSet.grid([-1, -1], [1, 1], (9, 9)).nodes()


@pytest.fixture(scope="session")
def coarse_lower(example, x2_cost, u9):
    """Lower value of the example on a 61x61 grid with 25 time steps."""
    space = CompactSet.grid(example.value_box.lower, example.value_box.upper, (61, 61))
    return solve_lower_value(example, x2_cost, space, uniform_partition(0, 1, 25), u9, example.Q.nodes())


@pytest.fixture(scope="session")
def coarse_upper(example, x2_cost, u9, coarse_lower):
    return solve_upper_value(example, x2_cost, coarse_lower.space, coarse_lower.time_knots, u9, example.Q.nodes())


@pytest.fixture(scope="session")
def full_grids(example, x2_cost, u9):
    """Acceptance-resolution grids: 201x201 over [-1.2, 1.2]^2, 100 steps."""
    import time

    space = CompactSet.grid([-1.2, -1.2], [1.2, 1.2], (201, 201))
    tk = uniform_partition(0, 1, 100)
    t = time.perf_counter()
    lower = solve_lower_value(example, x2_cost, space, tk, u9, example.Q.nodes())
    t_lower = time.perf_counter() - t
    upper = solve_upper_value(example, x2_cost, space, tk, u9, example.Q.nodes())
    return {"lower": lower, "upper": upper, "t_lower": t_lower}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_acceptance_key = pytest.StashKey[list]()


@pytest.fixture
def report(request):
    """Record one summary line per acceptance criterion; printed at the end of the session."""
    lines = request.config.stash.setdefault(_acceptance_key, [])

    def emit(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_acceptance_key, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
