import numpy as np
import pytest
from hypothesis import settings

from mdroute.instances import Instance, VariantFlags

settings.register_profile("default", deadline=None, print_blob=True)
settings.load_profile("default")


def make_instance(depots, customers, demands=None, capacity=40, flags=None, backhaul=None, **kw):
    """Hand-built instance helper for small analytic tests."""
    customers = np.asarray(customers, dtype=float).reshape(-1, 2)
    n = len(customers)
    demands = np.ones(n, dtype=int) if demands is None else np.asarray(demands)
    backhaul = np.zeros(n, dtype=bool) if backhaul is None else np.asarray(backhaul, dtype=bool)
    return Instance(depot_coords=depots, customer_coords=customers, raw_demand=demands,
                    is_backhaul=backhaul, capacity=capacity, flags=flags or VariantFlags(), **kw)


@pytest.fixture
def build():
    return make_instance


# acceptance results, echoed once more at the end of the run
CRITERIA: list[str] = []


@pytest.fixture
def criterion():
    """Record one acceptance line; returns a callable (number, ok, detail)."""

    def report(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        CRITERIA.append(line)
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
