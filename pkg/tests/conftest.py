import numpy as np
import pytest
from hypothesis import settings

from lomoe import tensor as T

settings.register_profile("lomoe", max_examples=60, deadline=None)
settings.load_profile("lomoe")


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


def numeric_grad(fn, arr, h=1e-3):
    """Central finite differences of scalar ``fn()`` w.r.t. ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        up = fn()
        arr[i] = old - h
        down = fn()
        arr[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


VERDICTS = []


def record_verdict(number, name, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {name} ({detail})"
    VERDICTS.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
