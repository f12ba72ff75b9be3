import numpy as np
import pytest

from spikekit import tensor as T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with T.default_dtype(np.float64):
        yield


def binary(rng, shape, p=0.5):
    return (rng.random(shape) < p).astype(np.uint8)


# (number, title, passed, seconds, detail) for each acceptance criterion run
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, ok, secs, detail in sorted(ACCEPTANCE):
        line = f"criterion {num:>2}: {'PASS' if ok else 'FAIL'}  {title}  ({secs:.1f}s)"
        terminalreporter.write_line(line + (f"  {detail}" if detail else ""))
