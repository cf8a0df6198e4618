import logging

import numpy as np
import pytest

from mpstan.network import ModelDims
from mpstan.synthetic import make_synthetic


@pytest.fixture(autouse=True)
def _quiet_population_warning(caplog):
    # synthetic noise pushes S+I+R slightly above population; expected
    caplog.set_level(logging.ERROR, logger="mpstan.data_pipeline")


@pytest.fixture(scope="session")
def small_truth():
    """5 patches x 40 days: enough for 6/2/2-style splits with t_in=t_out=3."""
    return make_synthetic(n_patches=5, n_days=40, seed=3)


@pytest.fixture
def tiny_dims():
    return ModelDims(d_gru=6, d_gat=4, heads=2, t_out=3)


def random_symmetric_graph(rng, n, p=0.3):
    """Random connected-enough symmetric 0/1 adjacency (no isolated node)."""
    a = (rng.random((n, n)) < p).astype(float)
    a = np.triu(a, 1)
    a = a + a.T
    for i in range(n):
        if a[i].sum() == 0:
            j = (i + 1) % n
            a[i, j] = a[j, i] = 1.0
    return a


_CRITERIA: dict = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: criterion(number, passed, detail)."""

    def record(number: int, passed: bool, detail: str) -> None:
        _CRITERIA[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
