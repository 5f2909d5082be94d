import numpy as np
import pytest

from rklimit.detector import default_binning, load_materials, precompute_signal_column
from rklimit.inference import LikelihoodInputs
from rklimit.spectrum import BackgroundModel, Binning, simulate_toy

CRITERIA = []


def record(number, ok, detail):
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    CRITERIA.append((number, line))
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(CRITERIA):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def default_model():
    return load_materials()


@pytest.fixture(scope="session")
def edges():
    return default_binning()


@pytest.fixture(scope="session")
def signal_column(default_model, edges):
    return precompute_signal_column(edges, default_model)


@pytest.fixture(scope="session")
def flat_background(edges):
    return BackgroundModel(Binning(edges), np.full(60, 10.0))


# background-only, moderate (about the median sensitivity) and strong injections
DATASET_YIELDS = {"background-only": 0.0, "moderate": 1000.0, "strong": 5000.0}


@pytest.fixture(scope="session")
def datasets(flat_background, signal_column):
    out = {}
    for i, (name, y) in enumerate(DATASET_YIELDS.items()):
        toy = simulate_toy(flat_background, y, signal_column, 1000 + i)
        out[name] = LikelihoodInputs(toy.counts, flat_background.expected, signal_column)
    return out
