import numpy as np
import pytest

from fedcoe.data_synth import LabeledSet
from fedcoe.nn_core import MlpSpec, ParamVector


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_params(spec: MlpSpec, rng, scale=0.5) -> ParamVector:
    return ParamVector(rng.normal(0, scale, spec.num_params), spec.spec_hash)


def random_set(rng, n, dim, num_classes) -> LabeledSet:
    return LabeledSet(rng.normal(0, 1, (n, dim)), rng.integers(0, num_classes, n), num_classes)


ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
