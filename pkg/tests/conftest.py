import copy
import sys

import numpy as np
import pytest

from dlac.mdp import Normalizer, ProcessEnv
from dlac.process import ProcessParams, load_params
from dlac.steady import load_reference_set, select_references


@pytest.fixture(scope="session")
def params():
    return load_params()


@pytest.fixture(scope="session")
def ref_set():
    return load_reference_set()


@pytest.fixture(scope="session")
def selected(ref_set):
    return select_references(ref_set)


@pytest.fixture(scope="session")
def normalizer(ref_set):
    return Normalizer().fit(ref_set.states)


@pytest.fixture
def env(params, normalizer):
    return ProcessEnv(params, normalizer)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def unchecked_params(base=None, **changes):
    """A parameter set that skips validation (for degenerate analytic cases)."""
    p = copy.copy(base or ProcessParams())
    for k, v in changes.items():
        object.__setattr__(p, k, v)
    return p


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
