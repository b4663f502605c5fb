import numpy as np
import pytest

from elegant.pretrained import PretrainedModel, canonical_mixture
from elegant.rewards import LinearReward


@pytest.fixture
def model():
    return PretrainedModel(canonical_mixture())


@pytest.fixture
def linear():
    return LinearReward([1.0])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_KEY = pytest.StashKey[dict]()
N_CRITERIA = 10


@pytest.fixture
def acceptance(request):
    """record(number, name, passed, detail) for the acceptance summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, {})

    def record(number: int, name: str, passed: bool, detail: str) -> bool:
        lines[number] = f"criterion {number:2d} {name:<22s} {'PASS' if passed else 'FAIL'}  {detail}"
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for k in range(1, N_CRITERIA + 1):
        terminalreporter.write_line(lines.get(k, f"criterion {k:2d} {'':<22s} FAIL  not run or errored"))
