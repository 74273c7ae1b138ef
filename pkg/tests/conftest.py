import numpy as np
import pytest

from dualmem import value_net as vn


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def jitter_params(params, rng, scale=0.1):
    """Perturb every array so gains/offsets/biases are not at their init values."""
    return params.with_arrays({k: v + scale * rng.standard_normal(v.shape) for k, v in params.arrays().items()})


@pytest.fixture
def small_params(rng):
    return jitter_params(vn.init_params(4, rng, hidden=(6, 5)), rng)


_ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line; returns ``ok`` so callers can assert on it."""
    lines = request.config.stash[_ACCEPTANCE_KEY]

    def record(number, ok, detail):
        lines.append((number, "PASS" if ok else "FAIL", detail))
        return ok
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number, status, detail in sorted(lines, key=lambda x: x[0]):
        terminalreporter.write_line(f"{status} criterion {number:>2}: {detail}")
