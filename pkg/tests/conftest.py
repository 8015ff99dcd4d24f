import numpy as np
import pytest

from gvsl import phantom


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Ten 16^3 phantoms, enough for quick trainer and probe runs."""
    root = tmp_path_factory.mktemp("phantoms16")
    phantom.generate_dataset(3, 10, root, phantom.PhantomConfig(extent=16, regions=3))
    return phantom.load_dataset(root)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


CRITERIA = []


@pytest.fixture
def criterion():
    """Record one acceptance line; repeated in the terminal summary."""

    def record(n, ok, detail):
        line = f"CRITERION {n} {'PASS' if ok else 'FAIL'}: {detail}"
        print(line)
        CRITERIA.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
