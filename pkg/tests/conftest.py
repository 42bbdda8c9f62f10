import numpy as np
import pytest

from survfuse.simulation import DgpSpec, generate


@pytest.fixture(scope="session")
def case1_small():
    return generate(DgpSpec("1", 200, 400, seed=11))


@pytest.fixture(scope="session")
def case1_trial():
    return generate(DgpSpec("1", 500, 1000, seed=3)).source(1)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one PASS/FAIL line per acceptance criterion for the run summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(name, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'} {name}: {detail}"
        lines.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
