import numpy as np
import pytest

from camfreepano.synth import smooth_image


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def smooth512():
    return smooth_image(512, seed=3)


@pytest.fixture(scope="session")
def smooth128():
    return smooth_image(128, seed=5, min_period=24.0)


def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture
def criterion(request):
    """Records one acceptance line; the summary prints them all at the end of the run."""
    lines = request.config._acceptance_lines

    def record(number, title, passed, detail):
        lines.append(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title}: {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
